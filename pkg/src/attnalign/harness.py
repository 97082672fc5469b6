"""Training loop, evaluation and experiment runner.

One optimiser step minimises ``L_det(source) + L_dis(source) + L_dis(target)``.
The gradient reversal layer in front of every discriminator turns that single
objective into the minimax game: discriminators descend on ``L_dis`` while the
backbone and attention modules ascend on it.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .adversarial import DiscriminatorStack, adversarial_pass, gamma
from .attention import export_attention_map
from .config import TrainConfig
from .dataset import CLASS_NAMES, DetectionSample, batch_images, load
from .detector import AnchorTargets, Box, Detector, ForwardResult, decode, detection_loss, match_anchors, write_detections_jsonl
from .evaluation import MapResult, mean_average_precision
from .nn import load_checkpoint, save_checkpoint
from .plotting import plot_training_curves
from .tensor import DropoutStream, NonFiniteError, Tensor

log = logging.getLogger(__name__)

VARIANTS = {
    # name: (attention module present, domain adaptation active)
    "no-da": (True, False),
    "no-attn-da": (False, True),
    "ours": (True, True),
}
DTYPE = np.float32
METRIC_FIELDS = ("iteration", "det_loss", "dis_source", "dis_target", "gamma", "disc_accuracy", "eval_map")


class NumericalFailure(RuntimeError):
    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class MetricsRecord:
    iteration: int
    det_loss: float
    dis_source: float
    dis_target: float
    gamma: float
    disc_accuracy: float
    eval_map: float | None = None

    def row(self) -> list[str]:
        return [repr(v) if isinstance(v, float) else ("" if v is None else str(v)) for v in dataclasses.astuple(self)]


@dataclass
class TrainState:
    model: Detector
    discriminators: DiscriminatorStack | None
    config: TrainConfig
    variant: str
    velocity: dict[int, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    history: list[MetricsRecord] = field(default_factory=list)

    @property
    def uses_adaptation(self) -> bool:
        return self.discriminators is not None

    def detector_lr(self) -> float:
        o = self.config.optim
        return o.lr * (o.lr_decay_factor if self.iteration >= o.lr_decay_step else 1.0)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"detector.{k}": v for k, v in self.model.state_dict().items()}
        if self.discriminators is not None:
            state.update({f"discriminators.{k}": v for k, v in self.discriminators.state_dict().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.model.load_state_dict({k[9:]: v for k, v in state.items() if k.startswith("detector.")})
        if self.discriminators is not None:
            self.discriminators.load_state_dict(
                {k[15:]: v for k, v in state.items() if k.startswith("discriminators.")}
            )


def build_state(config: TrainConfig, variant: str, dtype=DTYPE) -> TrainState:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
    use_attention, adapt = VARIANTS[variant]
    det_cfg = config.model.detector(use_attention)
    model = Detector(det_cfg, np.random.default_rng([config.seed, 0]), dtype)
    discs = None
    if adapt:
        discs = DiscriminatorStack(
            det_cfg.grid.sides, det_cfg.channels, np.random.default_rng([config.seed, 1]), config.model.disc_width, dtype
        )
    return TrainState(model, discs, config, variant)


class BatchSampler:
    """Shuffled without-replacement batches, reshuffled each epoch from (seed, stream, epoch)."""

    def __init__(self, size: int, batch_size: int, seed: int, stream: int):
        self.size, self.batch_size, self.seed, self.stream = size, batch_size, seed, stream

    def batch(self, iteration: int) -> np.ndarray:
        per_epoch = max(self.size // self.batch_size, 1)
        epoch, k = divmod(iteration, per_epoch)
        perm = np.random.default_rng([self.seed, self.stream, epoch]).permutation(self.size)
        idx = perm[k * self.batch_size:(k + 1) * self.batch_size]
        if len(idx) < self.batch_size:
            idx = np.resize(perm, self.batch_size)
        return idx


def anchor_targets(samples: Sequence[DetectionSample], model: Detector) -> list[AnchorTargets]:
    anchors = model.config.grid.anchors()
    return [match_anchors(s.boxes, anchors) for s in samples]


def forward(state: TrainState, images: np.ndarray, stream: DropoutStream | None) -> ForwardResult:
    return state.model(Tensor(images.astype(state.model.backbone.stem.conv.weight.dtype, copy=False)), stream)


def _adversarial_terms(state: TrainState, result: ForwardResult, gamma_value: float, domain: int):
    cfg = state.config
    return adversarial_pass(
        result.features,
        result.attention,
        gamma_value,
        state.discriminators,
        cfg.schedule.grl_coefficient,
        domain,
        cfg.schedule.alignment().modulation,
        cfg.model.detach_objectness,
    )


def train_step(
    state: TrainState,
    source: Sequence[DetectionSample],
    target: Sequence[DetectionSample],
    source_targets: Sequence[AnchorTargets],
) -> MetricsRecord:
    """One SGD step on a source batch (labelled) and a target batch (unlabelled)."""
    cfg = state.config
    it = state.iteration
    schedule = cfg.schedule.alignment()
    active = state.uses_adaptation and it >= schedule.t_grl
    g = gamma(it, schedule) if active else 0.0

    params = state.model.parameters()
    disc_params = state.discriminators.parameters() if state.discriminators is not None else []
    for p in params + disc_params:
        p.grad = None

    state.model.train()
    src = forward(state, batch_images(source), DropoutStream(cfg.seed, (it, 0)))
    cls, box = src.outputs.flat()
    det = detection_loss(cls, box, source_targets)
    total = det.total
    dis_s = dis_t = float("nan")
    accuracy = float("nan")
    if active:
        if len(source) != len(target):
            raise ValueError("source and target batches must have equal size")
        loss_s, probs_s = _adversarial_terms(state, src, g, 0)
        tgt = forward(state, batch_images(target), DropoutStream(cfg.seed, (it, 1)))
        loss_t, probs_t = _adversarial_terms(state, tgt, g, 1)
        total = total + loss_s + loss_t
        dis_s, dis_t = float(loss_s.data), float(loss_t.data)
        correct = [np.mean(p.data < 0.5) for p in probs_s] + [np.mean(p.data >= 0.5) for p in probs_t]
        accuracy = float(np.mean(correct))

    total.backward()
    _sgd_update(state, params, state.detector_lr())
    if disc_params:
        _sgd_update(state, disc_params, cfg.optim.disc_lr)

    record = MetricsRecord(it, float(det.total.data), dis_s, dis_t, g, accuracy)
    state.history.append(record)
    state.iteration += 1
    return record


def _sgd_update(state: TrainState, params: Sequence[Tensor], lr: float) -> None:
    o = state.config.optim
    for p in params:
        if p.grad is None:
            continue
        grad = p.grad.astype(p.dtype, copy=False)
        if o.weight_decay:
            grad = grad + o.weight_decay * p.data
        v = state.velocity.get(id(p))
        v = grad if v is None else o.momentum * v + grad
        state.velocity[id(p)] = v
        p.data = p.data - lr * v


def adversarial_objective(
    state: TrainState, source_images: np.ndarray, target_images: np.ndarray, iteration: int | None = None
) -> Tensor:
    """``L_dis(source) + L_dis(target)`` on a fixed batch with dropout disabled."""
    if state.discriminators is None:
        raise ValueError("variant has no discriminators")
    it = state.iteration if iteration is None else iteration
    g = gamma(it, state.config.schedule.alignment())
    state.model.eval()
    src = forward(state, source_images, None)
    tgt = forward(state, target_images, None)
    loss_s, _ = _adversarial_terms(state, src, g, 0)
    loss_t, _ = _adversarial_terms(state, tgt, g, 1)
    state.model.train()
    return loss_s + loss_t


# -- evaluation --------------------------------------------------------------------

def predict(
    state: TrainState, samples: Sequence[DetectionSample], batch: int = 50
) -> dict[int, list[tuple[Box, float]]]:
    e = state.config.eval
    anchors = state.model.config.grid.anchors()
    out: dict[int, list[tuple[Box, float]]] = {}
    state.model.eval()
    with T.no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start:start + batch]
            cls, box = forward(state, batch_images(chunk), None).outputs.flat()
            for i, s in enumerate(chunk):
                out[s.image_id] = decode(cls.data[i], box.data[i], anchors, e.score_threshold, e.nms_iou)
    state.model.train()
    return out


def evaluate_map(state: TrainState, samples: Sequence[DetectionSample], iou_threshold: float = 0.5) -> MapResult:
    if not samples:
        raise ValueError("evaluation set is empty")
    detections = predict(state, samples)
    truth = {s.image_id: s.boxes for s in samples}
    return mean_average_precision(detections, truth, iou_threshold)


# -- experiment runner -------------------------------------------------------------

@dataclass
class Splits:
    source_train: list[DetectionSample]
    target_train: list[DetectionSample]
    source_eval: list[DetectionSample]
    target_eval: list[DetectionSample]

    @classmethod
    def load(cls, root: str | Path) -> "Splits":
        root = Path(root)
        return cls(*(load(root / name) for name in ("source_train", "target_train", "source_eval", "target_eval")))


def write_metrics_csv(path: Path, history: Sequence[MetricsRecord]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for rec in history:
            writer.writerow(rec.row())


def train(state: TrainState, splits: Splits, out_dir: Path | None = None) -> TrainState:
    cfg = state.config
    bs = cfg.optim.batch_size
    src_sampler = BatchSampler(len(splits.source_train), bs, cfg.seed, 0)
    tgt_sampler = BatchSampler(len(splits.target_train), bs, cfg.seed, 1)
    targets = anchor_targets(splits.source_train, state.model)
    stop = cfg.schedule.max_iteration
    if cfg.schedule.early_stop:
        stop = min(stop, cfg.schedule.early_stop)
    exports = set(cfg.eval.export_iterations)
    probe = splits.target_eval[:1]

    while state.iteration < stop:
        it = state.iteration
        if out_dir is not None and it in exports:
            export_maps(state, probe, out_dir / "attention", it)
        si = src_sampler.batch(it)
        ti = tgt_sampler.batch(it)
        try:
            record = train_step(
                state,
                [splits.source_train[i] for i in si],
                [splits.target_train[i] for i in ti],
                [targets[i] for i in si],
            )
        except NonFiniteError as exc:
            dump = None
            if out_dir is not None:
                dump = out_dir / f"nonfinite_iter{it}.npz"
                np.savez(dump, **exc.arrays)
            raise NumericalFailure(f"iteration {it}: {exc}", dump) from exc
        if cfg.eval.eval_every and (it + 1) % cfg.eval.eval_every == 0:
            record.eval_map = evaluate_map(state, splits.target_eval[: cfg.eval.eval_subset]).mean
        if it % 100 == 0:
            log.info("iter %d det=%.4f dis_s=%.4f dis_t=%.4f gamma=%.3f", it, record.det_loss,
                     record.dis_source, record.dis_target, record.gamma)
    if out_dir is not None and stop in exports:
        export_maps(state, probe, out_dir / "attention", stop)
    return state


def export_maps(state: TrainState, samples: Sequence[DetectionSample], directory: Path, iteration: int) -> list[Path]:
    """PGM + CSV objectness maps for the first sample, one pair per scale."""
    if not state.model.config.use_attention or not samples:
        return []
    state.model.eval()
    with T.no_grad():
        result = forward(state, batch_images(samples[:1]), None)
    state.model.train()
    written = []
    for s, res in enumerate(result.attention):
        pgm, _ = export_attention_map(directory, s, iteration, res.objectness.data[0])
        written.append(pgm)
    return written


def _class_names(per_class: dict[int, float]) -> dict[str, float]:
    return {CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c): ap for c, ap in per_class.items()}


def run_experiment(config: TrainConfig, variant: str, data_dir: str | Path, out_dir: str | Path,
                   splits: Splits | None = None) -> dict:
    """Train one variant/seed, evaluate on both eval splits and write artefacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = splits if splits is not None else Splits.load(data_dir)
    state = build_state(config, variant)
    try:
        train(state, splits, out_dir)
    finally:
        write_metrics_csv(out_dir / "metrics.csv", state.history)
    save_checkpoint(out_dir / "checkpoint.atal", state.state_dict())

    iou_thr = config.eval.iou_threshold
    src_det = predict(state, splits.source_eval)
    tgt_det = predict(state, splits.target_eval)
    src_map = mean_average_precision(src_det, {s.image_id: s.boxes for s in splits.source_eval}, iou_thr)
    tgt_map = mean_average_precision(tgt_det, {s.image_id: s.boxes for s in splits.target_eval}, iou_thr)
    write_detections_jsonl(out_dir / "detections_target.jsonl", tgt_det)

    summary = {
        "variant": variant,
        "seed": config.seed,
        "iterations": state.iteration,
        "final_map_source": src_map.mean,
        "final_map_target": tgt_map.mean,
        "per_class_ap": {"source": _class_names(src_map.per_class), "target": _class_names(tgt_map.per_class)},
        "config": config.to_dict(),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    plot_training_curves(state.history, out_dir / "training_curves.png")
    return summary


def aggregate(summaries: Sequence[dict]) -> dict:
    """Mean and sample standard deviation of the per-seed mAPs."""
    def stats(key):
        vals = [s[key] for s in summaries]
        return {
            "mean": statistics.fmean(vals),
            "std": statistics.stdev(vals) if len(vals) > 1 else 0.0,
            "values": vals,
        }

    return {
        "variant": summaries[0]["variant"],
        "seeds": [s["seed"] for s in summaries],
        "final_map_source": stats("final_map_source"),
        "final_map_target": stats("final_map_target"),
    }


def load_state_from_checkpoint(config: TrainConfig, variant: str, path: str | Path) -> TrainState:
    state = build_state(config, variant)
    state.load_state_dict(load_checkpoint(path))
    return state


def isfinite_history(history: Sequence[MetricsRecord]) -> bool:
    return all(math.isfinite(r.det_loss) for r in history)
