"""``attnalign`` command line: data generation, training, evaluation, γ sweeps
and attention-map export.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
4 numerical failure during training.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import harness
from .adversarial import GAMMA_MODES, AlignmentSchedule, gamma_of_r, write_schedule_csv
from .attention import export_attention_map
from .config import ConfigError, TrainConfig, dump_config, load_config
from .dataset import DatasetFormatError, generate, load, read_ppm, split_specs
from .detector import write_detections_jsonl
from .evaluation import mean_average_precision
from .nn import CheckpointError
from .plotting import plot_gamma_curves, plot_map_comparison
from .tensor import ConfigurationError, DimensionError, NonFiniteError, Tensor

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "ATTN_ALIGN_THREADS"
MODE_ALIASES = {"const0": "constant0", "const1": "constant1", "gpl": "global-plus-local"}
SPLIT_NAMES = ("source_train", "target_train", "source_eval", "target_eval")


class UsageError(Exception):
    pass


def _config(args) -> TrainConfig:
    return load_config(args.config, args.set or ())


def _float_list(raw: str, name: str) -> list[float]:
    items = [x.strip() for x in raw.split(",") if x.strip()]
    if not items:
        raise UsageError(f"--{name} needs at least one value")
    try:
        return [float(x) for x in items]
    except ValueError:
        raise UsageError(f"--{name}: cannot parse {raw!r} as numbers") from None


def _seed_list(raw: str) -> list[int]:
    try:
        seeds = [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--seed: cannot parse {raw!r}") from None
    if not seeds:
        raise UsageError("--seed needs at least one value")
    return seeds


# -- commands ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    specs = split_specs(cfg.data.scene(), cfg.data.seed)
    for name, spec in specs.items():
        count = cfg.data.train_count if name.endswith("train") else cfg.data.eval_count
        generate(spec, count, out / name)
        print(f"{name}: {count} images -> {out / name}")
    return EXIT_OK


def cmd_train(args) -> int:
    base = _config(args)
    seeds = _seed_list(args.seed) if args.seed is not None else [base.seed]
    out = Path(args.out)
    splits = harness.Splits.load(args.data)
    summaries = []
    for seed in seeds:
        cfg = dataclasses.replace(base, seed=seed)
        run_dir = out if len(seeds) == 1 else out / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, run_dir / "config.ini")
        summary = harness.run_experiment(cfg, args.variant, args.data, run_dir, splits)
        summaries.append(summary)
        print(f"seed {seed}: source mAP@0.5={summary['final_map_source']:.4f} "
              f"target mAP@0.5={summary['final_map_target']:.4f}")
    if len(seeds) > 1:
        agg = harness.aggregate(summaries)
        (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
        t = agg["final_map_target"]
        print(f"target mAP@0.5 over {len(seeds)} seeds: {t['mean']:.4f} ± {t['std']:.4f}")
        final = t["mean"]
    else:
        final = summaries[0]["final_map_target"]
    print(f"mAP@0.5={final:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    state = harness.load_state_from_checkpoint(cfg, args.variant, args.checkpoint)
    split_dir = Path(args.data) / args.split
    samples = load(split_dir if split_dir.is_dir() else args.data)
    detections = harness.predict(state, samples)
    result = mean_average_precision(detections, {s.image_id: s.boxes for s in samples}, cfg.eval.iou_threshold)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_detections_jsonl(out / "detections.jsonl", detections)
        report = {"checkpoint": str(args.checkpoint), "images": len(samples),
                  "per_class_ap": {str(k): v for k, v in result.per_class.items()}, "map": result.mean}
        (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for c, ap in sorted(result.per_class.items()):
        print(f"class {c}: AP={ap:.4f}")
    print(f"mAP@0.5={result.mean:.6f}")
    return EXIT_OK


def _sweep_settings(deltas: Sequence[float], modes: Sequence[str], default_delta: float) -> list[tuple[str, str, float]]:
    settings = [(f"sigmoid_d{d:g}", "sigmoid", d) for d in deltas]
    settings += [(m, m, default_delta) for m in modes if m != "sigmoid"]
    return settings


def cmd_sweep_gamma(args) -> int:
    cfg = _config(args)
    deltas = _float_list(args.deltas, "deltas")
    if any(d <= 0 for d in deltas):
        raise UsageError("--deltas must all be positive")
    modes = [MODE_ALIASES.get(m.strip(), m.strip()) for m in (args.modes or "").split(",") if m.strip()]
    unknown = [m for m in modes if m not in GAMMA_MODES]
    if unknown:
        raise UsageError(f"unknown mode(s) {', '.join(unknown)}; valid: {', '.join(GAMMA_MODES)}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.schedule
    settings = _sweep_settings(deltas, modes, s.delta)
    r = np.linspace(0.0, 1.0, 201)
    curves = {}
    for label, mode, delta in settings:
        schedule = AlignmentSchedule(delta, s.t_grl, s.max_iteration, mode)
        path = write_schedule_csv(out / f"gamma_{label}.csv", schedule, args.step)
        curves[label] = (r, [gamma_of_r(float(x), mode, delta) for x in r])
        print(f"{label}: {path}")
    plot_gamma_curves(curves, out / "gamma_curves.png")

    if args.train:
        if not args.data:
            raise UsageError("--train needs --data")
        splits = harness.Splits.load(args.data)
        rows = []
        for label, mode, delta in settings:
            run_cfg = load_config(args.config, list(args.set or ()) + [f"schedule.mode={mode}", f"schedule.delta={delta!r}"])
            summary = harness.run_experiment(run_cfg, args.variant, args.data, out / "runs" / label, splits)
            rows.append((label, summary["final_map_target"]))
            print(f"{label}: target mAP@0.5={summary['final_map_target']:.4f}")
        with (out / "comparison.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["setting", "final_map_target"])
            writer.writerows([(label, repr(v)) for label, v in rows])
        plot_map_comparison(rows, out / "comparison.png")
    return EXIT_OK


def cmd_export_attention(args) -> int:
    cfg = _config(args)
    state = harness.load_state_from_checkpoint(cfg, "no-da", args.checkpoint)
    pixels = read_ppm(args.image)
    side = state.model.config.image_side
    if pixels.shape != (3, side, side):
        raise DimensionError(f"image {args.image} is {pixels.shape[2]}×{pixels.shape[1]}, model expects {side}×{side}")
    images = pixels[None].astype(np.float32) / 255.0
    state.model.eval()
    result = state.model(Tensor(images))
    for s, res in enumerate(result.attention):
        pgm, csv_path = export_attention_map(args.out, s, None, res.objectness.data[0])
        print(f"scale {s}: {pgm} {csv_path}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [data], [model], [schedule], [optim], [eval] sections")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--strict", action="store_true", help="single-threaded BLAS for bit-exact repeats")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="attnalign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write source/target train and eval splits")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train one variant for one or more seeds")
    t.add_argument("--data", required=True, help="directory written by 'generate'")
    t.add_argument("--variant", choices=sorted(harness.VARIANTS), default="ours")
    t.add_argument("--seed", help="seed or comma-separated seeds (default: config)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="mAP@0.5 of a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset root or a single split directory")
    e.add_argument("--split", choices=SPLIT_NAMES, default="target_eval")
    e.add_argument("--variant", choices=sorted(harness.VARIANTS), default="ours")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep-gamma", parents=[common], help="γ schedule curves and optional training sweep")
    w.add_argument("--deltas", default="0.5,1,5,10")
    w.add_argument("--modes", default="linear,cubic,const1",
                   help=f"extra modes: {', '.join(GAMMA_MODES)} (const0/const1 accepted)")
    w.add_argument("--step", type=int, default=1, help="iteration stride of the CSV rows")
    w.add_argument("--out", required=True)
    w.add_argument("--train", action="store_true", help="also train each setting and compare target mAP")
    w.add_argument("--data")
    w.add_argument("--variant", choices=sorted(harness.VARIANTS), default="ours")
    w.set_defaults(func=cmd_sweep_gamma)

    x = sub.add_parser("export-attention", parents=[common], help="objectness maps of one image as PGM + CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", required=True, help="64×64 P6 PPM")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_attention)
    return p


def _thread_limit(strict: bool) -> contextlib.AbstractContextManager:
    raw = os.environ.get(THREADS_ENV)
    if raw is not None:
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        if n < 1:
            raise UsageError(f"{THREADS_ENV} must be at least 1")
        return threadpool_limits(limits=1 if strict else n)
    if strict:
        return threadpool_limits(limits=1)
    return contextlib.nullcontext()


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    def fail(code: int, message: str) -> int:
        print(f"attnalign {args.command}: {message}", file=sys.stderr)
        return code

    try:
        with _thread_limit(args.strict):
            return args.func(args)
    except ConfigError as exc:
        return fail(EXIT_USAGE, f"configuration error at {exc}")
    except (UsageError, ConfigurationError, DimensionError) as exc:
        return fail(EXIT_USAGE, str(exc))
    except (DatasetFormatError, CheckpointError, OSError) as exc:
        return fail(EXIT_IO, str(exc))
    except harness.NumericalFailure as exc:
        where = f" (tensors dumped to {exc.dump_path})" if exc.dump_path else ""
        return fail(EXIT_NUMERIC, f"{exc}{where}")
    except NonFiniteError as exc:
        return fail(EXIT_NUMERIC, str(exc))


if __name__ == "__main__":
    sys.exit(main())
