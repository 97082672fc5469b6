"""Toy three-scale anchor-based single-stage detector."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AttentionModule, AttentionResult
from .nn import Conv2d, ConvBlock, Module
from .tensor import ConfigurationError, DimensionError, DropoutStream, Tensor

POSITIVE_IOU = 0.5
NEG_POS_RATIO = 3


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width and height must be positive: {self}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h, "class_id": self.class_id}


def to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:4] / 2
    return np.concatenate([boxes[..., 0:2] - half, boxes[..., 0:2] + half], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between centre-format boxes, shape (len(a), len(b))."""
    ca = to_corners(np.reshape(a, (-1, 4)))
    cb = to_corners(np.reshape(b, (-1, 4)))
    lo = np.maximum(ca[:, None, :2], cb[None, :, :2])
    hi = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    inter = np.prod(np.clip(hi - lo, 0, None), axis=-1)
    area_a = np.prod(ca[:, 2:] - ca[:, :2], axis=-1)
    area_b = np.prod(cb[:, 2:] - cb[:, :2], axis=-1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def iou(a: Box | np.ndarray, b: Box | np.ndarray) -> float:
    a = a.as_array() if isinstance(a, Box) else a
    b = b.as_array() if isinstance(b, Box) else b
    return float(iou_matrix(a, b)[0, 0])


@dataclass(frozen=True)
class AnchorGrid:
    sides: tuple[int, ...] = (16, 8, 4)
    sizes: tuple[float, ...] = (0.17, 0.3, 0.5)
    anchors_per_cell: int = 1

    def __post_init__(self):
        if len(self.sides) != len(self.sizes):
            raise ConfigurationError("one anchor size per scale is required")
        for s in self.sides:
            if s < 1 or s & (s - 1):
                raise ConfigurationError(f"grid side {s} is not a power of two")
        if self.anchors_per_cell != 1:
            raise ConfigurationError("only one anchor per cell is supported")

    def scale_anchors(self, scale: int) -> np.ndarray:
        side, size = self.sides[scale], self.sizes[scale]
        centers = (np.arange(side) + 0.5) / side
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        n = side * side
        return np.stack([cx.ravel(), cy.ravel(), np.full(n, size), np.full(n, size)], axis=1)

    def anchors(self) -> np.ndarray:
        """All anchors, scale-major then row-major, as (total, 4) centre boxes."""
        return np.concatenate([self.scale_anchors(s) for s in range(len(self.sides))], axis=0)

    @property
    def total(self) -> int:
        return int(sum(s * s for s in self.sides)) * self.anchors_per_cell


@dataclass
class DetectionOutput:
    class_logits: list[Tensor]  # per scale (N, H, W, A, K+1)
    box_deltas: list[Tensor]  # per scale (N, H, W, A, 4)

    def flat(self) -> tuple[Tensor, Tensor]:
        n = self.class_logits[0].shape[0]
        cls = T.concat([c.reshape(n, -1, c.shape[-1]) for c in self.class_logits], axis=1)
        box = T.concat([b.reshape(n, -1, 4) for b in self.box_deltas], axis=1)
        return cls, box


@dataclass
class ForwardResult:
    features: list[Tensor]  # channel-last F_s
    attention: list[AttentionResult] | None
    outputs: DetectionOutput


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 2
    channels: int = 32
    image_side: int = 64
    use_attention: bool = True
    attention_scales: int = 3
    num_heads: int = 8
    ffn_hidden: int = 2048
    dropout_p: float = 0.1
    grid: AnchorGrid = field(default_factory=AnchorGrid)

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.channels, self.channels, self.num_heads, self.ffn_hidden, self.dropout_p)


class Backbone(Module):
    """64×64 image → channel-first maps at 16×16, 8×8 and 4×4."""

    def __init__(self, channels: int, rng: np.random.Generator, image_side: int = 64, dtype=np.float64):
        self.image_side = image_side
        self.stem = ConvBlock(3, channels // 2, rng, stride=2, dtype=dtype)
        self.down = ConvBlock(channels // 2, channels, rng, stride=2, dtype=dtype)
        self.level1 = ConvBlock(channels, channels, rng, stride=1, dtype=dtype)
        self.level2 = ConvBlock(channels, channels, rng, stride=2, dtype=dtype)
        self.level3 = ConvBlock(channels, channels, rng, stride=2, dtype=dtype)

    def __call__(self, images: Tensor) -> list[Tensor]:
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (self.image_side, self.image_side):
            raise DimensionError(f"expected N×3×{self.image_side}×{self.image_side} images, got {images.shape}")
        x = self.down(self.stem(images))
        f1 = self.level1(x)
        f2 = self.level2(f1)
        f3 = self.level3(f2)
        return [f1, f2, f3]


class Head(Module):
    def __init__(self, channels: int, num_classes: int, anchors: int, rng, dtype=np.float64):
        self.anchors = anchors
        self.num_classes = num_classes
        self.cls = Conv2d(channels, anchors * (num_classes + 1), 3, rng, padding=1, dtype=dtype)
        self.box = Conv2d(channels, anchors * 4, 3, rng, padding=1, dtype=dtype)
        self.cls.weight.data *= 0.1
        self.box.weight.data *= 0.1

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        n, _, h, w = x.shape
        c = self.cls(x).transpose(0, 2, 3, 1).reshape(n, h, w, self.anchors, self.num_classes + 1)
        b = self.box(x).transpose(0, 2, 3, 1).reshape(n, h, w, self.anchors, 4)
        return c, b


class Detector(Module):
    def __init__(self, config: DetectorConfig, rng: np.random.Generator, dtype=np.float64):
        self.config = config
        self.backbone = Backbone(config.channels, rng, config.image_side, dtype)
        n_attn = min(config.attention_scales, len(config.grid.sides)) if config.use_attention else 0
        self.attention = [AttentionModule(config.attention_config(), rng, dtype) for _ in range(n_attn)]
        self.heads = [
            Head(config.channels, config.num_classes, config.grid.anchors_per_cell, rng, dtype)
            for _ in config.grid.sides
        ]

    @property
    def feature_parameters(self) -> list[Tensor]:
        """Parameters upstream of the discriminators (backbone and attention)."""
        params = self.backbone.parameters()
        for m in self.attention:
            params += m.parameters()
        return params

    def __call__(self, images: Tensor, stream: DropoutStream | None = None) -> ForwardResult:
        maps = self.backbone(images)
        features = [m.transpose(0, 2, 3, 1) for m in maps]  # channel-last
        attention = None
        head_inputs = features
        if self.config.use_attention:
            attention, head_inputs = _attend(self.attention, features, stream)
        cls, box = [], []
        for head, x in zip(self.heads, head_inputs):
            c, b = head(x.transpose(0, 3, 1, 2))
            cls.append(c)
            box.append(b)
        return ForwardResult(features, attention, DetectionOutput(cls, box))


def _attend(modules: Sequence[AttentionModule], features: list[Tensor], stream):
    """Run attention on the first len(modules) scales; coarser scales reuse the
    last attended scale's objectness, max-pooled to their resolution."""
    results: list[AttentionResult] = []
    outputs: list[Tensor] = []
    for s, f in enumerate(features):
        if s < len(modules):
            res = modules[s](f, stream)
            results.append(res)
            outputs.append(res.output)
            continue
        src = results[-1].objectness
        factor = src.shape[-1] // f.shape[-2]
        pooled = T.maxpool2d(src.reshape((src.shape[0], 1) + src.shape[1:]), factor, factor)
        obj = pooled.reshape((f.shape[0],) + f.shape[1:3])
        zeros = Tensor(np.zeros(f.shape, dtype=f.dtype))
        results.append(AttentionResult(objectness=obj, attended=zeros, scores=results[-1].scores, output=f))
        outputs.append(f)
    return results, outputs


# -- targets and loss --------------------------------------------------------------

@dataclass
class AnchorTargets:
    labels: np.ndarray  # (A,) int, 0 = background, k+1 = class k
    deltas: np.ndarray  # (A, 4)

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0


def encode(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            (gt[:, 0] - anchors[:, 0]) / anchors[:, 2],
            (gt[:, 1] - anchors[:, 1]) / anchors[:, 3],
            np.log(gt[:, 2] / anchors[:, 2]),
            np.log(gt[:, 3] / anchors[:, 3]),
        ],
        axis=1,
    )


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    d = np.clip(deltas, -10, 10)
    return np.stack(
        [
            anchors[:, 0] + d[:, 0] * anchors[:, 2],
            anchors[:, 1] + d[:, 1] * anchors[:, 3],
            anchors[:, 2] * np.exp(d[:, 2]),
            anchors[:, 3] * np.exp(d[:, 3]),
        ],
        axis=1,
    )


def match_anchors(gt: Sequence[Box], grid: AnchorGrid | np.ndarray) -> AnchorTargets:
    """Positive if IoU ≥ 0.5 with some box or best anchor for a box; others background."""
    anchors = grid.anchors() if isinstance(grid, AnchorGrid) else np.asarray(grid)
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    deltas = np.zeros((n, 4), dtype=np.float64)
    if not gt:
        return AnchorTargets(labels, deltas)
    boxes = np.stack([b.as_array() for b in gt])
    classes = np.array([b.class_id for b in gt], dtype=np.int64)
    overlaps = iou_matrix(anchors, boxes)  # (A, G)
    assigned = overlaps.argmax(axis=1)
    best = overlaps[np.arange(n), assigned]
    positive = best >= POSITIVE_IOU
    for g in range(len(gt)):
        a = int(overlaps[:, g].argmax())
        assigned[a] = g
        positive[a] = True
    labels[positive] = classes[assigned[positive]] + 1
    deltas[positive] = encode(boxes[assigned[positive]], anchors[positive])
    return AnchorTargets(labels, deltas)


@dataclass
class LossParts:
    total: Tensor
    classification: Tensor
    regression: Tensor
    num_positive: int


def detection_loss(cls_logits: Tensor, box_deltas: Tensor, targets: Sequence[AnchorTargets]) -> LossParts:
    """SSD-style loss: cross-entropy with 3:1 hard-negative mining plus smooth-L1.

    ``cls_logits`` is (N, A, K+1) and ``box_deltas`` (N, A, 4). Both terms are
    divided by the batch's positive count; a batch without positives averages
    over the mined negatives instead.
    """
    n, a, _ = cls_logits.shape
    if len(targets) != n:
        raise DimensionError(f"{len(targets)} target sets for a batch of {n}")
    labels = np.stack([t.labels for t in targets])
    deltas = np.stack([t.deltas for t in targets]).astype(box_deltas.dtype)
    pos = labels > 0
    logp = T.log_softmax(cls_logits, axis=-1)
    ce = -T.take_along_axis(logp, labels[..., None], axis=-1).reshape(n, a)

    # mining is a selection on values, outside the graph
    ce_values = ce.data
    selected = pos.copy()
    for i in range(n):
        neg_idx = np.flatnonzero(~pos[i])
        k = min(NEG_POS_RATIO * max(int(pos[i].sum()), 1), len(neg_idx))
        if k:
            order = np.argsort(-ce_values[i, neg_idx], kind="stable")
            selected[i, neg_idx[order[:k]]] = True
    num_pos = int(pos.sum())
    norm = float(num_pos) if num_pos else float(max(int(selected.sum()), 1))

    mask = Tensor(selected.astype(ce.dtype))
    cls_loss = T.sum(ce * mask) * (1.0 / norm)
    reg = T.sum(T.smooth_l1(box_deltas - Tensor(deltas)), axis=-1)
    reg_loss = T.sum(reg * Tensor(pos.astype(ce.dtype))) * (1.0 / norm)
    return LossParts(cls_loss + reg_loss, cls_loss, reg_loss, num_pos)


# -- decoding ----------------------------------------------------------------------

def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy suppression; returns kept indices in descending score order."""
    order = list(np.argsort(-np.asarray(scores), kind="stable"))
    keep: list[int] = []
    while order:
        i = order.pop(0)
        keep.append(int(i))
        if not order:
            break
        rest = np.array(order)
        overlaps = iou_matrix(boxes[i], boxes[rest])[0]
        order = [int(j) for j, o in zip(rest, overlaps) if o < iou_threshold]
    return keep


def decode(
    cls_logits: np.ndarray,
    box_deltas: np.ndarray,
    grid: AnchorGrid | np.ndarray,
    score_threshold: float = 0.5,
    nms_iou: float = 0.45,
    max_candidates: int = 200,
) -> list[tuple[Box, float]]:
    """Detections for one image from flat (A, K+1) logits and (A, 4) deltas."""
    if not (0 < score_threshold < 1 and 0 < nms_iou < 1):
        raise ValueError("score_threshold and nms_iou must lie in (0, 1)")
    anchors = grid.anchors() if isinstance(grid, AnchorGrid) else np.asarray(grid)
    logits = np.asarray(cls_logits, dtype=np.float64)
    probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    boxes = decode_boxes(np.asarray(box_deltas, dtype=np.float64), anchors)
    found: list[tuple[Box, float]] = []
    for k in range(1, probs.shape[1]):
        scores = probs[:, k]
        idx = np.flatnonzero(scores >= score_threshold)
        if idx.size == 0:
            continue
        idx = idx[np.argsort(-scores[idx], kind="stable")[:max_candidates]]
        for j in nms(boxes[idx], scores[idx], nms_iou):
            cx, cy, w, h = boxes[idx[j]]
            found.append((Box(float(cx), float(cy), float(w), float(h), k - 1), float(scores[idx[j]])))
    return found


def write_detections_jsonl(path: str | Path, detections: dict[int, list[tuple[Box, float]]]) -> None:
    with Path(path).open("w") as fh:
        for image_id in sorted(detections):
            for box, score in detections[image_id]:
                row = {"image_id": image_id, "class_id": box.class_id, "cx": box.cx, "cy": box.cy,
                       "w": box.w, "h": box.h, "score": score}
                fh.write(json.dumps(row) + "\n")
