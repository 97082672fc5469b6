"""Finite-difference oracle and brute-force references shared by the tests."""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from attnalign.tensor import Tensor

EPS = 1e-6
REL_FLOOR = 1e-3


def numeric_grad(f: Callable[[], float], arr: np.ndarray, indices=None, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place).

    With ``indices`` only those flat positions are probed; the rest stay zero.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, indices=None) -> float:
    """Max elementwise |a−n| / max(|a|, |n|, 1e-3)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if indices is not None:
        a, n = a[list(indices)], n[list(indices)]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(
    build: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    rng: np.random.Generator | None = None,
    max_probes: int | None = None,
) -> float:
    """Worst relative error between backward() and central differences.

    ``build`` recomputes the scalar loss from the current values of
    ``tensors``. Large tensors can be sub-sampled with ``max_probes``.
    """
    for t in tensors:
        t.grad = None
    loss = build()
    loss.backward()
    analytic = [np.array(t.grad) for t in tensors]

    def value() -> float:
        return float(build().data)

    worst = 0.0
    for t, a in zip(tensors, analytic):
        idx = None
        if max_probes is not None and t.size > max_probes:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = gen.choice(t.size, size=max_probes, replace=False)
        num = numeric_grad(value, t.data, idx)
        worst = max(worst, rel_error(a, num, idx))
    return worst


# -- brute-force mAP reference --------------------------------------------------------

def _iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def reference_map(detections: dict, ground_truth: dict, iou_threshold: float = 0.5) -> tuple[dict, float]:
    """Plain-Python AP: walk detections in score order, match each to its
    highest-IoU same-class box in the image, then integrate the interpolated
    precision (max precision at any equal or deeper rank) over each recall step."""
    classes = sorted({b.class_id for boxes in ground_truth.values() for b in boxes})
    per_class = {}
    for c in classes:
        gts = {img: [(b.cx, b.cy, b.w, b.h) for b in boxes if b.class_id == c] for img, boxes in ground_truth.items()}
        npos = sum(len(v) for v in gts.values())
        dets = []
        for img in sorted(detections):
            for box, score in detections[img]:
                if box.class_id == c:
                    dets.append((score, img, (box.cx, box.cy, box.w, box.h)))
        dets = sorted(dets, key=lambda d: -d[0])
        used = {img: [False] * len(v) for img, v in gts.items()}
        outcome = []
        for score, img, box in dets:
            cands = gts.get(img, [])
            best_j, best_iou = -1, -1.0
            for j, g in enumerate(cands):
                o = _iou(box, g)
                if o > best_iou:
                    best_j, best_iou = j, o
            if best_j >= 0 and best_iou >= iou_threshold and not used[img][best_j]:
                used[img][best_j] = True
                outcome.append(True)
            else:
                outcome.append(False)
        precisions = []
        tp = fp = 0
        for hit in outcome:
            tp += hit
            fp += not hit
            precisions.append(tp / (tp + fp))
        contributions = []
        for k, hit in enumerate(outcome):
            if hit:
                contributions.append(max(precisions[k:]))
        per_class[c] = math.fsum(contributions) / npos
    mean = math.fsum(per_class.values()) / len(per_class) if per_class else float("nan")
    return per_class, mean
