"""PASCAL-style average precision with all-point interpolation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .detector import Box, iou_matrix


@dataclass
class MapResult:
    per_class: dict[int, float]
    mean: float


def class_average_precision(
    detections: Mapping[int, Sequence[tuple[Box, float]]],
    ground_truth: Mapping[int, Sequence[Box]],
    class_id: int,
    iou_threshold: float = 0.5,
) -> float:
    gt = {
        img: np.array([b.as_array() for b in boxes if b.class_id == class_id]).reshape(-1, 4)
        for img, boxes in ground_truth.items()
    }
    npos = sum(len(v) for v in gt.values())
    if npos == 0:
        raise ValueError(f"class {class_id} has no ground truth")

    images, scores, boxes = [], [], []
    for img in sorted(detections):
        for box, score in detections[img]:
            if box.class_id == class_id:
                images.append(img)
                scores.append(score)
                boxes.append(box.as_array())
    if not scores:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")

    taken = {img: np.zeros(len(v), dtype=bool) for img, v in gt.items()}
    hits = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        candidates = gt.get(images[i])
        if candidates is None or len(candidates) == 0:
            continue
        overlaps = iou_matrix(boxes[i], candidates)[0]
        j = int(overlaps.argmax())
        if overlaps[j] >= iou_threshold and not taken[images[i]][j]:
            taken[images[i]][j] = True
            hits[rank] = True

    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # each true positive raises recall by 1/npos
    return math.fsum(envelope[hits].tolist()) / npos


def mean_average_precision(
    detections: Mapping[int, Sequence[tuple[Box, float]]],
    ground_truth: Mapping[int, Sequence[Box]],
    iou_threshold: float = 0.5,
) -> MapResult:
    """AP per class present in the ground truth and their mean.

    Classes that never occur in the ground truth are left out of the mean.
    """
    classes = sorted({b.class_id for boxes in ground_truth.values() for b in boxes})
    per_class = {c: class_average_precision(detections, ground_truth, c, iou_threshold) for c in classes}
    mean = math.fsum(per_class.values()) / len(per_class) if per_class else float("nan")
    return MapResult(per_class, mean)
