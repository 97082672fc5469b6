"""Figures written next to the CSV/JSON outputs (Agg backend, no display)."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finite(xs, ys):
    pairs = [(x, y) for x, y in zip(xs, ys) if y is not None and math.isfinite(y)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no version stamp, so renders do not change with the matplotlib release
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_curves(history: Sequence, path: str | Path, window: int = 25) -> Path:
    """Detection loss, discriminator losses and γ against iteration.

    ``history`` holds records with ``iteration``, ``det_loss``, ``dis_source``,
    ``dis_target``, ``gamma`` and optional ``eval_map`` attributes.
    """
    its = [r.iteration for r in history]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))

    det = np.array([r.det_loss for r in history], dtype=float)
    axes[0].plot(its, det, color="0.75", lw=0.6, label="per step")
    if len(det) >= window:
        smooth = np.convolve(det, np.ones(window) / window, mode="valid")
        axes[0].plot(its[window - 1:], smooth, color="C0", label=f"{window}-step mean")
    axes[0].set_title("detection loss")
    axes[0].set_xlabel("iteration")
    axes[0].legend(fontsize=8)

    for key, label, color in (("dis_source", "source", "C1"), ("dis_target", "target", "C2")):
        x, y = _finite(its, [getattr(r, key) for r in history])
        if x:
            axes[1].plot(x, y, color=color, lw=0.8, label=label)
    axes[1].axhline(math.log(2), color="k", ls=":", lw=0.8, label="ln 2")
    axes[1].set_title("discriminator loss")
    axes[1].set_xlabel("iteration")
    axes[1].legend(fontsize=8)

    axes[2].plot(its, [r.gamma for r in history], color="C3", label="γ")
    x, y = _finite(its, [getattr(r, "eval_map", None) for r in history])
    if x:
        axes[2].plot(x, y, "o-", color="C4", ms=3, label="target mAP@0.5")
    axes[2].set_ylim(-0.02, 1.02)
    axes[2].set_title("schedule / evaluation")
    axes[2].set_xlabel("iteration")
    axes[2].legend(fontsize=8)

    fig.tight_layout()
    return _save(fig, path)


def plot_gamma_curves(curves: Mapping[str, tuple[Sequence[float], Sequence[float]]], path: str | Path) -> Path:
    """γ against training progress r for each labelled schedule."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for label, (r, g) in curves.items():
        ax.plot(r, g, label=label)
    ax.set_xlabel("r (progress after activation)")
    ax.set_ylabel("γ")
    ax.set_xlim(0, 1)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_map_comparison(rows: Sequence[tuple[str, float]], path: str | Path) -> Path:
    """Horizontal bars of target mAP@0.5 per setting."""
    fig, ax = plt.subplots(figsize=(5, 0.5 * len(rows) + 1.2))
    labels = [r[0] for r in rows]
    values = [r[1] for r in rows]
    ax.barh(range(len(rows)), values, color="C0")
    ax.set_yticks(range(len(rows)), labels)
    ax.invert_yaxis()
    ax.set_xlim(0, 1)
    ax.set_xlabel("target mAP@0.5")
    fig.tight_layout()
    return _save(fig, path)
