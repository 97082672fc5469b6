"""Gradient reversal, per-scale domain discriminators and the alignment schedule."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionResult
from .nn import ConvBlock, Linear, Module
from .tensor import ConfigurationError, DimensionError, Tensor

GAMMA_MODES = ("sigmoid", "linear", "cubic", "constant0", "constant1", "global-plus-local")
PROB_CLAMP = 1e-7


def grl(x: Tensor, coefficient: float) -> Tensor:
    """Identity on the way forward; multiplies the incoming gradient by −coefficient."""
    if coefficient < 0:
        raise ConfigurationError(f"GRL coefficient must be non-negative, got {coefficient}")
    scale = -float(coefficient)
    return T._result(x.data, (x,), lambda g: (g * scale,), "grl")


@dataclass(frozen=True)
class AlignmentSchedule:
    delta: float = 5.0
    t_grl: int = 0
    max_iteration: int = 1
    mode: str = "sigmoid"

    def __post_init__(self):
        if self.mode not in GAMMA_MODES:
            raise ConfigurationError(f"unknown gamma mode {self.mode!r}; expected one of {', '.join(GAMMA_MODES)}")
        if self.delta <= 0:
            raise ConfigurationError(f"delta must be positive, got {self.delta}")
        if self.t_grl < 0:
            raise ConfigurationError(f"t_grl must be non-negative, got {self.t_grl}")
        if self.max_iteration <= self.t_grl:
            raise ConfigurationError(
                f"max_iteration ({self.max_iteration}) must exceed t_grl ({self.t_grl})"
            )

    @property
    def modulation(self) -> str:
        return "global-plus-local" if self.mode == "global-plus-local" else "default"


def progress(iteration: int, schedule: AlignmentSchedule) -> float:
    """Fraction of the post-activation phase elapsed, clamped to [0, 1]."""
    span = schedule.max_iteration - schedule.t_grl
    if span <= 0:
        raise ConfigurationError(f"max_iteration ({schedule.max_iteration}) must exceed t_grl ({schedule.t_grl})")
    return min(max((iteration - schedule.t_grl) / span, 0.0), 1.0)


def gamma_of_r(r: float, mode: str, delta: float) -> float:
    if mode in ("sigmoid", "global-plus-local"):
        return 2.0 / (1.0 + math.exp(-delta * r)) - 1.0
    if mode == "linear":
        return r
    if mode == "cubic":
        return r ** 3
    if mode == "constant0":
        return 0.0
    if mode == "constant1":
        return 1.0
    raise ConfigurationError(f"unknown gamma mode {mode!r}")


def gamma(iteration: int, schedule: AlignmentSchedule) -> float:
    if iteration < 0:
        raise ValueError(f"iteration must be non-negative, got {iteration}")
    r = progress(iteration, schedule)
    if iteration < schedule.t_grl:
        return 0.0
    return gamma_of_r(r, schedule.mode, schedule.delta)


def write_schedule_csv(path: str | Path, schedule: AlignmentSchedule, step: int = 1) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "r", "gamma"])
        for it in range(0, schedule.max_iteration + 1, step):
            writer.writerow([it, repr(progress(it, schedule)), repr(gamma(it, schedule))])
    return path


def modulate(features: Tensor, attended: Tensor, objectness: Tensor, gamma_value: float, mode: str = "default") -> Tensor:
    """Blend global features F+G with their objectness-weighted copy.

    Features are channel-last (..., H, W, C); ``objectness`` is (..., H, W) and
    is broadcast over channels.
    """
    if features.shape != attended.shape:
        raise DimensionError(f"features {features.shape} and attended {attended.shape} differ")
    if objectness.shape != features.shape[:-1]:
        raise DimensionError(f"objectness {objectness.shape} does not match features {features.shape}")
    base = features + attended
    local = base * objectness.reshape(objectness.shape + (1,))
    if mode == "default":
        return base * (1.0 - gamma_value) + local * gamma_value
    if mode == "global-plus-local":
        return base + local * gamma_value
    raise ConfigurationError(f"unknown modulation mode {mode!r}")


class Discriminator(Module):
    """n × (3×3 conv → GroupNorm → ReLU → 2×2 max-pool) for a 2ⁿ×2ⁿ map, then a 2-logit layer."""

    def __init__(self, side: int, channels: int, rng: np.random.Generator, width: int = 32, dtype=np.float64):
        if side < 1 or side & (side - 1):
            raise ConfigurationError(f"discriminator input side must be a power of two, got {side}")
        self.side = side
        self.num_blocks = side.bit_length() - 1
        blocks = []
        c_in = channels
        for _ in range(self.num_blocks):
            blocks.append(ConvBlock(c_in, width, rng, dtype=dtype))
            c_in = width
        self.blocks = blocks
        self.head = Linear(c_in, 2, rng, dtype)

    def logits(self, x: Tensor) -> Tensor:
        """``x`` is channel-first (N, C, H, W)."""
        if x.shape[-1] != self.side or x.shape[-2] != self.side:
            raise DimensionError(f"discriminator expects {self.side}×{self.side} maps, got {x.shape}")
        for block in self.blocks:
            x = T.maxpool2d(block(x), 2, 2)
        return self.head(x.reshape(x.shape[0], -1))

    def __call__(self, x: Tensor) -> Tensor:
        return T.softmax(self.logits(x), axis=-1)[:, 1]


class DiscriminatorStack(Module):
    def __init__(self, sides: Sequence[int], channels: int, rng: np.random.Generator, width: int = 32, dtype=np.float64):
        self.discriminators = [Discriminator(s, channels, rng, width, dtype) for s in sides]

    def __len__(self) -> int:
        return len(self.discriminators)


def discriminate(modulated: Tensor, scale: int, stack: DiscriminatorStack) -> Tensor:
    """P(target) for channel-last maps (N, H, W, C) or a single (H, W, C) map."""
    single = modulated.ndim == 3
    x = modulated.reshape((1,) + modulated.shape) if single else modulated
    prob = stack.discriminators[scale](x.transpose(0, 3, 1, 2))
    return prob.reshape(()) if single else prob


def discriminator_loss(probabilities: Sequence[Tensor], domain: int) -> Tensor:
    """Binary cross-entropy averaged over scales (and over the batch within a scale)."""
    if not probabilities:
        raise ValueError("discriminator_loss needs at least one scale")
    if domain not in (0, 1):
        raise ValueError(f"domain tag must be 0 or 1, got {domain}")
    terms = []
    for p in probabilities:
        p = T.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
        term = T.log(p) if domain == 1 else T.log(1.0 - p)
        terms.append(T.mean(term))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (-1.0 / len(terms))


def adversarial_pass(
    features: Sequence[Tensor],
    attention: Sequence[AttentionResult] | None,
    gamma_value: float,
    stack: DiscriminatorStack,
    coefficient: float,
    domain: int,
    mode: str = "default",
    detach_objectness: bool = False,
) -> tuple[Tensor, list[Tensor]]:
    """Discriminator loss for one domain through the GRL.

    With ``attention`` set to None the discriminators see the raw features.
    """
    if attention is not None and len(attention) != len(features):
        raise DimensionError(f"{len(features)} feature scales but {len(attention)} attention results")
    if len(features) != len(stack):
        raise DimensionError(f"{len(features)} feature scales but {len(stack)} discriminators")
    probs = []
    for s, f in enumerate(features):
        if attention is None:
            m = f
        else:
            res = attention[s]
            a = res.objectness.detach() if detach_objectness else res.objectness
            m = modulate(f, res.attended, a, gamma_value, mode)
        probs.append(discriminate(grl(m, coefficient), s, stack))
    return discriminator_loss(probs, domain), probs
