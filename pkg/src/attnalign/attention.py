"""Multi-head self-attention producing objectness maps and attended features."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .tensor import ConfigurationError, DimensionError, DropoutStream, Tensor

DEGENERATE_RANGE = 1e-12


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int
    value_dim: int
    num_heads: int = 8
    ffn_hidden: int = 2048
    dropout_p: float = 0.1

    def __post_init__(self):
        if min(self.embed_dim, self.value_dim, self.num_heads, self.ffn_hidden) <= 0:
            raise ConfigurationError(f"attention sizes must be positive: {self}")
        if self.embed_dim % self.num_heads or self.value_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} and value_dim {self.value_dim} must be divisible by "
                f"num_heads {self.num_heads}"
            )
        if not 0 <= self.dropout_p < 1:
            raise ConfigurationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


@dataclass
class AttentionResult:
    objectness: Tensor  # (..., H, W) in [0, 1]
    attended: Tensor  # G_s, (..., H, W, C)
    scores: Tensor  # (..., heads, HW, HW)
    output: Tensor  # post-FFN features for the detection head, (..., H, W, C)


class AttentionModule(Module):
    def __init__(self, config: AttentionConfig, rng: np.random.Generator, dtype=np.float64):
        self.config = config
        c, d = config.value_dim, config.embed_dim
        self.query = Linear(c, d, rng, dtype)
        self.key = Linear(c, d, rng, dtype)
        self.value = Linear(c, c, rng, dtype)
        self.out_proj = Linear(c, c, rng, dtype)
        self.norm1 = LayerNorm(c, dtype)
        self.ffn_in = Linear(c, config.ffn_hidden, rng, dtype)
        self.ffn_out = Linear(config.ffn_hidden, c, rng, dtype)
        self.norm2 = LayerNorm(c, dtype)

    def __call__(self, features: Tensor, stream: DropoutStream | None = None) -> AttentionResult:
        return attention_block(features, self, self.training, stream)


def _tokens(features: Tensor) -> tuple[Tensor, int, int]:
    if features.ndim not in (3, 4):
        raise DimensionError(f"expected H×W×C or N×H×W×C features, got {features.shape}")
    h, w, c = features.shape[-3:]
    return features.reshape(features.shape[:-3] + (h * w, c)), h, w


def project_qkv(features: Tensor, module: AttentionModule) -> tuple[Tensor, Tensor, Tensor]:
    """Flatten H×W×C features to HW×C tokens and map them to Q, K, V."""
    c = features.shape[-1]
    if c != module.config.value_dim:
        raise ConfigurationError(f"features have {c} channels, attention expects {module.config.value_dim}")
    x, _, _ = _tokens(features)
    return module.query(x), module.key(x), module.value(x)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(tuple(lead) + (n, heads, d // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    k = len(lead)
    axes = tuple(range(k)) + (k + 1, k, k + 2)
    return x.transpose(axes).reshape(tuple(lead) + (n, h * d))


def attention_scores(q: Tensor, k: Tensor, num_heads: int = 1) -> Tensor:
    """Row-wise softmax(QKᵀ/√d_head) per head; result is (..., heads, HW, HW)."""
    if q.shape != k.shape:
        raise DimensionError(f"query {q.shape} and key {k.shape} must match")
    if q.shape[-1] % num_heads:
        raise ConfigurationError(f"dimension {q.shape[-1]} not divisible by {num_heads} heads")
    qh = _split_heads(q, num_heads)
    kh = _split_heads(k, num_heads)
    d_head = q.shape[-1] // num_heads
    axes = tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2)
    logits = T.matmul(qh, kh.transpose(axes)) * (1.0 / np.sqrt(d_head))
    return T.softmax(logits, axis=-1)


def min_max_normalize(x: Tensor, spatial_axes: int = 2) -> Tensor:
    """Scale each trailing ``spatial_axes``-dim map to [0, 1]; constant maps become zeros."""
    lead = x.shape[: x.ndim - spatial_axes]
    flat = x.reshape(lead + (-1,))
    hi = T.amax(flat, axis=-1, keepdims=True)
    lo = T.amin(flat, axis=-1, keepdims=True)
    span = hi - lo
    degenerate = span.data <= DEGENERATE_RANGE
    safe = span + Tensor(degenerate.astype(x.dtype))
    out = (flat - lo) / safe * Tensor((~degenerate).astype(x.dtype))
    return out.reshape(x.shape)


def objectness_map(scores: Tensor, height: int, width: int) -> Tensor:
    """Row maxima of the score matrices, averaged over heads, min-max normalised.

    ``scores`` is (..., heads, HW, HW) or a single HW×HW matrix.
    """
    if scores.ndim == 2:
        scores = scores.reshape((1,) + scores.shape)
    if scores.shape[-1] != height * width or scores.shape[-2] != height * width:
        raise DimensionError(f"scores {scores.shape} do not match a {height}×{width} grid")
    row_max = T.amax(scores, axis=-1)  # (..., heads, HW)
    pooled = T.mean(row_max, axis=-2)  # (..., HW)
    grid = pooled.reshape(pooled.shape[:-1] + (height, width))
    return min_max_normalize(grid)


def aggregate_values(scores: Tensor, v: Tensor) -> Tensor:
    """Per-head A′V with heads concatenated back to (..., HW, C)."""
    heads = scores.shape[-3]
    vh = _split_heads(v, heads)
    return _merge_heads(T.matmul(scores, vh))


def attended_features(scores: Tensor, v: Tensor, out_proj: Linear | None, height: int, width: int) -> Tensor:
    g = aggregate_values(scores, v)
    if out_proj is not None:
        g = out_proj(g)
    return g.reshape(g.shape[:-2] + (height, width, g.shape[-1]))


def attention_block(
    features: Tensor, module: AttentionModule, training: bool, stream: DropoutStream | None = None
) -> AttentionResult:
    cfg = module.config
    x, h, w = _tokens(features)
    q, k, v = project_qkv(features, module)
    scores = attention_scores(q, k, cfg.num_heads)
    objectness = objectness_map(scores, h, w)
    g = attended_features(scores, v, module.out_proj, h, w)
    g_tokens = g.reshape(x.shape)
    h1 = module.norm1(x + g_tokens)
    hidden = T.dropout(T.relu(module.ffn_in(h1)), cfg.dropout_p, training, stream)
    h2 = module.norm2(h1 + module.ffn_out(hidden))
    return AttentionResult(
        objectness=objectness,
        attended=g,
        scores=scores,
        output=h2.reshape(features.shape),
    )


# -- export ------------------------------------------------------------------------

def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Binary graymap (P5, maxval 255) of a map with values in [0, 1]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"PGM export needs a 2-D map, got {arr.shape}")
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5" or len(parts) < 5:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    offset = len(raw) - w * h
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(h, w).astype(np.float64) / maxval


def export_attention_map(
    directory: str | Path, scale: int, iteration: int | None, values: np.ndarray
) -> tuple[Path, Path]:
    """Write ``attn_s{scale}_iter{iteration}.pgm`` and a matching CSV (no suffix when iteration is None)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"attn_s{scale}" if iteration is None else f"attn_s{scale}_iter{iteration}"
    pgm = directory / f"{stem}.pgm"
    csv = directory / f"{stem}.csv"
    write_pgm(pgm, values)
    np.savetxt(csv, np.asarray(values, dtype=np.float64), delimiter=",", fmt="%.9g")
    return pgm, csv
