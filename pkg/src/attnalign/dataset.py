"""Deterministic synthetic two-domain detection data and its on-disk format.

A dataset directory holds ``images/{id}.ppm`` (binary P6, 8-bit),
``annotations.jsonl`` and ``domain.json``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import Box, iou_matrix

CLASS_NAMES = ("disc", "square")
MAX_PLACEMENT_TRIES = 50


class DatasetFormatError(ValueError):
    def __init__(self, path: str | Path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class DomainShift:
    """Target-domain appearance change: haze blend, then gain, then noise."""

    gain: float = 1.0
    noise_sigma: float = 0.0
    haze_alpha: float = 0.0
    haze_level: float = 0.75

    def apply(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = (1.0 - self.haze_alpha) * image + self.haze_alpha * self.haze_level
        out = out * self.gain
        if self.noise_sigma > 0:
            out = out + rng.normal(0.0, self.noise_sigma, out.shape)
        return np.clip(out, 0.0, 1.0)

    @property
    def is_identity(self) -> bool:
        return self.gain == 1.0 and self.noise_sigma == 0.0 and self.haze_alpha == 0.0


DEFAULT_TARGET_SHIFT = DomainShift(gain=0.9, noise_sigma=0.12, haze_alpha=0.55, haze_level=0.75)


@dataclass(frozen=True)
class SceneSpec:
    image_side: int = 64
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 8
    max_size: int = 30
    max_pair_iou: float = 0.3
    domain: str = "source"
    seed: int = 0
    shift: DomainShift = field(default_factory=DomainShift)

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 2 <= self.min_size <= self.max_size < self.image_side:
            raise ValueError("object sizes must satisfy 2 <= min_size <= max_size < image_side")


@dataclass
class DetectionSample:
    image_id: int
    pixels: np.ndarray  # (3, H, W) uint8
    boxes: list[Box]
    domain: str

    @property
    def image(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / 255.0

    @property
    def domain_tag(self) -> int:
        return 0 if self.domain == "source" else 1


def render_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, list[Box]]:
    """One image (3, H, W) in [0, 1] and its boxes; a pure function of (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    side = spec.image_side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5

    base = rng.uniform(0.08, 0.3)
    tilt = rng.uniform(-0.08, 0.08, size=2)
    background = base + tilt[0] * (xx / side - 0.5) + tilt[1] * (yy / side - 0.5)
    image = np.repeat(background[None], 3, axis=0) + rng.normal(0.0, 0.02, (3, side, side))

    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes: list[Box] = []
    for _ in range(n_obj):
        for _ in range(MAX_PLACEMENT_TRIES):
            size = int(rng.integers(spec.min_size, spec.max_size + 1))
            x0 = int(rng.integers(0, side - size + 1))
            y0 = int(rng.integers(0, side - size + 1))
            cls = int(rng.integers(0, len(CLASS_NAMES)))
            box = Box((x0 + size / 2) / side, (y0 + size / 2) / side, size / side, size / side, cls)
            if boxes:
                overlaps = iou_matrix(box.as_array(), np.stack([b.as_array() for b in boxes]))
                if overlaps.max() > spec.max_pair_iou:
                    continue
            break
        else:
            continue
        color = rng.uniform(0.45, 1.0, size=3)
        if cls == 0:
            r = size / 2
            mask = (xx - (x0 + r)) ** 2 + (yy - (y0 + r)) ** 2 <= r * r
        else:
            mask = (xx >= x0) & (xx < x0 + size) & (yy >= y0) & (yy < y0 + size)
        image[:, mask] = color[:, None]
        boxes.append(box)

    image = np.clip(image, 0.0, 1.0)
    if spec.domain == "target":
        image = spec.shift.apply(image, rng)
    return image, boxes


def quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """``image`` is (3, H, W) in [0, 1] or uint8."""
    arr = np.asarray(image)
    pixels = arr if arr.dtype == np.uint8 else quantize(arr)
    _, h, w = pixels.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Parse a binary P6 file into a (3, H, W) uint8 array."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens: list[int] = []

    def skip_space_and_comments(p: int) -> int:
        while p < len(raw):
            if raw[p:p + 1].isspace():
                p += 1
            elif raw[p:p + 1] == b"#":
                while p < len(raw) and raw[p:p + 1] != b"\n":
                    p += 1
            else:
                break
        return p

    if raw[:2] != b"P6":
        raise DatasetFormatError(path, 0, f"expected magic 'P6', found {raw[:2]!r}")
    pos = 2
    while len(tokens) < 3:
        pos = skip_space_and_comments(pos)
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DatasetFormatError(path, start, "expected an unsigned integer in the header")
        tokens.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise DatasetFormatError(path, pos, "missing whitespace after header")
    pos += 1
    w, h, maxval = tokens
    if maxval != 255:
        raise DatasetFormatError(path, pos, f"only maxval 255 is supported, got {maxval}")
    need = w * h * 3
    if len(raw) - pos < need:
        raise DatasetFormatError(path, len(raw), f"truncated pixel data: need {need} bytes, have {len(raw) - pos}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).copy()


def generate(spec: SceneSpec, count: int, directory: str | Path) -> Path:
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        image, boxes = render_scene(spec, i)
        write_ppm(directory / "images" / f"{i:06d}.ppm", image)
        lines.append(json.dumps({"image_id": i, "boxes": [b.to_dict() for b in boxes]}, sort_keys=True))
    (directory / "annotations.jsonl").write_text("\n".join(lines) + "\n")
    meta = {"domain": spec.domain, "seed": spec.seed, "shift": asdict(spec.shift)}
    if spec.domain == "source":
        meta["shift"] = {}
    (directory / "domain.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return directory


def load(directory: str | Path) -> list[DetectionSample]:
    directory = Path(directory)
    meta_path = directory / "domain.json"
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(meta_path, exc.pos, exc.msg) from None
    domain = meta.get("domain")
    if domain not in ("source", "target"):
        raise DatasetFormatError(meta_path, 0, f"invalid domain {domain!r}")

    ann_path = directory / "annotations.jsonl"
    samples = []
    offset = 0
    for line in ann_path.read_bytes().splitlines(keepends=True):
        text = line.strip()
        if text:
            try:
                row = json.loads(text)
                boxes = [
                    Box(float(b["cx"]), float(b["cy"]), float(b["w"]), float(b["h"]), int(b["class_id"]))
                    for b in row["boxes"]
                ]
                image_id = int(row["image_id"])
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(ann_path, offset + exc.pos, exc.msg) from None
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(ann_path, offset, f"bad annotation record: {exc}") from None
            pixels = read_ppm(directory / "images" / f"{image_id:06d}.ppm")
            samples.append(DetectionSample(image_id, pixels, boxes, domain))
        offset += len(line)
    return samples


def split_specs(base: SceneSpec, seed: int) -> dict[str, SceneSpec]:
    """The four splits written by the ``generate`` command, each with its own seed."""
    from dataclasses import replace

    return {
        "source_train": replace(base, domain="source", seed=seed * 4 + 0),
        "target_train": replace(base, domain="target", seed=seed * 4 + 1),
        "source_eval": replace(base, domain="source", seed=seed * 4 + 2),
        "target_eval": replace(base, domain="target", seed=seed * 4 + 3),
    }


def batch_images(samples: Sequence[DetectionSample], dtype=np.float32) -> np.ndarray:
    return (np.stack([s.pixels for s in samples]).astype(dtype)) / 255.0
