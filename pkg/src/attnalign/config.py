"""Experiment configuration and its INI representation.

Sections ``[data]``, ``[model]``, ``[schedule]``, ``[optim]`` and ``[eval]``
map onto the dataclasses below; unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .adversarial import GAMMA_MODES, AlignmentSchedule
from .dataset import DomainShift, SceneSpec
from .detector import AnchorGrid, DetectorConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class DataConfig:
    train_count: int = 2000
    eval_count: int = 500
    seed: int = 0
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 8
    max_size: int = 30
    gain: float = 0.9
    noise_sigma: float = 0.12
    haze_alpha: float = 0.55
    haze_level: float = 0.75

    def scene(self) -> SceneSpec:
        return SceneSpec(
            min_objects=self.min_objects,
            max_objects=self.max_objects,
            min_size=self.min_size,
            max_size=self.max_size,
            seed=self.seed,
            shift=DomainShift(self.gain, self.noise_sigma, self.haze_alpha, self.haze_level),
        )


@dataclass
class ModelConfig:
    channels: int = 32
    num_heads: int = 8
    ffn_hidden: int = 128
    dropout_p: float = 0.1
    attention_scales: int = 3
    disc_width: int = 32
    anchor_sizes: tuple = (0.17, 0.3, 0.5)
    detach_objectness: bool = False

    def detector(self, use_attention: bool) -> DetectorConfig:
        return DetectorConfig(
            channels=self.channels,
            use_attention=use_attention,
            attention_scales=self.attention_scales,
            num_heads=self.num_heads,
            ffn_hidden=self.ffn_hidden,
            dropout_p=self.dropout_p,
            grid=AnchorGrid(sizes=tuple(self.anchor_sizes)),
        )


@dataclass
class ScheduleConfig:
    max_iteration: int = 2000
    t_grl: int = 600
    delta: float = 5.0
    mode: str = "sigmoid"
    grl_coefficient: float = 0.1
    early_stop: int = 0  # 0 disables

    def alignment(self) -> AlignmentSchedule:
        return AlignmentSchedule(self.delta, self.t_grl, self.max_iteration, self.mode)


@dataclass
class OptimConfig:
    lr: float = 0.01
    lr_decay_step: int = 1500
    lr_decay_factor: float = 0.1
    disc_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 4


@dataclass
class EvalConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.45
    iou_threshold: float = 0.5
    eval_every: int = 0
    eval_subset: int = 100
    export_iterations: tuple = ()


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def validate(self) -> "TrainConfig":
        s, o, d, m, e = self.schedule, self.optim, self.data, self.model, self.eval
        checks = [
            ("optim.lr", o.lr > 0, "must be positive"),
            ("optim.disc_lr", o.disc_lr > 0, "must be positive"),
            ("optim.lr_decay_factor", o.lr_decay_factor > 0, "must be positive"),
            ("optim.batch_size", o.batch_size >= 1, "must be at least 1"),
            ("optim.momentum", 0 <= o.momentum < 1, "must lie in [0, 1)"),
            ("schedule.t_grl", 0 <= s.t_grl < s.max_iteration, "must satisfy 0 <= t_grl < max_iteration"),
            ("schedule.delta", s.delta > 0, "must be positive"),
            ("schedule.mode", s.mode in GAMMA_MODES, f"must be one of {', '.join(GAMMA_MODES)}"),
            ("schedule.grl_coefficient", s.grl_coefficient >= 0, "must be non-negative"),
            ("schedule.early_stop", 0 <= s.early_stop, "must be non-negative"),
            ("data.train_count", d.train_count >= 1, "must be at least 1"),
            ("data.eval_count", d.eval_count >= 1, "must be at least 1"),
            ("model.dropout_p", 0 <= m.dropout_p < 1, "must lie in [0, 1)"),
            ("model.anchor_sizes", len(m.anchor_sizes) == 3 and all(a > 0 for a in m.anchor_sizes),
             "needs three positive sizes"),
            ("model.channels", m.channels % m.num_heads == 0 and m.channels % 2 == 0,
             "must be even and divisible by num_heads"),
            ("eval.score_threshold", 0 < e.score_threshold < 1, "must lie in (0, 1)"),
            ("eval.nms_iou", 0 < e.nms_iou < 1, "must lie in (0, 1)"),
            ("eval.iou_threshold", 0 < e.iou_threshold < 1, "must lie in (0, 1)"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        try:
            d.scene()
        except ValueError as exc:
            raise ConfigError("data", str(exc)) from None
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {"data": DataConfig, "model": ModelConfig, "schedule": ScheduleConfig, "optim": OptimConfig, "eval": EvalConfig}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x for x in raw.replace(";", ",").split(",") if x.strip()]
            return tuple(float(x) if "." in x or "e" in x.lower() else int(x) for x in items)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None


def apply_setting(config: TrainConfig, dotted: str, raw: str) -> None:
    """Set ``section.key`` (or top-level ``seed``) from a string value."""
    if dotted == "seed":
        config.seed = _parse_value(dotted, raw, 0)
        return
    section, _, key = dotted.partition(".")
    if section not in SECTIONS:
        raise ConfigError(dotted, f"unknown section {section!r}")
    obj = getattr(config, section)
    names = {f.name for f in dataclasses.fields(obj)}
    if key not in names:
        raise ConfigError(dotted, "unknown key")
    setattr(obj, key, _parse_value(dotted, raw, getattr(obj, key)))


def load_config(path: str | Path | None, overrides: typing.Iterable[str] = ()) -> TrainConfig:
    """Read an INI file (if given) and apply ``section.key=value`` overrides."""
    config = TrainConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(str(path), "config file not found")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(path), str(exc).splitlines()[0]) from None
        for section in parser.sections():
            if section not in SECTIONS and section != "run":
                raise ConfigError(section, "unknown section")
            for key, value in parser.items(section):
                apply_setting(config, "seed" if (section, key) == ("run", "seed") else f"{section}.{key}", value)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "override must look like section.key=value")
        apply_setting(config, key.strip(), value)
    return config.validate()


def dump_config(config: TrainConfig, path: str | Path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {"seed": str(config.seed)}
    for name in SECTIONS:
        section = {}
        for f in dataclasses.fields(getattr(config, name)):
            value = getattr(getattr(config, name), f.name)
            section[f.name] = ",".join(str(v) for v in value) if isinstance(value, tuple) else str(value)
        parser[name] = section
    with Path(path).open("w") as fh:
        parser.write(fh)
