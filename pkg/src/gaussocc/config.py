"""Run configuration and its INI round-trip.

Every field of :class:`ModelConfig` is written under a section named after
the sub-config; floats are written with ``repr`` so they read back
bit-identically.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import typing
from dataclasses import dataclass, field

from .losses import LossWeights
from .mamba import HeadConfig


class ConfigError(ValueError):
    """Bad or inconsistent configuration."""


@dataclass
class GridConfig:
    origin: tuple = (0.0, 0.0, 0.0)
    voxel_size: float = 0.5
    shape: tuple = (32, 32, 16)
    cutoff: float = 3.0


@dataclass
class LiftConfig:
    use_ldfa: bool = True
    use_lidar: bool = True
    depth_planes: int = 16
    keypoints: int = 4
    chunks: int = 4
    att_dim: int = 8
    ring: float = 1.0
    camera_keypoints: int = 4
    camera_ring: float = 2.0


@dataclass
class SmoothConfig:
    enabled: bool = True
    layers: int = 2
    tau: float = 1.0
    xi: float = 1e-6
    p_select: float = 0.5


@dataclass
class FusionConfig:
    mode: str = "aclf"
    heads: int = 1
    proj_dim: int = 0  # 0 means "same as feature dim"


@dataclass
class OptimConfig:
    steps: int = 1000
    lr: float = 3e-3
    lr_min: float = 3e-5
    anchor_lr_scale: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ModelConfig:
    seed: int = 0
    num_gaussians: int = 512
    num_classes: int = 4
    feat_dim: int = 32
    init_scale: float = 1.5
    grid: GridConfig = field(default_factory=GridConfig)
    lift: LiftConfig = field(default_factory=LiftConfig)
    smooth: SmoothConfig = field(default_factory=SmoothConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def validate(self):
        if self.num_gaussians < 1:
            raise ConfigError("num_gaussians must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.feat_dim < 1 or self.feat_dim % self.fusion.heads:
            raise ConfigError("feat_dim must be positive and divisible by fusion heads")
        if self.fusion.mode not in ("add", "concat", "aclf"):
            raise ConfigError(f"unknown fusion mode {self.fusion.mode!r}")
        if not 1 <= self.lift.chunks <= self.lift.depth_planes:
            raise ConfigError("chunks must lie in [1, depth_planes]")
        if self.grid.voxel_size <= 0 or min(self.grid.shape) < 1:
            raise ConfigError("grid must have positive voxel size and shape")
        if self.smooth.layers < 0 or self.optim.steps < 0:
            raise ConfigError("layer and step counts must be non-negative")
        return self


SECTIONS = ("grid", "lift", "smooth", "fusion", "head", "loss", "optim")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _parse(text: str, kind, default):
    text = text.strip()
    if kind is bool or kind == "bool":
        if text.lower() not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(default, tuple):
        item = type(default[0]) if default else float
        return tuple(item(t) for t in text.split(","))
    return kind(text)


def _fields(obj):
    hints = typing.get_type_hints(type(obj))
    return [(f.name, hints[f.name], getattr(obj, f.name)) for f in dataclasses.fields(obj)]


def to_ini(cfg: ModelConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["model"] = {name: _fmt(v) for name, _, v in _fields(cfg) if name not in SECTIONS}
    for sec in SECTIONS:
        cp[sec] = {name: _fmt(v) for name, _, v in _fields(getattr(cfg, sec))}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _fill(obj, section, where):
    known = {name for name, _, _ in _fields(obj)}
    for key in section:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{where}]")
    values = {}
    for name, kind, default in _fields(obj):
        if name in SECTIONS:
            continue
        if name in section:
            try:
                values[name] = _parse(section[name], kind, default)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{where}] {name}: {exc}") from None
    return values


def from_ini(text: str) -> ModelConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for sec in cp.sections():
        if sec != "model" and sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
    base = ModelConfig()
    kwargs = _fill(base, cp["model"] if cp.has_section("model") else {}, "model")
    for sec in SECTIONS:
        sub = getattr(base, sec)
        vals = _fill(sub, cp[sec] if cp.has_section(sec) else {}, sec)
        try:
            kwargs[sec] = type(sub)(**{**dataclasses.asdict(sub), **vals})
        except ValueError as exc:
            raise ConfigError(f"[{sec}] {exc}") from None
    return ModelConfig(**kwargs).validate()


def load_config(path) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        return from_ini(fh.read())


def save_config(cfg: ModelConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_ini(cfg))


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(to_ini(cfg).encode()).hexdigest()[:16]


def with_overrides(cfg: ModelConfig, **changes) -> ModelConfig:
    """Copy with dotted overrides, e.g. ``{"fusion.mode": "add", "seed": 3}``."""
    out = dataclasses.replace(cfg)
    for key, value in changes.items():
        if "." in key:
            sec, name = key.split(".", 1)
            setattr(out, sec, dataclasses.replace(getattr(out, sec), **{name: value}))
        else:
            setattr(out, key, value)
    return out.validate()
