"""Sectioned key-value configuration with a full default dump."""
from __future__ import annotations

import configparser
import io
import json
from dataclasses import asdict, dataclass, fields, is_dataclass
from dataclasses import field as dc_field

from .deform import FieldConfig
from .mesh import VolumeConfig
from .optim import DensifyConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainSection:
    data: str = ""
    output: str = "run"
    iterations: int = 4000
    warmup: int = 1000
    seed: int = 0
    downscale: int = 1
    sh_degree: int = 1
    init_points: int = 5000
    init_extent: float = 0.7
    init_opacity: float = 0.1
    eval_interval: int = 1000
    checkpoint_interval: int = 1000
    max_nonfinite: int = 10
    graph_interval: int = 500
    arap_sample: int = 4096
    arap_k: int = 10


@dataclass
class LrSection:
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    spatial_scale: float = 0.0  # 0 -> derived from the camera extent
    feature: float = 2.5e-3
    feature_rest_factor: float = 0.05
    opacity: float = 0.05
    scaling: float = 5e-3
    rotation: float = 1e-3
    grid_init: float = 1.6e-2
    grid_final: float = 1.6e-4
    decoder_init: float = 1.6e-3
    decoder_final: float = 1.6e-5


@dataclass
class LossSection:
    lambda1: float = 0.05
    lambda2: float = 0.02
    ramp_start: int = 1400
    ramp_end: int = 1800
    normal_weight_mode: str = "intent"
    tv_weight: float = 2e-4


@dataclass
class RenderSection:
    background: tuple = (1.0, 1.0, 1.0)
    tile_size: int = 16
    dilation: float = 0.3
    alpha_max: float = 0.99
    cutoff_sigma: float = 3.0
    min_transmittance: float = 1e-4
    backend: str = "compiled"


@dataclass
class Config:
    train: TrainSection = dc_field(default_factory=TrainSection)
    lr: LrSection = dc_field(default_factory=LrSection)
    densify: DensifyConfig = dc_field(default_factory=DensifyConfig)
    loss: LossSection = dc_field(default_factory=LossSection)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    render: RenderSection = dc_field(default_factory=RenderSection)
    mesh: VolumeConfig = dc_field(default_factory=VolumeConfig)

    def validate(self) -> "Config":
        t = self.train
        if t.iterations < 0 or t.warmup < 0:
            raise ConfigError("iterations and warmup must be non-negative")
        if self.loss.ramp_end < self.loss.ramp_start:
            raise ConfigError("ramp_end must not precede ramp_start")
        if self.loss.normal_weight_mode not in ("intent", "printed"):
            raise ConfigError(f"normal_weight_mode must be intent or printed, got {self.loss.normal_weight_mode!r}")
        if self.render.backend not in ("compiled", "torch"):
            raise ConfigError(f"unknown render backend {self.render.backend!r}")
        if t.init_points < 1:
            raise ConfigError("init_points must be positive")
        return self

    def section_names(self):
        return [f.name for f in fields(self)]


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return json.dumps(_plain(value))
    return str(value)


def _plain(v):
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    return v


def _parse(text: str, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        val = json.loads(text)

        def tup(x):
            return tuple(tup(y) for y in x) if isinstance(x, list) else x
        return tup(val)
    return text.strip()


def to_ini(cfg: Config) -> str:
    parser = configparser.ConfigParser()
    for name in cfg.section_names():
        parser[name] = {k: _format(v) for k, v in asdict(getattr(cfg, name)).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_ini(text: str, base: Config | None = None) -> Config:
    cfg = base or Config()
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for section in parser.sections():
        if section not in cfg.section_names():
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        known = {f.name: f for f in fields(target)}
        for key, raw in parser[section].items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                setattr(target, key, _parse(raw, getattr(target, key)))
            except (ValueError, json.JSONDecodeError) as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
    return cfg.validate()


def load_config(path) -> Config:
    with open(path) as fh:
        return from_ini(fh.read())


def to_dict(cfg) -> dict:
    return asdict(cfg) if is_dataclass(cfg) else dict(cfg)
