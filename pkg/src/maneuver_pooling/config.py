"""Configuration dataclasses and the flat ``key = value`` config file format.

Every constant that shapes a result lives here with its default, so a run
manifest can record exactly which values produced which table.

Config file syntax::

    # comment
    t_h = 3
    pooling = polar_vr
    split_ratios = 0.72, 0.10, 0.18

A key is applied to every config object that declares a field of that name;
an unknown key is an error.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass

from .errors import ConfigError

FOOT = 0.3048

POOLING_KEYS = ("slstm", "csp", "sgan", "polar", "polar_vr")


@dataclass
class PipelineConfig:
    t_h: float = 3.0  # s of history
    t_f: float = 5.0  # s of prediction
    native_rate: int = 10  # Hz
    downsample: int = 2
    segment_len: float = 8.0  # s
    accel_threshold: float = 0.2  # m/s^2
    split_ratios: tuple = (0.72, 0.10, 0.18)
    seed: int = 0
    ramp_lanes: tuple = (7, 8)
    lane_ids_increase_rightward: bool = True
    anchor_stride: int = 1  # native frames between consecutive anchors
    d_lat: float = 18 * FOOT  # 1.5 lanes of 12 ft
    d_lon: float = 97.5 * FOOT  # half of 13 rows of 15 ft

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.t_h + self.t_f > self.segment_len + 1e-9:
            raise ConfigError(f"t_h + t_f = {self.t_h + self.t_f} exceeds segment_len {self.segment_len}")
        if self.downsample < 1:
            raise ConfigError("downsample must be >= 1")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three numbers summing to 1, got {self.split_ratios}")
        if self.anchor_stride < 1:
            raise ConfigError("anchor_stride must be >= 1")
        for name in ("history_native", "future_native"):
            span = getattr(self, name)
            if span % self.downsample:
                raise ConfigError(f"{name}={span} frames is not a multiple of downsample={self.downsample}")

    @property
    def history_native(self) -> int:
        return int(round(self.t_h * self.native_rate))

    @property
    def future_native(self) -> int:
        return int(round(self.t_f * self.native_rate))

    @property
    def history_frames(self) -> int:
        return self.history_native // self.downsample + 1

    @property
    def future_frames(self) -> int:
        return self.future_native // self.downsample

    @property
    def sample_rate(self) -> float:
        return self.native_rate / self.downsample


@dataclass(frozen=True)
class NeighborhoodConfig:
    d_lat: float = 18 * FOOT
    d_lon: float = 97.5 * FOOT

    def __post_init__(self):
        if self.d_lat <= 0 or self.d_lon <= 0:
            raise ConfigError("neighborhood distances must be positive")


@dataclass(frozen=True)
class GridConfig:
    rows: int = 13
    cols: int = 3
    row_pitch: float = 15 * FOOT

    def __post_init__(self):
        if self.rows % 2 == 0:
            raise ConfigError("grid rows must be odd so the ego sits on the center row")
        if self.row_pitch <= 0:
            raise ConfigError("row_pitch must be positive")

    @property
    def center(self):
        return self.rows // 2, self.cols // 2


@dataclass
class ModelConfig:
    pooling: str = "polar_vr"
    maneuvers: bool = True
    output: str = "auto"  # bivariate | trivariate | auto (trivariate only for polar_vr)
    output_layout: str = "horizon"  # horizon | increments | absolute, see ManeuverModel.output_scale
    embed_width: int = 32
    enc_hidden: int = 64
    dec_hidden: int = 128
    mlp_width: int = 256
    slstm_embed: int = 64
    csp_embed: int = 64
    csp_channels: int = 16
    leaky_slope: float = 0.1
    n_loc: int = 3
    n_acc: int = 3
    history_frames: int = 16
    future_frames: int = 25
    position_scale: float = 10.0  # m per unit of network input/output
    velocity_scale: float = 5.0  # m/s per unit
    step_length: float = 5.0  # m covered per output step at 25 m/s, used by the horizon layout
    lateral_scale: float = 3.0  # m per unit of lateral output in the horizon layout
    d_lat: float = 18 * FOOT
    d_lon: float = 97.5 * FOOT
    grid_rows: int = 13
    grid_cols: int = 3
    row_pitch: float = 15 * FOOT

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.pooling not in POOLING_KEYS:
            raise ConfigError(f"unknown pooling {self.pooling!r}; valid keys: {', '.join(POOLING_KEYS)}")
        if self.output not in ("auto", "bivariate", "trivariate"):
            raise ConfigError(f"unknown output parameterization {self.output!r}")
        if self.output_layout not in ("horizon", "increments", "absolute"):
            raise ConfigError(f"unknown output layout {self.output_layout!r}")
        if self.position_scale <= 0 or self.velocity_scale <= 0 or self.step_length <= 0 or self.lateral_scale <= 0:
            raise ConfigError("position_scale, velocity_scale, step_length and lateral_scale must be positive")
        if self.n_loc != 3 or self.n_acc != 3:
            raise ConfigError("maneuver class counts are fixed at 3 and 3")
        for name in ("embed_width", "enc_hidden", "dec_hidden", "mlp_width", "slstm_embed",
                     "csp_embed", "csp_channels", "history_frames", "future_frames"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def parameterization(self) -> str:
        if self.output != "auto":
            return self.output
        return "trivariate" if self.pooling == "polar_vr" else "bivariate"

    @property
    def grid(self) -> GridConfig:
        return GridConfig(self.grid_rows, self.grid_cols, self.row_pitch)

    @property
    def neighborhood(self) -> NeighborhoodConfig:
        return NeighborhoodConfig(self.d_lat, self.d_lon)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_schedule: str = "constant"
    lr_final: float = 1e-5
    batch_size: int = 128
    epochs: int = 10
    max_steps: typing.Optional[int] = None
    mse_pretrain_epochs: int = 0
    clip_norm: float = 10.0
    seed: int = 0
    lambda_traj: float = 1.0
    lambda_mnv: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.optimizer != "adam":
            raise ConfigError("only the adam optimizer is provided")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be constant or cosine")
        if self.mse_pretrain_epochs < 0:
            raise ConfigError("mse_pretrain_epochs must be >= 0")
        if self.lr_final < 0:
            raise ConfigError("lr_final must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")


def _convert(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _convert(raw, args[0], key)
    try:
        if hint is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is tuple:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) if s.lstrip("-").isdigit() else float(s) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {getattr(hint, '__name__', hint)}") from None


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into a dict of raw strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def apply_overrides(overrides: dict, *configs):
    """Return copies of ``configs`` with typed overrides applied.

    Values may be raw strings (from a file) or already-typed python values.
    """
    hints = [typing.get_type_hints(type(c)) for c in configs]
    updates = [{} for _ in configs]
    for key, value in overrides.items():
        matched = False
        for hint, update in zip(hints, updates):
            if key in hint:
                update[key] = _convert(value, hint[key], key) if isinstance(value, str) else value
                matched = True
        if not matched:
            raise ConfigError(f"unknown config key {key!r}")
    return tuple(dataclasses.replace(c, **u) for c, u in zip(configs, updates))


def to_dict(config) -> dict:
    out = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def from_dict(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items() if k in names}
    return cls(**kwargs)


__all__ = [
    "FOOT", "GridConfig", "ModelConfig", "NeighborhoodConfig", "POOLING_KEYS", "PipelineConfig",
    "TrainConfig", "apply_overrides", "from_dict", "parse_config_text", "read_config_file",
    "to_dict",
]
