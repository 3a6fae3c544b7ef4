"""Run configuration: a flat dataclass read from ``key = value`` files."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .. import decoder as dec
from .. import encoder as enc
from ..model import MODALITIES, ModelSpec


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    task: str = "ssl"
    # encoder
    layers: int = 2
    d: int = 32
    heads: int = 4
    mlp_ratio: int = 2
    spatial_hidden: int = 16
    spatial_bias: bool = True
    modality_ln: bool = True
    modality_qkv: bool = True
    modality_mlp: bool = False
    # decoder
    decoder: str = "sparse_grid"
    grid_rows: int = 5
    grid_cols: int = 10
    hidden: int = 32
    dense_channels: int = 16
    dense_stages: int = 2
    out_height: int = 20
    # optimisation
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    # inputs
    modalities: tuple = ("pose", "audio_multi")
    use_pose: bool = True
    window_ms: float = 200.0
    patch_width: int = 1
    behavior_targets: tuple = ("gaze", "orientation", "trajectory")
    # evaluation
    target_radius_deg: float = 10.0
    nms_radius_deg: float = 40.0
    spherical_radii: tuple = (2.25, 6.75, 11.25)
    # files
    train_data: str = ""
    eval_data: str = ""
    out_dir: str = "runs"

    def validate(self, check_files=False):
        if self.task not in ("ssl", "asl", "behavior"):
            raise ConfigError(f"unknown task {self.task!r}")
        if not self.modalities:
            raise ConfigError("modality subset must be nonempty")
        bad = set(self.modalities) - set(MODALITIES)
        if bad:
            raise ConfigError(f"unknown modalities {sorted(bad)}")
        if self.decoder not in ("sparse_grid", "sparse_point", "dense", "horizontal"):
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        if self.task == "behavior" and self.decoder != "sparse_grid":
            raise ConfigError("behaviour anticipation uses sparse-grid heads")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("epochs/batch_size/lr out of range")
        if check_files:
            for f in (self.train_data, self.eval_data):
                if f and not Path(f).exists():
                    raise ConfigError(f"file not found: {f}")
        return self

    def model_spec(self, audio_channels=4, n_freq=16) -> ModelSpec:
        e = enc.EncoderConfig(self.layers, self.d, self.heads, self.mlp_ratio, self.spatial_hidden,
                              self.spatial_bias, self.modality_ln, self.modality_qkv, self.modality_mlp)
        out_dim = 3 * len(self.behavior_targets) if self.task == "behavior" else 1
        dc = dec.DecoderConfig(self.decoder, self.hidden, out_dim, self.dense_channels,
                               self.dense_stages, 3, self.out_height)
        try:
            return ModelSpec(e, dc, self.grid_rows, self.grid_cols, tuple(self.modalities), self.use_pose,
                             audio_channels, n_freq, self.patch_width)
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()[:16]

    def update(self, **kw):
        return replace(self, **kw)


def _parse(kind, raw: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind is tuple:
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {kind.__name__}") from None


_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}
_FLOAT_TUPLES = {"spherical_radii"}


def coerce(key, raw):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    val = _parse(_TYPES[key], raw) if isinstance(raw, str) else raw
    if key in _FLOAT_TUPLES:
        try:
            val = tuple(float(x) for x in val)
        except ValueError:
            raise ConfigError(f"{key} must be numbers") from None
    return val


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    kw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        kw[k.strip()] = coerce(k.strip(), v)
    return replace(base or RunConfig(), **kw)


def load_config(path, overrides=None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    cfg = parse_config(text)
    return apply_overrides(cfg, overrides or {})


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    return replace(cfg, **{k: coerce(k, v) for k, v in overrides.items()})


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(cfg).items())
