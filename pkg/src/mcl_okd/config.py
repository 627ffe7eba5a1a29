"""Training configuration: a flat, typed key-value document.

Config files are TOML (``.toml``) or JSON (``.json``). Every key must be a
field of :class:`TrainConfig`; unknown keys and wrongly typed values are
rejected. ``REQUIRED_KEYS`` must appear in every config file. A run
manifest (``manifest.json``) is also accepted: its ``config`` table is used.

Precedence, lowest to highest: field defaults, config file, ``--override
key=value`` flags, dedicated CLI flags (``--seed``).
"""
import dataclasses
import json
import sys
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .contrastive import ContrastiveSettings
from .data import SyntheticSpec
from .errors import ConfigError
from .peers import BackboneSpec

REQUIRED_KEYS = ("dataset", "M", "epochs")


@dataclass(frozen=True)
class TrainConfig:
    # data
    dataset: str = "synthetic"
    data_root: Optional[str] = None
    synth_n_train: int = 5000
    synth_n_test: int = 2000
    synth_num_classes: int = 10
    synth_resolution: int = 16
    synth_modes: int = 3
    synth_blobs: int = 3
    synth_shift: int = 2
    synth_noise: float = 0.6
    synth_distractor: float = 0.8
    synth_seed: int = 0
    augment: str = "standard"
    val_fraction: float = 0.0
    # peers
    M: int = 4
    share_stem: bool = True
    widths: Tuple[int, ...] = (16, 32, 64)
    depths: Tuple[int, ...] = (1, 1, 1)
    branch_stages: int = 2
    d: int = 128
    proj_layers: int = 1
    block: str = "plain"
    # objective
    T: float = 3.0
    beta: float = 0.025
    use_kl: bool = True
    kl_detach: bool = True
    tau: float = 0.1
    K: int = 256
    rho: float = 0.5
    positive: str = "live"
    # optimization
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    milestones: Tuple[int, ...] = (15, 25)
    gamma: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        _validate(self)

    # derived views
    @property
    def num_classes(self):
        if self.dataset == "cifar100":
            return 100
        if self.dataset == "cifar10":
            return 10
        return self.synth_num_classes

    @property
    def resolution(self):
        return 32 if self.dataset.startswith("cifar") else self.synth_resolution

    @property
    def contrastive_enabled(self):
        return self.beta > 0 and self.M >= 2

    @property
    def kl_enabled(self):
        return self.use_kl and self.M >= 2

    def backbone(self):
        return BackboneSpec(
            num_classes=self.num_classes,
            in_channels=3,
            resolution=self.resolution,
            widths=self.widths,
            depths=self.depths,
            branch_stages=self.branch_stages,
            embed_dim=self.d,
            proj_layers=self.proj_layers,
            block=self.block,
        )

    def synthetic(self):
        return SyntheticSpec(
            n_train=self.synth_n_train,
            n_test=self.synth_n_test,
            num_classes=self.synth_num_classes,
            resolution=self.synth_resolution,
            modes=self.synth_modes,
            blobs=self.synth_blobs,
            shift=self.synth_shift,
            noise=self.synth_noise,
            distractor=self.synth_distractor,
            seed=self.synth_seed,
        )

    def contrastive(self):
        return ContrastiveSettings(tau=self.tau, K=self.K, positive=self.positive)

    def to_dict(self):
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_CHOICES = {
    "dataset": ("synthetic", "cifar10", "cifar100"),
    "augment": ("none", "standard"),
    "positive": ("live", "bank"),
    "schedule": ("cosine", "step", "constant"),
    "dtype": ("float32", "float64"),
    "block": ("plain", "residual"),
}
_POSITIVE = ("M", "T", "tau", "K", "d", "batch_size", "lr", "synth_n_train", "synth_n_test",
             "synth_resolution", "synth_modes", "synth_blobs", "proj_layers")
_NONNEGATIVE = ("beta", "epochs", "weight_decay", "momentum", "synth_noise", "synth_distractor", "synth_shift")


def _validate(cfg):
    for key, allowed in _CHOICES.items():
        if getattr(cfg, key) not in allowed:
            raise ConfigError(key, f"must be one of {allowed}, got {getattr(cfg, key)!r}")
    for key in _POSITIVE:
        if not getattr(cfg, key) > 0:
            raise ConfigError(key, f"must be positive, got {getattr(cfg, key)!r}")
    for key in _NONNEGATIVE:
        if getattr(cfg, key) < 0:
            raise ConfigError(key, f"must be non-negative, got {getattr(cfg, key)!r}")
    if not 0.0 <= cfg.rho <= 1.0:
        raise ConfigError("rho", f"must be in [0, 1], got {cfg.rho}")
    if not 0.0 <= cfg.val_fraction < 1.0:
        raise ConfigError("val_fraction", f"must be in [0, 1), got {cfg.val_fraction}")
    if cfg.synth_num_classes < 2:
        raise ConfigError("synth_num_classes", "must be at least 2")
    if len(cfg.widths) != len(cfg.depths) or len(cfg.widths) < 3:
        raise ConfigError("widths", "widths and depths need equal length of at least 3")
    if not 1 <= cfg.branch_stages <= len(cfg.widths):
        raise ConfigError("branch_stages", f"must be in [1, {len(cfg.widths)}]")


_TYPES = typing.get_type_hints(TrainConfig)


def _coerce(key, value):
    """Check/convert a parsed value to the declared field type."""
    kind = _TYPES[key]
    origin = typing.get_origin(kind)
    if origin is typing.Union:  # Optional[str]
        if value is None:
            return None
        kind = str
        origin = None
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(key, f"expected a list of integers, got {value!r}")
        return tuple(value)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def from_dict(values, require=True):
    known = {f.name for f in fields(TrainConfig)}
    for key in values:
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
    if require:
        for key in REQUIRED_KEYS:
            if key not in values:
                raise ConfigError(key, "required field is missing")
    return TrainConfig(**{k: _coerce(k, v) for k, v in values.items()})


def read_config_file(path):
    """Raw key-value mapping from a TOML/JSON config or a run manifest."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        if path.suffix == ".json":
            values = json.loads(text)
        else:
            values = tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from exc
    if isinstance(values, dict) and "config" in values and isinstance(values["config"], dict):
        values = values["config"]
    return values


def parse_override(text):
    """``key=value`` -> ``(key, value)``, value parsed per the field type."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key not in _TYPES:
        raise ConfigError(key, "unknown configuration key")
    raw = raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare string
    if typing.get_origin(_TYPES[key]) is typing.Union and raw.lower() in ("none", "null"):
        value = None
    return key, value


def load_config(path, overrides=(), **flags):
    """Config file, then ``key=value`` overrides, then explicit flags."""
    values = dict(read_config_file(path))
    for text in overrides:
        key, value = parse_override(text)
        values[key] = value
    for key, value in flags.items():
        if value is not None:
            values[key] = value
    return from_dict(values)
