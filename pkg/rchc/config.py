# rchc/config.py

"""Run configuration.

A config file is a flat KEY=VALUE text file (the .env format, read with
python-dotenv). Values are layered: dataclass defaults, then the file, then
environment variables named RCHC_<KEY>, then command-line flags.
"""

import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from dotenv import dotenv_values

from .errors import ConfigError

# --- Configuration ---

ENV_PREFIX = "RCHC_"
REQUIRED_KEYS = ("dataset", "num_classes")
MODES = ("shot", "rchc")
DATASETS = ("blobs", "bars", "csv")
DEFAULT_SEEDS = (2019, 2020, 2021)


@dataclass(frozen=True)
class AdaptationConfig:
    dataset: str
    num_classes: int

    # adaptation objective
    mode: str = "rchc"
    r_th: float = 0.65
    r_th_auto: bool = False
    alpha_ce: float = 0.3
    beta_rot: float = 0.6
    alpha_smooth: float = 0.1
    rotation_enabled: bool = False

    # optimization
    epochs: int = 15
    source_epochs: int = 30
    batch_size: int = 64
    lr_new_layers: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    seed: int = 2019
    seeds: tuple = DEFAULT_SEEDS
    checkpoint_interval: int = 0

    # architecture
    hidden_width: int = 64
    hidden_layers: int = 2
    embedding_dim: int = 16

    # data
    data_seed: int = 0
    n_source: int = 600
    n_target: int = 600
    blob_dim: int = 2
    blob_radius: float = 4.0
    blob_std: float = 0.8
    shift_translation: tuple = (0.0, 0.0)
    shift_rotation_deg: float = 0.0
    target_class_ratios: tuple = ()
    grid_size: int = 8
    source_thickness: int = 1
    target_thickness: int = 2
    source_noise: float = 0.05
    target_noise: float = 0.3
    source_csv: str = ""
    target_csv: str = ""
    target_csv_labeled: bool = True

    @property
    def lr_backbone(self):
        return self.lr_new_layers / 10.0

    @property
    def effective_r_th(self):
        """SHOT never reconciles, which is RCHC with a zero threshold."""
        return 0.0 if self.mode == "shot" else self.r_th

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigError("dataset", f"must be one of {', '.join(DATASETS)}, got '{self.dataset}'")
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {', '.join(MODES)}, got '{self.mode}'")
        if self.num_classes < 2:
            raise ConfigError("num_classes", f"needs at least 2 classes, got {self.num_classes}")
        if not 0.0 <= self.r_th <= 1.0:
            raise ConfigError("r_th", f"must lie in [0, 1], got {self.r_th}")
        if not 0.0 <= self.alpha_smooth < 1.0:
            raise ConfigError("alpha_smooth", f"must lie in [0, 1), got {self.alpha_smooth}")
        for key in ("alpha_ce", "beta_rot", "momentum", "weight_decay", "blob_std", "source_noise", "target_noise"):
            if getattr(self, key) < 0:
                raise ConfigError(key, f"must be non-negative, got {getattr(self, key)}")
        for key in ("epochs", "source_epochs", "checkpoint_interval", "hidden_layers"):
            if getattr(self, key) < 0:
                raise ConfigError(key, f"must be >= 0, got {getattr(self, key)}")
        for key in ("batch_size", "hidden_width", "embedding_dim", "n_source", "n_target", "grid_size",
                    "source_thickness", "target_thickness"):
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be >= 1, got {getattr(self, key)}")
        if self.lr_new_layers <= 0:
            raise ConfigError("lr_new_layers", f"must be positive, got {self.lr_new_layers}")
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if self.dataset == "csv" and not self.target_csv:
            raise ConfigError("target_csv", "required when dataset=csv")
        if self.rotation_enabled and self.dataset == "blobs":
            raise ConfigError("rotation_enabled", "rotation needs image data (dataset=bars or csv with grid_size)")
        return self

    def to_mapping(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_overrides(self, **overrides):
        return from_mapping({**self.to_mapping(), **overrides})


# --- Parsing ---

_TYPES = typing.get_type_hints(AdaptationConfig)


def _parse_bool(key, raw):
    text = str(raw).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got '{raw}'")


def _parse_value(key, raw):
    kind = _TYPES[key]
    if not isinstance(raw, str):
        if kind is tuple:
            return tuple(raw)
        if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        return raw
    text = raw.strip()
    try:
        if kind is bool:
            return _parse_bool(key, text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            items = [item.strip() for item in text.split(",") if item.strip()]
            cast = int if key == "seeds" else float
            return tuple(cast(item) for item in items)
    except ValueError:
        raise ConfigError(key, f"cannot parse '{raw}' as {kind.__name__}") from None
    return text.lower() if key in ("mode", "dataset") else text


def from_mapping(raw):
    """Build and validate a config from raw key -> value pairs (strings or typed)."""
    values = {}
    for key, value in raw.items():
        if key not in _TYPES:
            raise ConfigError(key, "unknown key")
        if value is None:
            continue
        values[key] = _parse_value(key, value)
    for key in REQUIRED_KEYS:
        if key not in values:
            raise ConfigError(key, "missing required key")
    return AdaptationConfig(**values).validate()


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    return {
        name: environ[ENV_PREFIX + name.upper()]
        for name in _TYPES
        if ENV_PREFIX + name.upper() in environ
    }


def load_config(path, overrides=None, environ=None):
    """defaults < file < RCHC_* environment < overrides."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    raw = {key.strip().lower(): value for key, value in dotenv_values(path).items()}
    raw.update(env_overrides(environ))
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return from_mapping(raw)


def config_text(config):
    """Canonical KEY=VALUE text, keys sorted; also the on-disk format of a saved config."""
    lines = []
    for key, value in sorted(config.to_mapping().items()):
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def config_hash(config):
    """SHA-1 over a git blob header plus the canonical text."""
    body = config_text(config).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def save_config(config, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config_text(config))
    return path


def field_names():
    return [f.name for f in dataclasses.fields(AdaptationConfig)]
