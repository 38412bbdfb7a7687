"""
Experiment configuration: scale presets, key=value config files and flag overrides.

Precedence is flag > file > scale preset > field default. Config files use the same
``key=value`` text as ``.env`` files and are read with python-dotenv.
"""
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values

from .dp_mechanism import DpConfig
from .errors import ConfigurationError, UsageError
from .methods import METHOD_NAMES, get_method
from .segmentation_model import ModelConfig

FEDBN_EVAL_MODES = ("recalibrated", "client_mean")

SCALE_PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {"rounds": 25, "lr_decay_at": 18, "base_channels": 8, "mia_samples": 100},
    "paper": {"rounds": 100, "lr_decay_at": 70, "base_channels": 64, "mia_samples": 500},
}


@dataclass(frozen=True)
class TrainConfig:
    method: str = "fedavg"
    lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_at: int = 70
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    local_epochs: int = 1
    rounds: int = 100
    prox_mu: float = 0.0
    bn_reset: bool = False
    fedbn_eval: str = "recalibrated"

    def __post_init__(self):
        get_method(self.method)
        for name in ("lr", "lr_decay_factor", "momentum", "weight_decay", "prox_mu"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigurationError(f"must be a finite value >= 0, got {value}", field=name)
        if self.batch_size < 1:
            raise ConfigurationError(f"must be >= 1, got {self.batch_size}", field="batch_size")
        for name in ("local_epochs", "rounds", "lr_decay_at"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"must be >= 0, got {getattr(self, name)}", field=name)
        if self.fedbn_eval not in FEDBN_EVAL_MODES:
            raise ConfigurationError(f"expected one of {', '.join(FEDBN_EVAL_MODES)}", field="fedbn_eval")

    def lr_at(self, round_index: int) -> float:
        """Learning rate for a 1-indexed round; the decay applies from ``lr_decay_at`` on."""
        if self.lr_decay_at and round_index >= self.lr_decay_at:
            return self.lr * self.lr_decay_factor
        return self.lr


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_ints(raw: str) -> Tuple[int, ...]:
    return tuple(int(p) for p in raw.split(",") if p.strip())


def _parse_names(raw: str) -> Tuple[str, ...]:
    return tuple(p.strip() for p in raw.split(",") if p.strip())


_PARSERS: Dict[type, Callable[[str], Any]] = {
    int: int,
    float: float,
    str: str,
    bool: _parse_bool,
}


@dataclass(frozen=True)
class ExperimentConfig:
    scale: str = "desk"
    seeds: Tuple[int, ...] = (1, 2, 3)
    methods: Tuple[str, ...] = METHOD_NAMES
    data: str = "data"
    out: str = "runs"
    rounds: int = 25
    local_epochs: int = 1
    lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_at: int = 18
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    prox_mu: float = 0.01
    bn_reset: bool = False
    fedbn_eval: str = "recalibrated"
    clip_norm: float = 1.0
    noise_sigma: float = 1.2
    dp_delta: float = 1e-5
    base_channels: int = 8
    mia_cadence: int = 1
    mia_samples: int = 100
    shadow_models: int = 1
    # 0 defers to FEDSEG_THREADS
    threads: int = 0

    def __post_init__(self):
        if self.scale not in SCALE_PRESETS:
            raise ConfigurationError(f"expected one of {', '.join(SCALE_PRESETS)}, got {self.scale!r}", field="scale")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required", field="seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError(f"seeds must be distinct, got {self.seeds}", field="seeds")
        if any(s < 0 for s in self.seeds):
            raise ConfigurationError("seeds must be non-negative", field="seeds")
        if not self.methods:
            raise ConfigurationError("at least one method is required", field="methods")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigurationError(f"methods must be distinct, got {self.methods}", field="methods")
        for name in self.methods:
            get_method(name)
        for name in ("mia_cadence", "mia_samples", "threads"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"must be >= 0, got {getattr(self, name)}", field=name)
        if self.shadow_models < 1:
            raise ConfigurationError(f"must be >= 1, got {self.shadow_models}", field="shadow_models")
        # the derived configs validate the remaining fields
        self.train_config(self.methods[0])
        self.dp_config()
        self.model_config()

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_sources(
        cls,
        file_values: Optional[Mapping[str, Any]] = None,
        flag_values: Optional[Mapping[str, Any]] = None,
    ) -> "ExperimentConfig":
        file_values = dict(file_values or {})
        flag_values = {k: v for k, v in (flag_values or {}).items() if v is not None}
        known = set(cls.field_names())
        for source in (file_values, flag_values):
            for key in source:
                if key not in known:
                    raise ConfigurationError("unknown configuration key", field=key)

        scale = cls._coerce("scale", flag_values.get("scale", file_values.get("scale", cls.scale)))
        if scale not in SCALE_PRESETS:
            raise ConfigurationError(f"expected one of {', '.join(SCALE_PRESETS)}, got {scale!r}", field="scale")
        merged: Dict[str, Any] = dict(SCALE_PRESETS[scale])
        for source in (file_values, flag_values):
            for key, raw in source.items():
                merged[key] = cls._coerce(key, raw)
        merged["scale"] = scale
        return cls(**merged)

    @classmethod
    def _coerce(cls, name: str, raw: Any) -> Any:
        f = next(f for f in dataclasses.fields(cls) if f.name == name)
        if not isinstance(raw, str):
            if name == "seeds":
                return tuple(int(v) for v in raw)
            if name == "methods":
                return tuple(raw)
            return raw
        try:
            if name == "seeds":
                return _parse_ints(raw)
            if name == "methods":
                return _parse_names(raw)
            return _PARSERS[type(f.default)](raw.strip())
        except ValueError as exc:
            raise ConfigurationError(f"cannot parse {raw!r}: {exc}", field=name) from None

    def train_config(self, method: str) -> TrainConfig:
        profile = get_method(method)
        return TrainConfig(
            method=method,
            lr=self.lr,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_at=self.lr_decay_at,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            local_epochs=self.local_epochs,
            rounds=self.rounds,
            prox_mu=self.prox_mu if profile.uses_prox else 0.0,
            bn_reset=self.bn_reset,
            fedbn_eval=self.fedbn_eval,
        )

    def dp_config(self) -> DpConfig:
        return DpConfig(clip_norm=self.clip_norm, noise_sigma=self.noise_sigma, delta=self.dp_delta)

    def model_config(self) -> ModelConfig:
        return ModelConfig(base_channels=self.base_channels)

    def items(self) -> List[Tuple[str, str]]:
        return [(name, format_value(getattr(self, name))) for name in self.field_names()]


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_items(obj: Any, prefix: str = "") -> List[Tuple[str, str]]:
    """``(key, text)`` pairs for every field of a config dataclass."""
    return [(f"{prefix}{f.name}", format_value(getattr(obj, f.name))) for f in dataclasses.fields(obj)]


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    values = dotenv_values(path, interpolate=False)
    empty = [k for k, v in values.items() if v is None]
    if empty:
        raise ConfigurationError("key without a value", field=empty[0])
    return dict(values)
