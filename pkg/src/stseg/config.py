"""Configuration dataclasses and the single table of numeric defaults.

Every default used by the CLI lives in :data:`DEFAULTS`. Four dilated
residual layers, a temporal kernel of 3, 500 class-balanced samples per
epoch and 100 epochs follow the published recipe. The remaining values are
desk-scale choices sized for CPU training on the synthetic benchmark; the
published feature size of 128 and window of 14 are kept in
``REFERENCE_MODEL``. The model's class count is not configurable: it is read
from the dataset manifest.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigurationError

DEFAULTS: dict[str, dict[str, Any]] = {
    "dataset": {
        "width": 64,
        "height": 64,
        "num_frames": 30,
        "num_classes": 4,
        "num_train": 40,
        "num_val": 5,
        "num_test": 10,
        "fps": 10.0,
        "noise_sigma": 12.0,
        "ambiguity": 0.3,
        "occluder_duty": 0.5,
        "max_speed": 1.5,
        "seed": 0,
    },
    "model": {
        "num_layers": 4,
        "kernel_t": 3,
        "feature_size": 16,
        "temporal_window": 8,
        "spatial_downsample": 4,
        "encoder_channels": [16, 32],
    },
    "train": {
        "epochs": 100,
        "samples_per_epoch": 500,
        "batch_size": 4,
        "max_lr": 1e-3,
        "seed": 0,
        "hflip_p": 0.5,
        "freeze_encoder": False,
        "encoder_init": None,
        "val_windows_per_sequence": 8,
    },
}

REFERENCE_MODEL: dict[str, Any] = {
    "num_layers": 4,
    "kernel_t": 3,
    "feature_size": 128,
    "temporal_window": 14,
    "encoder_channels": [32, 64],
}


@dataclass
class DecoderConfig:
    num_layers: int = DEFAULTS["model"]["num_layers"]
    kernel_t: int = DEFAULTS["model"]["kernel_t"]
    feature_size: int = DEFAULTS["model"]["feature_size"]
    temporal_window: int = DEFAULTS["model"]["temporal_window"]
    num_classes: int = DEFAULTS["dataset"]["num_classes"]
    spatial_downsample: int = DEFAULTS["model"]["spatial_downsample"]
    encoder_channels: tuple[int, int] = tuple(DEFAULTS["model"]["encoder_channels"])

    def __post_init__(self) -> None:
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.validate()

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigurationError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.kernel_t < 3 or self.kernel_t % 2 == 0:
            raise ConfigurationError(f"kernel_t must be odd and >= 3, got {self.kernel_t}")
        if self.temporal_window < 2:
            raise ConfigurationError(f"temporal_window must be >= 2, got {self.temporal_window}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_size < 1:
            raise ConfigurationError(f"feature_size must be >= 1, got {self.feature_size}")
        if self.spatial_downsample not in (1, 2, 4):
            raise ConfigurationError(f"spatial_downsample must be 1, 2 or 4, got {self.spatial_downsample}")
        if len(self.encoder_channels) != 2 or min(self.encoder_channels) < 1:
            raise ConfigurationError(f"encoder_channels must be two positive ints, got {self.encoder_channels}")

    @property
    def center(self) -> int:
        return self.temporal_window // 2

    def dilation(self, i: int) -> int:
        return 2**i

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DecoderConfig":
        return cls(**_checked(d, cls, "model"))


@dataclass
class TrainConfig:
    data: str = ""
    out: str = ""
    epochs: int = DEFAULTS["train"]["epochs"]
    samples_per_epoch: int = DEFAULTS["train"]["samples_per_epoch"]
    batch_size: int = DEFAULTS["train"]["batch_size"]
    max_lr: float = DEFAULTS["train"]["max_lr"]
    seed: int = DEFAULTS["train"]["seed"]
    hflip_p: float = DEFAULTS["train"]["hflip_p"]
    freeze_encoder: bool = DEFAULTS["train"]["freeze_encoder"]
    encoder_init: str | None = DEFAULTS["train"]["encoder_init"]
    val_windows_per_sequence: int = DEFAULTS["train"]["val_windows_per_sequence"]
    model: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self) -> None:
        if isinstance(self.model, dict):
            self.model = DecoderConfig.from_dict(self.model)
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.samples_per_epoch < 1:
            raise ConfigurationError(f"samples_per_epoch must be >= 1, got {self.samples_per_epoch}")
        if not self.max_lr > 0:
            raise ConfigurationError(f"max_lr must be positive, got {self.max_lr}")
        if not 0.0 <= self.hflip_p <= 1.0:
            raise ConfigurationError(f"hflip_p must lie in [0, 1], got {self.hflip_p}")

    @property
    def steps_per_epoch(self) -> int:
        return -(-self.samples_per_epoch // self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(_checked(d, cls, "train"))
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = DecoderConfig.from_dict(d["model"])
        return cls(**d)


def _checked(d: dict[str, Any], cls, section: str) -> dict[str, Any]:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigurationError(f"unknown {section} config keys: {unknown}")
    return d


def default_run_config() -> dict[str, dict[str, Any]]:
    return copy.deepcopy(DEFAULTS)


def load_run_config(path: str | Path | None, overrides: dict[str, dict[str, Any]] | None = None) -> dict[str, dict[str, Any]]:
    """Merge defaults, an optional JSON file and flag overrides (``None`` values are ignored).

    Unknown sections or keys raise :class:`ConfigurationError`.
    """
    cfg = default_run_config()
    layers: list[dict[str, dict[str, Any]]] = []
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                layers.append(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if overrides:
        layers.append({s: {k: v for k, v in kv.items() if v is not None} for s, kv in overrides.items()})
    for layer in layers:
        if not isinstance(layer, dict):
            raise ConfigurationError("run config must be a JSON object of sections")
        for section, values in layer.items():
            if section not in cfg:
                raise ConfigurationError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigurationError(f"config section {section!r} must be an object")
            unknown = sorted(set(values) - set(cfg[section]))
            if unknown:
                raise ConfigurationError(f"unknown {section} config keys: {unknown}")
            cfg[section].update(values)
    return cfg


def write_effective_config(cfg: dict[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
