"""Run configuration: one strict JSON document drives every command.

Validation is deliberately unforgiving: unknown keys are rejected at every
nesting level, enum tokens must match exactly, and type errors name the
offending key. Silent defaults for misspelled keys have no place in a tool
whose output feeds clinical-style tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .data import DEFAULT_RATIOS, DEFAULT_SEED, AugmentPolicy, PreprocessConfig
from .errors import ConfigError, PneumoXrayError
from .models import (
    TRANSFER_ARCHS,
    ArchitectureId,
    ModelSpec,
    Regime,
    RegimeConfig,
)
from .training import TrainConfig

DEFAULT_MODELS = (
    "custom_cnn:scratch",
    "resnet50:frozen",
    "resnet50:finetune",
    "densenet121:frozen",
    "densenet121:finetune",
    "efficientnet_b0:frozen",
    "efficientnet_b0:finetune",
)
DEFAULT_BACKBONE_LR = 1e-4
DEFAULT_HEAD_LR = 1e-3


def parse_model_token(token: str) -> tuple[ArchitectureId, Regime]:
    """Parse 'arch:regime' (e.g. resnet50:finetune) into enum pairs."""
    parts = token.split(":")
    if len(parts) != 2:
        raise ConfigError(f"model token must be 'arch:regime': {token!r}")
    arch_token, regime_token = parts
    try:
        arch = ArchitectureId(arch_token)
    except ValueError:
        valid = ", ".join(a.value for a in ArchitectureId)
        raise ConfigError(f"unknown architecture {arch_token!r}; expected one of: {valid}")
    try:
        regime = Regime(regime_token)
    except ValueError:
        valid = ", ".join(r.value for r in Regime)
        raise ConfigError(f"unknown regime {regime_token!r}; expected one of: {valid}")
    if arch is ArchitectureId.CUSTOM_CNN and regime is not Regime.SCRATCH:
        raise ConfigError(f"{arch.value} only trains from scratch, got {regime.value}")
    if arch in TRANSFER_ARCHS and regime is Regime.SCRATCH:
        raise ConfigError(
            f"{arch.value} is a pretrained backbone; use frozen or finetune"
        )
    return arch, regime


@dataclass(frozen=True)
class RunConfig:
    """Validated experiment configuration."""

    dataset_root: Optional[Path]
    outputs: Path
    weights: str
    split_ratios: tuple[float, float, float]
    split_seed: int
    models: tuple[tuple[ArchitectureId, Regime], ...]
    train: TrainConfig
    preprocess: PreprocessConfig
    augment: AugmentPolicy
    backbone_lr: float
    head_lr: float

    def model_spec(self, arch: ArchitectureId, regime: Regime) -> ModelSpec:
        return ModelSpec(
            arch=arch,
            regime=RegimeConfig(
                regime=regime,
                backbone_lr=self.backbone_lr,
                head_lr=self.head_lr,
            ),
            input_size=self.preprocess.target_size,
        )

    def manifest_path(self) -> Path:
        return self.outputs / "manifest.csv"

    def runs_dir(self) -> Path:
        return self.outputs / "runs"


def _require(data: dict, key: str, kind: type, where: str) -> Any:
    if key not in data:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return _typed(data, key, kind, where)


def _typed(data: dict, key: str, kind: type, where: str) -> Any:
    value = data[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(
            f"key {key!r} in {where} must be {kind.__name__}, "
            f"got {type(value).__name__}"
        )
    return value


def _reject_unknown(data: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) {unknown} in {where}; allowed: {sorted(allowed)}"
        )


def _parse_splits(data: dict) -> tuple[tuple[float, float, float], int]:
    _reject_unknown(data, {"ratios", "seed"}, "splits")
    ratios = DEFAULT_RATIOS
    seed = DEFAULT_SEED
    if "ratios" in data:
        raw = _typed(data, "ratios", list, "splits")
        if len(raw) != 3 or not all(isinstance(r, (int, float)) for r in raw):
            raise ConfigError(f"splits.ratios must be 3 numbers: {raw}")
        ratios = tuple(float(r) for r in raw)
    if "seed" in data:
        seed = _typed(data, "seed", int, "splits")
    return ratios, seed


def _parse_section(data: dict, cls: type, where: str, defaults: dict) -> Any:
    allowed = set(defaults)
    _reject_unknown(data, allowed, where)
    kwargs = dict(defaults)
    for key, value in data.items():
        expected = defaults[key]
        if isinstance(expected, bool):
            kwargs[key] = _typed(data, key, bool, where)
        elif isinstance(expected, int):
            kwargs[key] = _typed(data, key, int, where)
        elif isinstance(expected, float):
            kwargs[key] = _typed(data, key, float, where)
        elif isinstance(expected, tuple):
            raw = _typed(data, key, list, where)
            kwargs[key] = tuple(raw)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except PneumoXrayError as exc:
        raise ConfigError(f"invalid {where} section: {exc}") from exc


_TRAIN_DEFAULTS = {
    "batch_size": 32,
    "max_epochs": 50,
    "adam_betas": (0.9, 0.999),
    "adam_eps": 1e-8,
    "plateau_patience": 5,
    "plateau_factor": 0.5,
    "min_lr": 1e-7,
    "early_stop_patience": 10,
    "seed": 42,
    "num_workers": 0,
}

_PREPROCESS_DEFAULTS = {
    "target_size": 224,
    "channel_means": PreprocessConfig().channel_means,
    "channel_stds": PreprocessConfig().channel_stds,
}

_AUGMENT_DEFAULTS = {
    "hflip_prob": 0.5,
    "max_rotation_deg": 10.0,
    "max_translate_frac": 0.1,
    "scale_range": (0.9, 1.1),
    "jitter_frac": 0.2,
}

_TOP_LEVEL_KEYS = {
    "dataset_root",
    "outputs",
    "weights",
    "splits",
    "models",
    "train",
    "preprocess",
    "augment",
    "lrs",
}


def parse_run_config(data: dict, base_dir: Optional[Path] = None) -> RunConfig:
    """Validate a config dict; relative paths resolve against base_dir."""
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be an object, got {type(data).__name__}")
    _reject_unknown(data, _TOP_LEVEL_KEYS, "config")

    def resolve(p: str) -> Path:
        path = Path(p)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return path

    dataset_root = None
    if "dataset_root" in data:
        dataset_root = resolve(_typed(data, "dataset_root", str, "config"))
    outputs = resolve(_typed(data, "outputs", str, "config")) if "outputs" in data else Path("outputs")

    weights = "pretrained"
    if "weights" in data:
        weights = _typed(data, "weights", str, "config")
        if weights not in ("pretrained", "random"):
            raise ConfigError(f"weights must be 'pretrained' or 'random': {weights!r}")

    ratios, seed = _parse_splits(_typed(data, "splits", dict, "config")) if "splits" in data else (DEFAULT_RATIOS, DEFAULT_SEED)

    tokens = list(DEFAULT_MODELS)
    if "models" in data:
        raw = _typed(data, "models", list, "config")
        if not raw or not all(isinstance(t, str) for t in raw):
            raise ConfigError("models must be a non-empty list of 'arch:regime' strings")
        tokens = raw
    models = tuple(parse_model_token(t) for t in tokens)
    if len(set(models)) != len(models):
        raise ConfigError("models list contains duplicates")

    train = _parse_section(
        _typed(data, "train", dict, "config") if "train" in data else {},
        TrainConfig, "train", _TRAIN_DEFAULTS,
    )
    preprocess = _parse_section(
        _typed(data, "preprocess", dict, "config") if "preprocess" in data else {},
        PreprocessConfig, "preprocess", _PREPROCESS_DEFAULTS,
    )
    augment = _parse_section(
        _typed(data, "augment", dict, "config") if "augment" in data else {},
        AugmentPolicy, "augment", _AUGMENT_DEFAULTS,
    )

    backbone_lr = DEFAULT_BACKBONE_LR
    head_lr = DEFAULT_HEAD_LR
    if "lrs" in data:
        lrs = _typed(data, "lrs", dict, "config")
        _reject_unknown(lrs, {"backbone", "head"}, "lrs")
        if "backbone" in lrs:
            backbone_lr = _typed(lrs, "backbone", float, "lrs")
        if "head" in lrs:
            head_lr = _typed(lrs, "head", float, "lrs")

    return RunConfig(
        dataset_root=dataset_root,
        outputs=outputs,
        weights=weights,
        split_ratios=ratios,
        split_seed=seed,
        models=models,
        train=train,
        preprocess=preprocess,
        augment=augment,
        backbone_lr=backbone_lr,
        head_lr=head_lr,
    )


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(data, base_dir=path.parent)


def default_run_config() -> RunConfig:
    return parse_run_config({})


def config_schema() -> dict:
    """Machine-readable description of every accepted key."""
    return {
        "dataset_root": "str path to <root>/<CLASS>/*.jpeg image tree",
        "outputs": "str output directory (default 'outputs')",
        "weights": "one of: pretrained, random (default pretrained)",
        "splits": {"ratios": "list of 3 fractions summing to 1", "seed": "int"},
        "models": [f"'arch:regime' from {[a.value for a in ArchitectureId]} x {[r.value for r in Regime]}"],
        "train": {k: type(v).__name__ for k, v in _TRAIN_DEFAULTS.items()},
        "preprocess": {k: type(v).__name__ for k, v in _PREPROCESS_DEFAULTS.items()},
        "augment": {k: type(v).__name__ for k, v in _AUGMENT_DEFAULTS.items()},
        "lrs": {"backbone": "float (default 1e-4)", "head": "float (default 1e-3)"},
    }
