"""Model construction: scratch CNN, pretrained backbones, freeze regimes.

Four architectures share one classifier head shape
(Linear(feat_dim, 512) -> ReLU -> Dropout(0.5) -> Linear(512, 2)) and one
parameter-group vocabulary: "backbone" is everything before the head,
"head" is the replacement classifier. Three regimes control what trains:

- SCRATCH: every parameter trainable, single learning rate (custom CNN only),
- FROZEN: backbone fixed, only the head trains,
- FINETUNE: the last two top-level backbone stages train at backbone_lr,
  the head at head_lr.

Pretrained weights are read from the local torchvision cache; there is no
silent fallback to random initialization. ``PNEUMOXRAY_WEIGHTS_DIR`` (or
``TORCH_HOME``) points the cache somewhere else.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Union

import torch
from torch import nn
from torchvision import models as tv_models

from .errors import ModelBuildError, WeightsUnavailableError

logger = logging.getLogger(__name__)

WEIGHTS_DIR_ENV = "PNEUMOXRAY_WEIGHTS_DIR"


class ArchitectureId(str, Enum):
    CUSTOM_CNN = "custom_cnn"
    RESNET50 = "resnet50"
    DENSENET121 = "densenet121"
    EFFICIENTNET_B0 = "efficientnet_b0"


TRANSFER_ARCHS = (
    ArchitectureId.RESNET50,
    ArchitectureId.DENSENET121,
    ArchitectureId.EFFICIENTNET_B0,
)


class Regime(str, Enum):
    SCRATCH = "scratch"
    FROZEN = "frozen"
    FINETUNE = "finetune"


@dataclass(frozen=True)
class RegimeConfig:
    """Freeze plan plus per-group learning rates.

    backbone_lr only matters under FINETUNE; FROZEN contributes no backbone
    group to the optimizer and SCRATCH trains everything at head_lr.
    """

    regime: Regime
    backbone_lr: float = 1e-4
    head_lr: float = 1e-3
    unfrozen_blocks: int = 2

    def __post_init__(self) -> None:
        if self.backbone_lr <= 0 or self.head_lr <= 0:
            raise ModelBuildError(
                f"learning rates must be positive: "
                f"backbone_lr={self.backbone_lr}, head_lr={self.head_lr}"
            )
        if self.regime is Regime.FINETUNE:
            if self.backbone_lr >= self.head_lr:
                raise ModelBuildError(
                    "fine-tuning requires backbone_lr < head_lr, got "
                    f"{self.backbone_lr} >= {self.head_lr}"
                )
            if self.unfrozen_blocks < 1:
                raise ModelBuildError(
                    f"unfrozen_blocks must be >= 1: {self.unfrozen_blocks}"
                )


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild a network compatible with a checkpoint."""

    arch: ArchitectureId
    regime: RegimeConfig
    num_classes: int = 2
    dropout: float = 0.5
    head_hidden: int = 512
    input_size: int = 224

    def __post_init__(self) -> None:
        if self.num_classes != 2:
            raise ModelBuildError(f"binary task requires num_classes=2: {self.num_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelBuildError(f"dropout must lie in [0, 1): {self.dropout}")
        if self.head_hidden <= 0 or self.input_size <= 0:
            raise ModelBuildError("head_hidden and input_size must be positive")

    def to_json(self) -> dict:
        return {
            "arch": self.arch.value,
            "regime": {
                "regime": self.regime.regime.value,
                "backbone_lr": self.regime.backbone_lr,
                "head_lr": self.regime.head_lr,
                "unfrozen_blocks": self.regime.unfrozen_blocks,
            },
            "num_classes": self.num_classes,
            "dropout": self.dropout,
            "head_hidden": self.head_hidden,
            "input_size": self.input_size,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ModelSpec":
        regime = data["regime"]
        try:
            return cls(
                arch=ArchitectureId(data["arch"]),
                regime=RegimeConfig(
                    regime=Regime(regime["regime"]),
                    backbone_lr=regime["backbone_lr"],
                    head_lr=regime["head_lr"],
                    unfrozen_blocks=regime["unfrozen_blocks"],
                ),
                num_classes=data["num_classes"],
                dropout=data["dropout"],
                head_hidden=data["head_hidden"],
                input_size=data["input_size"],
            )
        except (KeyError, ValueError) as exc:
            raise ModelBuildError(f"invalid model description: {exc}") from exc

    def spec_hash(self) -> str:
        canon = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ParamGroup:
    """Accounting view of one named slice of the parameter partition."""

    name: str
    parameter_count: int
    trainable_parameter_count: int
    trainable: bool
    learning_rate: Optional[float]


@dataclass(frozen=True)
class ParamCounts:
    total: int
    trainable: int
    by_group: tuple[ParamGroup, ...]


# Last-to-first top-level backbone stages per architecture, as parameter-name
# prefixes. FINETUNE unfreezes the last `unfrozen_blocks` entries. DenseNet
# stages carry their trailing transition (and the final norm); the EfficientNet
# last stage includes the closing 1x1 conv.
_STAGE_PREFIXES: dict[ArchitectureId, list[tuple[str, ...]]] = {
    ArchitectureId.RESNET50: [
        ("layer1.",),
        ("layer2.",),
        ("layer3.",),
        ("layer4.",),
    ],
    ArchitectureId.DENSENET121: [
        ("features.denseblock1.", "features.transition1."),
        ("features.denseblock2.", "features.transition2."),
        ("features.denseblock3.", "features.transition3."),
        ("features.denseblock4.", "features.norm5."),
    ],
    ArchitectureId.EFFICIENTNET_B0: [
        ("features.1.",),
        ("features.2.",),
        ("features.3.",),
        ("features.4.",),
        ("features.5.",),
        ("features.6.",),
        ("features.7.", "features.8."),
    ],
}

_HEAD_ATTR: dict[ArchitectureId, str] = {
    ArchitectureId.CUSTOM_CNN: "classifier",
    ArchitectureId.RESNET50: "fc",
    ArchitectureId.DENSENET121: "classifier",
    ArchitectureId.EFFICIENTNET_B0: "classifier",
}

_GRADCAM_LAYER: dict[ArchitectureId, str] = {
    ArchitectureId.CUSTOM_CNN: "features.block4.conv",
    ArchitectureId.RESNET50: "layer4",
    ArchitectureId.DENSENET121: "features",
    ArchitectureId.EFFICIENTNET_B0: "features",
}


class ModelHandle:
    """A built network plus its parameter-group and Grad-CAM bookkeeping."""

    def __init__(self, spec: ModelSpec, module: nn.Module) -> None:
        self.spec = spec
        self.module = module
        self.head_attr = _HEAD_ATTR[spec.arch]
        self.gradcam_layer = _GRADCAM_LAYER[spec.arch]
        try:
            module.get_submodule(self.gradcam_layer)
        except AttributeError as exc:
            raise ModelBuildError(
                f"no capture layer {self.gradcam_layer!r} in {spec.arch.value}"
            ) from exc

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        return self.module(batch)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.module(batch)

    def train(self) -> "ModelHandle":
        self.module.train()
        return self

    def eval(self) -> "ModelHandle":
        self.module.eval()
        return self

    def to(self, device: Union[str, torch.device]) -> "ModelHandle":
        self.module.to(device)
        return self

    def capture_module(self) -> nn.Module:
        return self.module.get_submodule(self.gradcam_layer)

    def _is_head(self, param_name: str) -> bool:
        return param_name.startswith(self.head_attr + ".")

    def named_backbone_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        for name, param in self.module.named_parameters():
            if not self._is_head(name):
                yield name, param

    def named_head_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        for name, param in self.module.named_parameters():
            if self._is_head(name):
                yield name, param

    def optimizer_groups(self) -> list[dict]:
        """Parameter groups for the optimizer, trainable parameters only.

        SCRATCH yields one group ("all"), FROZEN one ("head"), FINETUNE two
        ("backbone", "head") at their differential rates. Group names ride
        along in the dicts, torch keeps unknown keys.
        """
        regime = self.spec.regime
        if regime.regime is Regime.SCRATCH:
            params = [p for p in self.module.parameters() if p.requires_grad]
            return [{"name": "all", "params": params, "lr": regime.head_lr}]
        head = [p for _, p in self.named_head_parameters() if p.requires_grad]
        if regime.regime is Regime.FROZEN:
            return [{"name": "head", "params": head, "lr": regime.head_lr}]
        backbone = [p for _, p in self.named_backbone_parameters() if p.requires_grad]
        return [
            {"name": "backbone", "params": backbone, "lr": regime.backbone_lr},
            {"name": "head", "params": head, "lr": regime.head_lr},
        ]


def _make_head(feat_dim: int, spec: ModelSpec) -> nn.Sequential:
    return nn.Sequential(
        OrderedDict(
            [
                ("fc1", nn.Linear(feat_dim, spec.head_hidden)),
                ("relu", nn.ReLU()),
                ("dropout", nn.Dropout(spec.dropout)),
                ("fc2", nn.Linear(spec.head_hidden, spec.num_classes)),
            ]
        )
    )


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        OrderedDict(
            [
                ("conv", nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)),
                ("relu", nn.ReLU()),
                ("pool", nn.MaxPool2d(kernel_size=2)),
            ]
        )
    )


class CustomCnn(nn.Module):
    """Four conv blocks (3->32->64->128->256, each halving the grid) and a
    two-layer classifier with dropout. At 224 input the flatten width is
    256 * 14 * 14 = 50,176."""

    def __init__(self, spec: ModelSpec) -> None:
        super().__init__()
        channels = (32, 64, 128, 256)
        blocks = []
        in_ch = 3
        for i, out_ch in enumerate(channels, start=1):
            blocks.append((f"block{i}", _conv_block(in_ch, out_ch)))
            in_ch = out_ch
        self.features = nn.Sequential(OrderedDict(blocks))
        grid = spec.input_size // 2 ** len(channels)
        flat = channels[-1] * grid * grid
        self.classifier = nn.Sequential(
            OrderedDict(
                [
                    ("flatten", nn.Flatten()),
                    ("fc1", nn.Linear(flat, spec.head_hidden)),
                    ("relu", nn.ReLU()),
                    ("dropout", nn.Dropout(spec.dropout)),
                    ("fc2", nn.Linear(spec.head_hidden, spec.num_classes)),
                ]
            )
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))


def build_custom_cnn(spec: ModelSpec) -> ModelHandle:
    if spec.arch is not ArchitectureId.CUSTOM_CNN:
        raise ModelBuildError(f"build_custom_cnn got arch {spec.arch.value}")
    if spec.regime.regime is not Regime.SCRATCH:
        raise ModelBuildError(
            f"the scratch CNN has no pretrained backbone; regime "
            f"{spec.regime.regime.value} is not applicable"
        )
    if spec.input_size % 16 != 0:
        raise ModelBuildError(
            f"input_size must be divisible by 16 (four 2x2 pools): {spec.input_size}"
        )
    return ModelHandle(spec, CustomCnn(spec))


def _weights_hint(arch: ArchitectureId, url: str) -> str:
    cache = Path(torch.hub.get_dir()) / "checkpoints"
    return (
        f"pretrained weights for {arch.value} not found in the local cache. "
        f"Download {url} into {cache} (or set {WEIGHTS_DIR_ENV} to a directory "
        f"that contains hub/checkpoints/), or build with weights='random'."
    )


def _load_backbone(arch: ArchitectureId, weights: str) -> nn.Module:
    ctor, weight_enum = {
        ArchitectureId.RESNET50: (tv_models.resnet50, tv_models.ResNet50_Weights.DEFAULT),
        ArchitectureId.DENSENET121: (tv_models.densenet121, tv_models.DenseNet121_Weights.DEFAULT),
        ArchitectureId.EFFICIENTNET_B0: (tv_models.efficientnet_b0, tv_models.EfficientNet_B0_Weights.DEFAULT),
    }[arch]
    if weights == "random":
        return ctor(weights=None)
    if weights != "pretrained":
        raise ModelBuildError(f"weights must be 'pretrained' or 'random': {weights!r}")
    override = os.environ.get(WEIGHTS_DIR_ENV)
    if override:
        torch.hub.set_dir(override if override.endswith("hub") else str(Path(override) / "hub"))
    try:
        return ctor(weights=weight_enum)
    except Exception as exc:
        raise WeightsUnavailableError(_weights_hint(arch, weight_enum.url)) from exc


def build_transfer_model(spec: ModelSpec, weights: str = "pretrained") -> ModelHandle:
    """Backbone from torchvision, head replaced, regime freeze map applied."""
    if spec.arch not in TRANSFER_ARCHS:
        raise ModelBuildError(f"unknown transfer architecture: {spec.arch.value}")
    if spec.regime.regime is Regime.SCRATCH:
        raise ModelBuildError(
            "transfer models build under FROZEN or FINETUNE; use the custom "
            "CNN for scratch training"
        )
    if spec.input_size != 224:
        raise ModelBuildError(
            f"pretrained backbones expect input_size 224: {spec.input_size}"
        )

    module = _load_backbone(spec.arch, weights)
    head_attr = _HEAD_ATTR[spec.arch]
    original_head = getattr(module, head_attr)
    if isinstance(original_head, nn.Linear):
        feat_dim = original_head.in_features
    else:
        feat_dim = [m for m in original_head.modules() if isinstance(m, nn.Linear)][0].in_features
    setattr(module, head_attr, _make_head(feat_dim, spec))

    handle = ModelHandle(spec, module)
    _apply_regime(handle)
    return handle


def _apply_regime(handle: ModelHandle) -> None:
    regime = handle.spec.regime
    if regime.regime is Regime.SCRATCH:
        return
    for _, param in handle.named_backbone_parameters():
        param.requires_grad_(False)
    for _, param in handle.named_head_parameters():
        param.requires_grad_(True)
    if regime.regime is Regime.FINETUNE:
        stages = _STAGE_PREFIXES[handle.spec.arch]
        n = min(regime.unfrozen_blocks, len(stages))
        prefixes = tuple(p for stage in stages[len(stages) - n :] for p in stage)
        unfrozen = 0
        for name, param in handle.named_backbone_parameters():
            if name.startswith(prefixes):
                param.requires_grad_(True)
                unfrozen += 1
        if unfrozen == 0:
            raise ModelBuildError(
                f"fine-tune stage prefixes matched no parameters for "
                f"{handle.spec.arch.value}"
            )


def build_model(spec: ModelSpec, weights: str = "pretrained") -> ModelHandle:
    """Dispatch on architecture; `weights` is ignored for the scratch CNN."""
    if spec.arch is ArchitectureId.CUSTOM_CNN:
        return build_custom_cnn(spec)
    return build_transfer_model(spec, weights=weights)


def count_parameters(handle: ModelHandle) -> ParamCounts:
    """Backbone/head partition with totals; learning rate reflects the regime."""
    regime = handle.spec.regime

    def group(name: str, params: list[nn.Parameter], lr: Optional[float]) -> ParamGroup:
        total = sum(p.numel() for p in params)
        trainable = sum(p.numel() for p in params if p.requires_grad)
        return ParamGroup(
            name=name,
            parameter_count=total,
            trainable_parameter_count=trainable,
            trainable=trainable > 0,
            learning_rate=lr if trainable > 0 else None,
        )

    backbone_params = [p for _, p in handle.named_backbone_parameters()]
    head_params = [p for _, p in handle.named_head_parameters()]
    backbone_lr = {
        Regime.SCRATCH: regime.head_lr,
        Regime.FROZEN: None,
        Regime.FINETUNE: regime.backbone_lr,
    }[regime.regime]
    groups = (
        group("backbone", backbone_params, backbone_lr),
        group("head", head_params, regime.head_lr),
    )
    total = sum(g.parameter_count for g in groups)
    trainable = sum(g.trainable_parameter_count for g in groups)
    return ParamCounts(total=total, trainable=trainable, by_group=groups)


# ---------------------------------------------------------------------------
# Checkpoints: a torch state_dict archive plus a JSON descriptor.
# ---------------------------------------------------------------------------

def checkpoint_descriptor_path(ckpt_path: Union[str, Path]) -> Path:
    return Path(ckpt_path).with_suffix(".json")


def save_checkpoint(handle: ModelHandle, ckpt_path: Union[str, Path]) -> None:
    ckpt_path = Path(ckpt_path)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(handle.module.state_dict(), ckpt_path)
    descriptor = {
        "arch": handle.spec.arch.value,
        "regime": handle.spec.regime.regime.value,
        "spec_hash": handle.spec.spec_hash(),
    }
    with open(checkpoint_descriptor_path(ckpt_path), "w") as fh:
        json.dump(descriptor, fh, indent=2)
        fh.write("\n")


def load_checkpoint(handle: ModelHandle, ckpt_path: Union[str, Path]) -> ModelHandle:
    """Restore weights; the descriptor must match the handle's spec hash."""
    ckpt_path = Path(ckpt_path)
    if not ckpt_path.is_file():
        raise ModelBuildError(f"checkpoint not found: {ckpt_path}")
    desc_path = checkpoint_descriptor_path(ckpt_path)
    if desc_path.is_file():
        with open(desc_path) as fh:
            descriptor = json.load(fh)
        expected = handle.spec.spec_hash()
        if descriptor.get("spec_hash") != expected:
            raise ModelBuildError(
                f"checkpoint {ckpt_path} was written for spec "
                f"{descriptor.get('spec_hash')} (arch {descriptor.get('arch')}, "
                f"regime {descriptor.get('regime')}), not {expected}"
            )
    else:
        logger.warning("checkpoint descriptor missing for %s", ckpt_path)
    state = torch.load(ckpt_path, map_location="cpu")
    handle.module.load_state_dict(state)
    return handle
