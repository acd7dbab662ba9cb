"""Grad-CAM heatmaps and TP/TN/FP/FN case panels.

The capture hook records the target layer's activations and the gradient of
one class logit with respect to them in a single forward/backward pass. The
input tensor (not the weights) carries requires_grad so gradients reach the
activation maps even when every model parameter is frozen. Activations are
cloned inside the hook because some backbones apply in-place ops to the same
tensor right after the hooked layer.

Heatmap math: channel weights are the spatial means of the gradient maps,
the raw map is ReLU of the weighted activation sum, and normalization divides
by the maximum. An identically zero raw map stays all-zero instead of
dividing by zero.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import matplotlib
import numpy as np
import torch
from PIL import Image

from .data import PreprocessConfig, load_image, standardize, to_unit_tensor
from .errors import EvaluationError
from .metrics import PredictionSet
from .models import ModelHandle

logger = logging.getLogger(__name__)

OVERLAY_ALPHA = 0.4
PANEL_SIZE = 4
_COLORMAP = "jet"


class Category(str, Enum):
    TP = "TP"
    TN = "TN"
    FP = "FP"
    FN = "FN"


def categorize(y_true: int, y_pred: int) -> Category:
    if y_true == 1:
        return Category.TP if y_pred == 1 else Category.FN
    return Category.FP if y_pred == 1 else Category.TN


@dataclass(frozen=True)
class ActivationBundle:
    """Target-layer activations and class-score gradients from one pass."""

    activations: torch.Tensor
    gradients: torch.Tensor
    class_index: int

    def __post_init__(self) -> None:
        if self.activations.dim() != 3:
            raise EvaluationError(
                f"expected (K, H, W) activations, got {tuple(self.activations.shape)}"
            )
        if self.activations.shape != self.gradients.shape:
            raise EvaluationError(
                f"activation shape {tuple(self.activations.shape)} does not match "
                f"gradient shape {tuple(self.gradients.shape)}"
            )


@dataclass(frozen=True)
class Heatmap:
    """Localization map in [0, 1]; max is 1 unless the map is all-zero."""

    values: torch.Tensor
    source_id: str = ""
    category: Optional[Category] = None

    def __post_init__(self) -> None:
        if self.values.dim() != 2:
            raise EvaluationError(
                f"expected a (H, W) heatmap, got {tuple(self.values.shape)}"
            )
        lo = float(self.values.min()) if self.values.numel() else 0.0
        hi = float(self.values.max()) if self.values.numel() else 0.0
        if lo < 0.0 or hi > 1.0:
            raise EvaluationError(f"heatmap values outside [0, 1]: min={lo}, max={hi}")


def gradcam(bundle: ActivationBundle) -> Heatmap:
    """Weighted activation sum, rectified, normalized to max 1."""
    weights = bundle.gradients.mean(dim=(1, 2))
    raw = torch.relu((weights[:, None, None] * bundle.activations).sum(dim=0))
    peak = raw.max()
    values = raw / peak if peak > 0 else raw
    return Heatmap(values=values)


def capture(
    handle: ModelHandle,
    image: torch.Tensor,
    class_override: Optional[int] = None,
) -> ActivationBundle:
    """One forward/backward pass recording the capture layer's state.

    The class is the argmax logit unless overridden. The model is forced into
    eval mode for the pass (and restored), its parameter gradients are
    cleared afterwards, and its weights are untouched.
    """
    if image.dim() == 3:
        batch = image.unsqueeze(0)
    elif image.dim() == 4 and image.shape[0] == 1:
        batch = image
    else:
        raise EvaluationError(
            f"capture expects one image (3, H, W), got {tuple(image.shape)}"
        )

    target = handle.capture_module()
    storage: dict[str, torch.Tensor] = {}

    def forward_hook(_module, _inputs, output):
        storage["activations"] = output.detach().clone()
        output.register_hook(
            lambda grad: storage.__setitem__("gradients", grad.detach().clone())
        )

    was_training = handle.module.training
    handle.eval()
    hook = target.register_forward_hook(forward_hook)
    try:
        # gradient flows to the conv maps via the input even when every
        # parameter is frozen
        batch = batch.detach().clone().requires_grad_(True)
        logits = handle(batch)
        if logits.dim() != 2 or logits.shape[0] != 1:
            raise EvaluationError(f"unexpected logits shape {tuple(logits.shape)}")
        if class_override is None:
            class_index = int(logits.argmax(dim=1).item())
        else:
            class_index = int(class_override)
            if not 0 <= class_index < logits.shape[1]:
                raise EvaluationError(
                    f"class_override {class_index} out of range for "
                    f"{logits.shape[1]} classes"
                )
        logits[0, class_index].backward()
    finally:
        hook.remove()
        handle.module.zero_grad(set_to_none=True)
        if was_training:
            handle.module.train()

    if "activations" not in storage:
        raise EvaluationError(
            f"capture layer {handle.gradcam_layer!r} produced no activations"
        )
    if "gradients" not in storage:
        raise EvaluationError(
            f"no gradient reached capture layer {handle.gradcam_layer!r}"
        )
    return ActivationBundle(
        activations=storage["activations"][0],
        gradients=storage["gradients"][0],
        class_index=class_index,
    )


def upsample_heatmap(heatmap: Heatmap, size: tuple[int, int]) -> Heatmap:
    """Bilinear upsample, then renormalize so a non-zero map peaks at 1 again."""
    values = heatmap.values[None, None]
    up = torch.nn.functional.interpolate(
        values, size=size, mode="bilinear", align_corners=False
    )[0, 0]
    peak = up.max()
    if peak > 0:
        up = up / peak
    up = up.clamp(0.0, 1.0)
    return replace(heatmap, values=up)


def overlay(
    heatmap: Heatmap, original: torch.Tensor, alpha: float = OVERLAY_ALPHA
) -> np.ndarray:
    """Blend the color-mapped heatmap onto the grayscale original.

    original is a (3, H, W) unit-range tensor. Per pixel the blend weight is
    alpha * heat, so an all-zero heatmap reproduces the grayscale original
    exactly. Returns (H, W, 3) uint8.
    """
    if original.dim() != 3 or original.shape[0] != 3:
        raise EvaluationError(
            f"expected a (3, H, W) original, got {tuple(original.shape)}"
        )
    if heatmap.values.shape != original.shape[1:]:
        raise EvaluationError(
            f"heatmap {tuple(heatmap.values.shape)} does not match image "
            f"{tuple(original.shape[1:])}; upsample first"
        )
    heat = heatmap.values.numpy().astype(np.float64)
    rgb = original.numpy().astype(np.float64)
    gray = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    gray_rgb = np.repeat(gray[..., None], 3, axis=2)
    colored = matplotlib.colormaps[_COLORMAP](heat)[..., :3]
    weight = (alpha * heat)[..., None]
    blended = (1.0 - weight) * gray_rgb + weight * colored
    return np.clip(np.rint(blended * 255.0), 0, 255).astype(np.uint8)


def select_case_panel(
    preds: PredictionSet, per_category: int = PANEL_SIZE
) -> dict[Category, list[str]]:
    """Up to `per_category` ids per outcome category.

    Ordered by descending confidence in the predicted class (for FP/FN that
    is confidence in the wrong class), ties broken by record id.
    """
    buckets: dict[Category, list[tuple[float, str]]] = {c: [] for c in Category}
    for rec_id, t, prob, pred in zip(preds.ids, preds.y_true, preds.y_prob, preds.y_pred):
        confidence = prob if pred == 1 else 1.0 - prob
        buckets[categorize(t, pred)].append((confidence, rec_id))
    panel: dict[Category, list[str]] = {}
    for category, items in buckets.items():
        items.sort(key=lambda item: (-item[0], item[1]))
        panel[category] = [rec_id for _, rec_id in items[:per_category]]
    return panel


def _safe_name(record_id: str) -> str:
    return record_id.replace("/", "__")


def render_case_panels(
    handle: ModelHandle,
    preds: PredictionSet,
    data_root: Union[str, Path],
    out_dir: Union[str, Path],
    preprocess: Optional[PreprocessConfig] = None,
    per_category: int = PANEL_SIZE,
    alpha: float = OVERLAY_ALPHA,
) -> dict:
    """Write overlay PNGs per category plus a panel.json index.

    Output tree: <out_dir>/<CATEGORY>/<id>.png with ids made path-safe; the
    JSON lists every rendered case with its confidence and file.
    """
    data_root = Path(data_root)
    out_dir = Path(out_dir)
    cfg = preprocess or PreprocessConfig()
    panel = select_case_panel(preds, per_category)
    by_id = {
        rec_id: (t, prob, pred)
        for rec_id, t, prob, pred in zip(
            preds.ids, preds.y_true, preds.y_prob, preds.y_pred
        )
    }

    payload: dict = {
        "alpha": alpha,
        "per_category": per_category,
        "categories": {},
    }
    for category in Category:
        entries = []
        for rec_id in panel[category]:
            t, prob, pred = by_id[rec_id]
            raw = load_image(data_root / rec_id, source=rec_id)
            unit = to_unit_tensor(raw, cfg.target_size, source=rec_id)
            bundle = capture(handle, standardize(unit, cfg))
            heat = upsample_heatmap(
                gradcam(bundle), (cfg.target_size, cfg.target_size)
            )
            heat = replace(heat, source_id=rec_id, category=category)
            rendered = overlay(heat, unit, alpha=alpha)
            png_path = out_dir / category.value / f"{_safe_name(rec_id)}.png"
            png_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(rendered).save(png_path, format="PNG")
            entries.append(
                {
                    "id": rec_id,
                    "y_true": t,
                    "y_pred": pred,
                    "y_prob": prob,
                    "confidence": prob if pred == 1 else 1.0 - prob,
                    "png": str(png_path.relative_to(out_dir)),
                }
            )
        payload["categories"][category.value] = entries

    with open(out_dir / "panel.json", "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return payload
