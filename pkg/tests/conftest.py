"""Shared fixtures: synthetic image trees and prediction-set builders.

The synthetic dataset separates the two classes by mean brightness alone
(dark NORMAL, bright PNEUMONIA) so a linear model on raw pixels reaches
perfect training accuracy. That gives the training tests a convergence
oracle that does not depend on the real dataset.
"""

from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from pneumoxray import PredictionSet

NORMAL_MEAN = 0.12
PNEUMONIA_MEAN = 0.85


def write_gray_png(path: Path, mean: float, rng: np.random.Generator, size: int) -> None:
    noise = rng.normal(0.0, 0.02, size=(size, size))
    arr = np.clip(mean + noise, 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="L").save(path)


def make_image_tree(
    root: Path,
    per_class: int,
    size: int = 64,
    seed: int = 0,
    extension: str = "png",
) -> Path:
    rng = np.random.default_rng(seed)
    for label, mean in (("NORMAL", NORMAL_MEAN), ("PNEUMONIA", PNEUMONIA_MEAN)):
        class_dir = root / label
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            write_gray_png(
                class_dir / f"{label.lower()}_{i:03d}.{extension}", mean, rng, size
            )
    return root


@pytest.fixture
def tiny_root(tmp_path: Path) -> Path:
    """12 images (6 per class) at 48x48; enough for an 8/2/2 split per class...

    not quite: 6 per class splits 4/0/2 under the floor rule, so tests that
    need a non-empty VAL use twelve per class instead (see small_root).
    """
    return make_image_tree(tmp_path / "data", per_class=6, size=48, seed=11)


@pytest.fixture
def small_root(tmp_path: Path) -> Path:
    """24 images (12 per class) at 48x48; splits 9/1/2 per class."""
    return make_image_tree(tmp_path / "data", per_class=12, size=48, seed=12)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """40 images (20 per class) at 96x96, shared across the session."""
    base = tmp_path_factory.mktemp("toy_dataset")
    return make_image_tree(base / "data", per_class=20, size=96, seed=7)


def random_prediction_set(
    rng: np.random.Generator,
    n: int,
    quantize: int = 0,
    threshold: float = 0.5,
) -> PredictionSet:
    """Random labels and scores; quantize > 0 forces score ties."""
    y_true = rng.integers(0, 2, size=n)
    if y_true.min() == y_true.max():
        y_true[0] = 1 - y_true[0]
    probs = rng.random(n)
    if quantize:
        probs = np.round(probs * quantize) / quantize
    ids = [f"case_{i:05d}" for i in range(n)]
    return PredictionSet.from_probabilities(
        ids, [int(v) for v in y_true], [float(v) for v in probs], threshold=threshold
    )


def seeded_unit_image(seed: int, size: int = 48) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(3, size, size, generator=gen)
