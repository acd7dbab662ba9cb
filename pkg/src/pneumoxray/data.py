"""Dataset ingestion, stratified splitting, preprocessing and augmentation.

The dataset is a directory tree with one subdirectory per class
(``<root>/NORMAL/*.jpeg``, ``<root>/PNEUMONIA/*.jpeg``). Scanning produces a
manifest of per-image records; splitting assigns each record to TRAIN, VAL or
TEST with a per-class floor rule that keeps class proportions identical across
splits; preprocessing resizes to a square RGB tensor and standardizes with
ImageNet statistics; augmentation applies a fixed sequence of stochastic
transforms driven by a caller-owned generator so runs are reproducible.

Reproducibility notes:
- record ordering is lexicographic by id everywhere, so scans are stable
  across filesystems,
- the shuffle inside the split uses a single seeded numpy generator with
  classes visited in sorted label order,
- augmentation parameters for a record are derived from
  (seed, epoch, record id), so parallel and serial loaders agree.

Geometric resampling uses bilinear interpolation with zero fill. These are
not configurable; fixing them keeps golden tests stable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

from .errors import DatasetError, ImageDecodeError, SplitError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".jpeg", ".jpg", ".png"}

# ImageNet channel statistics, the standard normalization for pretrained backbones.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DEFAULT_RATIOS = (0.8, 0.1, 0.1)
DEFAULT_SEED = 42


class Label(str, Enum):
    NORMAL = "NORMAL"
    PNEUMONIA = "PNEUMONIA"


class SplitName(str, Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"
    UNASSIGNED = "UNASSIGNED"


DEFAULT_CLASS_SUBDIRS: Mapping[Label, str] = {
    Label.NORMAL: "NORMAL",
    Label.PNEUMONIA: "PNEUMONIA",
}


@dataclass(frozen=True)
class ImageRecord:
    """One image: id is the root-relative posix path, unique per manifest."""

    id: str
    label: Label
    split: SplitName = SplitName.UNASSIGNED


@dataclass
class SplitManifest:
    """All records of a dataset plus the split parameters that produced them.

    ``seed`` and ``ratios`` are None until :func:`stratified_split` runs.
    """

    records: list[ImageRecord] = field(default_factory=list)
    seed: Optional[int] = None
    ratios: Optional[tuple[float, float, float]] = None

    def __post_init__(self) -> None:
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError("manifest contains duplicate record ids")

    @property
    def assigned(self) -> bool:
        return bool(self.records) and all(
            r.split is not SplitName.UNASSIGNED for r in self.records
        )

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def records_in(self, split: SplitName) -> list[ImageRecord]:
        return [r for r in self.records if r.split is split]

    def class_counts(self, split: Optional[SplitName] = None) -> dict[Label, int]:
        counts = {label: 0 for label in Label}
        for r in self.records:
            if split is None or r.split is split:
                counts[r.label] += 1
        return counts

    def split_counts(self) -> dict[str, dict[str, int]]:
        """Per-split per-class counts, keyed by serialized enum values."""
        out: dict[str, dict[str, int]] = {}
        for split in (SplitName.TRAIN, SplitName.VAL, SplitName.TEST):
            out[split.value] = {
                label.value: n for label, n in self.class_counts(split).items()
            }
        return out


def scan_dataset_dir(
    root: Union[str, Path],
    class_subdirs: Optional[Mapping[Label, str]] = None,
) -> SplitManifest:
    """Enumerate readable images under one subdirectory per class.

    Unreadable or zero-byte files are skipped with a warning and counted in a
    summary log line. A missing class subdirectory is fatal; an empty one only
    warns. Records come back sorted lexicographically by id with split
    UNASSIGNED.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    class_subdirs = class_subdirs or DEFAULT_CLASS_SUBDIRS

    records: list[ImageRecord] = []
    skipped = 0
    for label in sorted(class_subdirs, key=lambda lab: lab.value):
        subdir = root / class_subdirs[label]
        if not subdir.is_dir():
            raise DatasetError(f"class directory does not exist: {subdir}")
        found = 0
        for path in sorted(subdir.rglob("*")):
            if not path.is_file() or path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            if not _is_readable_image(path):
                logger.warning("skipping unreadable image: %s", path)
                skipped += 1
                continue
            rec_id = path.relative_to(root).as_posix()
            records.append(ImageRecord(id=rec_id, label=label))
            found += 1
        if found == 0:
            logger.warning("class directory has no readable images: %s", subdir)
    if skipped:
        logger.warning("skipped %d unreadable image file(s) during scan", skipped)

    records.sort(key=lambda r: r.id)
    return SplitManifest(records=records)


def _is_readable_image(path: Path) -> bool:
    try:
        if path.stat().st_size == 0:
            return False
        with Image.open(path) as im:
            im.verify()
        return True
    except (UnidentifiedImageError, OSError, SyntaxError):
        return False


def stratified_split(
    manifest: SplitManifest,
    ratios: tuple[float, float, float] = DEFAULT_RATIOS,
    seed: int = DEFAULT_SEED,
) -> SplitManifest:
    """Assign every record to TRAIN/VAL/TEST, stratified by class.

    Per class with n records: shuffle with the seeded generator, then assign
    the first floor(ratios[0] * n) to TRAIN, the next floor(ratios[1] * n) to
    VAL and the remainder to TEST. Deterministic for a fixed
    (manifest, ratios, seed).
    """
    _check_ratios(ratios)
    if any(r.split is not SplitName.UNASSIGNED for r in manifest.records):
        raise SplitError("manifest already split; re-scan or reload to split again")

    by_label: dict[Label, list[ImageRecord]] = {}
    for rec in manifest.records:
        by_label.setdefault(rec.label, []).append(rec)
    for label, recs in by_label.items():
        if len(recs) < 3:
            raise SplitError(
                f"class {label.value} has only {len(recs)} record(s); "
                "at least 3 are needed to populate train/val/test"
            )

    rng = np.random.default_rng(seed)
    assigned: list[ImageRecord] = []
    for label in sorted(by_label, key=lambda lab: lab.value):
        recs = sorted(by_label[label], key=lambda r: r.id)
        order = rng.permutation(len(recs))
        shuffled = [recs[i] for i in order]
        n = len(shuffled)
        # tiny epsilon guards against products like 0.1 * n landing just
        # below an exact integer in floating point
        n_train = math.floor(ratios[0] * n + 1e-9)
        n_val = math.floor(ratios[1] * n + 1e-9)
        for i, rec in enumerate(shuffled):
            if i < n_train:
                split = SplitName.TRAIN
            elif i < n_train + n_val:
                split = SplitName.VAL
            else:
                split = SplitName.TEST
            assigned.append(replace(rec, split=split))

    assigned.sort(key=lambda r: r.id)
    return SplitManifest(records=assigned, seed=seed, ratios=tuple(ratios))


def _check_ratios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3:
        raise SplitError(f"expected 3 split ratios, got {len(ratios)}")
    if any(not (0 < r < 1) for r in ratios):
        raise SplitError(f"split ratios must lie in (0, 1): {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"split ratios must sum to 1: {ratios}")


# ---------------------------------------------------------------------------
# Manifest persistence: CSV with a JSON sidecar, reloadable without resplitting.
# ---------------------------------------------------------------------------

def manifest_sidecar_path(csv_path: Union[str, Path]) -> Path:
    return Path(csv_path).with_suffix(".json")


def save_manifest(manifest: SplitManifest, csv_path: Union[str, Path]) -> None:
    """Write ``id,label,split`` rows plus a ``{seed, ratios, counts}`` sidecar."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "split"])
        for rec in sorted(manifest.records, key=lambda r: r.id):
            writer.writerow([rec.id, rec.label.value, rec.split.value])
    sidecar = {
        "seed": manifest.seed,
        "ratios": list(manifest.ratios) if manifest.ratios else None,
        "counts": manifest.split_counts(),
    }
    with open(manifest_sidecar_path(csv_path), "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def load_manifest(csv_path: Union[str, Path]) -> SplitManifest:
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise DatasetError(f"manifest not found: {csv_path}")
    records = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "label", "split"]:
            raise DatasetError(
                f"unexpected manifest header {reader.fieldnames} in {csv_path}"
            )
        for row in reader:
            records.append(
                ImageRecord(
                    id=row["id"],
                    label=Label(row["label"]),
                    split=SplitName(row["split"]),
                )
            )
    seed = None
    ratios = None
    sidecar = manifest_sidecar_path(csv_path)
    if sidecar.is_file():
        with open(sidecar) as fh:
            meta = json.load(fh)
        seed = meta.get("seed")
        if meta.get("ratios"):
            ratios = tuple(meta["ratios"])
    records.sort(key=lambda r: r.id)
    return SplitManifest(records=records, seed=seed, ratios=ratios)


def manifest_hash(csv_path: Union[str, Path]) -> str:
    """Content hash of a persisted manifest, used to detect mixed-run reports."""
    return hashlib.sha256(Path(csv_path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    """Square resize target plus per-channel standardization statistics."""

    target_size: int = 224
    channel_means: tuple[float, float, float] = IMAGENET_MEAN
    channel_stds: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self) -> None:
        if self.target_size <= 0:
            raise DatasetError(f"target_size must be positive: {self.target_size}")
        if len(self.channel_means) != 3 or len(self.channel_stds) != 3:
            raise DatasetError("channel statistics must have 3 entries each")
        if any(s <= 0 for s in self.channel_stds):
            raise DatasetError(f"channel stds must be strictly positive: {self.channel_stds}")


RawImage = Union[Image.Image, np.ndarray]


def to_unit_tensor(
    raw: RawImage, target_size: int, source: Optional[str] = None
) -> torch.Tensor:
    """Decode to a (3, S, S) float32 tensor in [0, 1].

    Grayscale inputs are replicated to 3 channels, resizing is plain bilinear
    (no antialias). numpy inputs may be (H, W), (H, W, 1) or (H, W, 3) and
    either uint8 or float already in [0, 1].
    """
    if isinstance(raw, Image.Image):
        arr = np.asarray(raw.convert("RGB"), dtype=np.float32) / 255.0
    elif isinstance(raw, np.ndarray):
        arr = raw.astype(np.float32)
        if np.issubdtype(raw.dtype, np.integer):
            arr = arr / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        if arr.shape[2] != 3:
            raise ImageDecodeError(
                f"expected 1 or 3 channels, got shape {raw.shape}"
                + (f" for {source}" if source else "")
            )
        if arr.min() < -1e-6 or arr.max() > 1 + 1e-6:
            raise ImageDecodeError(
                "float image values must lie in [0, 1]"
                + (f" for {source}" if source else "")
            )
    else:
        raise ImageDecodeError(f"unsupported raw image type {type(raw).__name__}")

    tensor = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)
    if tensor.shape[1:] != (target_size, target_size):
        tensor = torch.nn.functional.interpolate(
            tensor.unsqueeze(0),
            size=(target_size, target_size),
            mode="bilinear",
            align_corners=False,
        ).squeeze(0)
    return tensor


def standardize(img: torch.Tensor, cfg: PreprocessConfig) -> torch.Tensor:
    mean = torch.tensor(cfg.channel_means, dtype=img.dtype).view(3, 1, 1)
    std = torch.tensor(cfg.channel_stds, dtype=img.dtype).view(3, 1, 1)
    return (img - mean) / std


def destandardize(img: torch.Tensor, cfg: PreprocessConfig) -> torch.Tensor:
    mean = torch.tensor(cfg.channel_means, dtype=img.dtype).view(3, 1, 1)
    std = torch.tensor(cfg.channel_stds, dtype=img.dtype).view(3, 1, 1)
    return img * std + mean


def preprocess_image(
    raw: RawImage,
    cfg: Optional[PreprocessConfig] = None,
    source: Optional[str] = None,
) -> torch.Tensor:
    """Full eval-time pipeline: decode, replicate to RGB, resize, standardize."""
    cfg = cfg or PreprocessConfig()
    return standardize(to_unit_tensor(raw, cfg.target_size, source=source), cfg)


def load_image(path: Union[str, Path], source: Optional[str] = None) -> Image.Image:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            return im.convert("RGB")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(
            f"cannot decode image {source or path}: {exc}"
        ) from exc


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    """Training-set augmentation magnitudes.

    jitter_frac drives both brightness (x * b) and contrast
    (mean + c * (x - mean), per-channel spatial mean), with b and c drawn
    uniformly from [1 - j, 1 + j]. Outputs are not clamped, the formulas are
    applied exactly.
    """

    hflip_prob: float = 0.5
    max_rotation_deg: float = 10.0
    max_translate_frac: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    jitter_frac: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise DatasetError(f"hflip_prob must lie in [0, 1]: {self.hflip_prob}")
        lo, hi = self.scale_range
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi or lo <= 0:
            raise DatasetError(f"invalid scale_range: {self.scale_range}")
        for name in ("max_rotation_deg", "max_translate_frac", "jitter_frac"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise DatasetError(f"{name} must be finite and non-negative: {value}")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(
            hflip_prob=0.0,
            max_rotation_deg=0.0,
            max_translate_frac=0.0,
            scale_range=(1.0, 1.0),
            jitter_frac=0.0,
        )


def _uniform(rng: torch.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        # still consume one draw so the stream does not depend on magnitudes
        torch.rand(1, generator=rng)
        return lo
    return torch.empty(1).uniform_(lo, hi, generator=rng).item()


def augment_image(
    img: torch.Tensor, policy: AugmentPolicy, rng: torch.Generator
) -> torch.Tensor:
    """Apply the augmentation sequence with parameters drawn from ``rng``.

    Order: horizontal flip, rotation, affine translate+scale, brightness,
    contrast. Geometric ops use bilinear interpolation with zero fill.
    Deterministic for a fixed generator state; ops whose drawn parameters are
    identities are skipped so a zero-magnitude policy returns the input
    unchanged.
    """
    if img.dim() != 3 or img.shape[0] != 3:
        raise DatasetError(f"expected a (3, H, W) tensor, got {tuple(img.shape)}")

    flip = torch.rand(1, generator=rng).item() < policy.hflip_prob
    angle = _uniform(rng, -policy.max_rotation_deg, policy.max_rotation_deg)
    tx = _uniform(rng, -policy.max_translate_frac, policy.max_translate_frac)
    ty = _uniform(rng, -policy.max_translate_frac, policy.max_translate_frac)
    scale = _uniform(rng, policy.scale_range[0], policy.scale_range[1])
    brightness = _uniform(rng, 1.0 - policy.jitter_frac, 1.0 + policy.jitter_frac)
    contrast = _uniform(rng, 1.0 - policy.jitter_frac, 1.0 + policy.jitter_frac)

    out = img
    if flip:
        out = torch.flip(out, dims=[-1])
    if angle != 0.0:
        out = TF.rotate(
            out, angle, interpolation=InterpolationMode.BILINEAR, fill=[0.0, 0.0, 0.0]
        )
    if tx != 0.0 or ty != 0.0 or scale != 1.0:
        _, h, w = out.shape
        out = TF.affine(
            out,
            angle=0.0,
            translate=[tx * w, ty * h],
            scale=scale,
            shear=[0.0, 0.0],
            interpolation=InterpolationMode.BILINEAR,
            fill=[0.0, 0.0, 0.0],
        )
    if brightness != 1.0:
        out = out * brightness
    if contrast != 1.0:
        mean = out.mean(dim=(-2, -1), keepdim=True)
        out = mean + contrast * (out - mean)
    return out


def augment_generator(seed: int, record_id: str, epoch: int = 0) -> torch.Generator:
    """Independent generator for one record, stable across platforms.

    Derived from (seed, epoch, record id) so worker processes and the serial
    path sample identical augmentation parameters.
    """
    key = f"{seed}:{epoch}:{record_id}".encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    gen = torch.Generator()
    gen.manual_seed(int.from_bytes(digest, "big"))
    return gen


# ---------------------------------------------------------------------------
# Torch datasets
# ---------------------------------------------------------------------------

LABEL_INDEX = {Label.NORMAL: 0, Label.PNEUMONIA: 1}
POSITIVE_LABEL = Label.PNEUMONIA


class XrayDataset(Dataset):
    """Images of one split as (tensor, label index, record id) triples.

    With an augmentation policy the pipeline is resize, augment in unit range,
    standardize; without one it is exactly :func:`preprocess_image`. The
    ``augmented`` flag lets loader builders assert that only TRAIN augments.
    """

    def __init__(
        self,
        manifest: SplitManifest,
        split: SplitName,
        root: Union[str, Path],
        preprocess: Optional[PreprocessConfig] = None,
        augment: Optional[AugmentPolicy] = None,
        seed: int = DEFAULT_SEED,
    ) -> None:
        self.records = manifest.records_in(split)
        self.split = split
        self.root = Path(root)
        self.preprocess = preprocess or PreprocessConfig()
        self.augment = augment
        self.seed = seed
        self.epoch = 0

    @property
    def augmented(self) -> bool:
        return self.augment is not None

    def set_epoch(self, epoch: int) -> None:
        """Advance the augmentation stream; call before each training epoch."""
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, int, str]:
        rec = self.records[index]
        raw = load_image(self.root / rec.id, source=rec.id)
        img = to_unit_tensor(raw, self.preprocess.target_size, source=rec.id)
        if self.augment is not None:
            rng = augment_generator(self.seed, rec.id, epoch=self.epoch)
            img = augment_image(img, self.augment, rng)
        img = standardize(img, self.preprocess)
        return img, LABEL_INDEX[rec.label], rec.id


def make_datasets(
    manifest: SplitManifest,
    root: Union[str, Path],
    preprocess: Optional[PreprocessConfig] = None,
    augment: Optional[AugmentPolicy] = None,
    seed: int = DEFAULT_SEED,
) -> dict[SplitName, XrayDataset]:
    """Datasets for all three splits; augmentation is applied to TRAIN only."""
    if not manifest.assigned:
        raise DatasetError(
            "manifest has unassigned records; run stratified_split first"
        )
    augment = augment if augment is not None else AugmentPolicy()
    datasets = {
        SplitName.TRAIN: XrayDataset(
            manifest, SplitName.TRAIN, root, preprocess, augment=augment, seed=seed
        ),
        SplitName.VAL: XrayDataset(manifest, SplitName.VAL, root, preprocess),
        SplitName.TEST: XrayDataset(manifest, SplitName.TEST, root, preprocess),
    }
    assert not datasets[SplitName.VAL].augmented
    assert not datasets[SplitName.TEST].augmented
    return datasets
