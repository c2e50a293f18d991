"""Datasets: directory ingestion, stratified splits, class weights and lung phantoms."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .errors import FormatError, GenerationError, LabelError, StratifyError, WeightError
from .formats import read_image, write_mask, write_pgm
from .seeding import numpy_rng

MIN_SIDE = 16
TAG_SIZE = 6


class ClassLabel(enum.IntEnum):
    NEGATIVE = 0
    TYPICAL = 1
    INDETERMINATE = 2
    ATYPICAL = 3

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise LabelError(f"unknown label {text!r}") from None

    @property
    def slug(self) -> str:
        return self.name.lower()


class ClassMode(str, enum.Enum):
    FOUR_CLASS = "four_class"
    TWO_CLASS = "two_class"

    @property
    def classes(self) -> tuple[ClassLabel, ...]:
        if self is ClassMode.TWO_CLASS:
            return (ClassLabel.NEGATIVE, ClassLabel.TYPICAL)
        return tuple(ClassLabel)


@dataclass(frozen=True)
class ImageSample:
    id: str
    pixels: np.ndarray
    label: ClassLabel | None = None

    def __post_init__(self):
        if self.pixels.ndim != 2 or min(self.pixels.shape) < MIN_SIDE:
            raise FormatError(f"{self.id}: images must be 2-D with sides >= {MIN_SIDE}")
        if self.pixels.dtype != np.uint8:
            raise FormatError(f"{self.id}: pixels must be uint8")


@dataclass
class Dataset:
    """A stack of equally sized grayscale images.

    ``labels`` holds :class:`ClassLabel` values as integers (which double as
    class indices in both class modes) or is ``None`` for unlabeled data.
    """

    ids: list[str]
    images: np.ndarray
    labels: np.ndarray | None = None
    class_mode: ClassMode = ClassMode.TWO_CLASS

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        if self.images.ndim != 3:
            raise FormatError("dataset images must have shape (N, H, W)")
        if len(self.ids) != len(self.images):
            raise FormatError("ids and images differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise FormatError("sample ids must be unique")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.ids),):
                raise FormatError("labels must have one entry per image")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[ImageSample]:
        for i, sid in enumerate(self.ids):
            label = None if self.labels is None else ClassLabel(int(self.labels[i]))
            yield ImageSample(sid, self.images[i], label)

    @property
    def side(self) -> int:
        return int(self.images.shape[1])

    @property
    def num_classes(self) -> int:
        return len(self.class_mode.classes)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            [self.ids[i] for i in idx],
            self.images[idx],
            None if self.labels is None else self.labels[idx],
            self.class_mode,
        )

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(list(self.ids), images, self.labels, self.class_mode)

    def tensor(self) -> torch.Tensor:
        """Images as float32 ``(N, 1, H, W)`` in [0, 1]."""
        return torch.from_numpy(self.images.astype(np.float32) / 255.0).unsqueeze(1)

    def label_tensor(self) -> torch.Tensor:
        if self.labels is None:
            raise LabelError("dataset is unlabeled")
        return torch.from_numpy(self.labels)


class PhantomMode(str, enum.Enum):
    SIGNAL_IN_LUNG = "signal_in_lung"
    SIGNAL_OUT_LUNG = "signal_out_lung"
    MIXED = "mixed"


@dataclass(frozen=True)
class PhantomConfig:
    n_samples: int = 400
    side: int = 64
    mode: PhantomMode = PhantomMode.SIGNAL_IN_LUNG
    noise_sigma: float = 8.0
    seed: int = 0
    class_mode: ClassMode = ClassMode.TWO_CLASS

    def validate(self) -> None:
        if self.n_samples < 40:
            raise ValueError("phantoms need at least 40 samples")
        if self.side < 32:
            raise ValueError("phantom side must be >= 32 so the corner tag clears the lungs")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


@dataclass(frozen=True)
class DatasetSpec:
    source: Path | PhantomConfig
    side: int = 64
    split_fraction: float = 0.8
    seed: int = 0
    class_mode: ClassMode = ClassMode.TWO_CLASS

    def validate(self) -> None:
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.side < MIN_SIDE:
            raise ValueError(f"side must be >= {MIN_SIDE}")


@dataclass(frozen=True)
class ClassWeights:
    weights: dict[ClassLabel, float]

    def tensor(self, classes: Sequence[ClassLabel], dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([self.weights[c] for c in classes], dtype=dtype)


# ---------------------------------------------------------------------------
# directory datasets
# ---------------------------------------------------------------------------


def _resize(pixels: np.ndarray, side: int) -> np.ndarray:
    if pixels.shape == (side, side):
        return pixels
    from PIL import Image

    return np.asarray(Image.fromarray(pixels).resize((side, side), Image.BILINEAR), dtype=np.uint8)


def load_dataset(spec: DatasetSpec) -> Dataset:
    """Load ``labels.csv`` plus the images it lists from ``spec.source``."""
    spec.validate()
    root = Path(spec.source)
    labels_path = root / "labels.csv"
    if not labels_path.is_file():
        raise FormatError(f"missing {labels_path}")
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != ["filename", "label"]:
            raise FormatError(f"{labels_path}: header must be 'filename,label'")
        rows = [(r["filename"].strip(), ClassLabel.parse(r["label"])) for r in reader]

    active = set(spec.class_mode.classes)
    ids, images, labels = [], [], []
    for filename, label in rows:
        if label not in active:
            continue
        pixels = read_image(root / filename)
        if min(pixels.shape) < MIN_SIDE:
            raise FormatError(f"{filename}: image smaller than {MIN_SIDE}px")
        ids.append(filename)
        images.append(_resize(pixels, spec.side))
        labels.append(int(label))
    images_arr = np.stack(images) if images else np.zeros((0, spec.side, spec.side), np.uint8)
    return Dataset(ids, images_arr, np.asarray(labels, dtype=np.int64), spec.class_mode)


def save_dataset(dataset: Dataset, directory: str | Path, masks: dict[str, np.ndarray] | None = None) -> None:
    """Write images as PGM, ``labels.csv`` and, optionally, ``masks/<id>``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if masks is not None:
        (directory / "masks").mkdir(exist_ok=True)
    with open(directory / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "label"])
        for sample in dataset:
            name = sample.id if sample.id.endswith(".pgm") else f"{sample.id}.pgm"
            write_pgm(directory / name, sample.pixels)
            writer.writerow([name, sample.label.slug if sample.label is not None else ""])
            if masks is not None:
                write_mask(directory / "masks" / name, masks[sample.id])


def make_split(dataset: Dataset, fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified train/validation split.

    Each class contributes ``round(fraction * n_c)`` training samples (half
    rounds up), clamped so both sides keep at least one sample.
    """
    if len(dataset) == 0:
        raise StratifyError("cannot split an empty dataset")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    rng = numpy_rng(seed, "data.make_split")
    groups = dataset.labels if dataset.labels is not None else np.zeros(len(dataset), np.int64)
    train_idx: list[int] = []
    val_idx: list[int] = []
    for cls in np.unique(groups):
        members = np.flatnonzero(groups == cls)
        if len(members) < 2:
            raise StratifyError(f"class {ClassLabel(int(cls)).slug} has fewer than 2 samples")
        members = members[rng.permutation(len(members))]
        n_train = min(max(math.floor(fraction * len(members) + 0.5), 1), len(members) - 1)
        train_idx.extend(members[:n_train].tolist())
        val_idx.extend(members[n_train:].tolist())
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(val_idx))


def compute_class_weights(
    labels: Sequence[ClassLabel | int], class_mode: ClassMode = ClassMode.TWO_CLASS
) -> ClassWeights:
    """Inverse-frequency weights normalized to mean 1 over the active classes."""
    active = class_mode.classes
    counts = {c: 0 for c in active}
    for label in labels:
        label = ClassLabel(int(label))
        if label not in counts:
            raise WeightError(f"label {label.slug} is not active in {class_mode.value} mode")
        counts[label] += 1
    missing = [c.slug for c, n in counts.items() if n == 0]
    if missing:
        raise WeightError(f"classes absent from labels: {missing}")
    total = sum(counts.values())
    inverse = {c: total / n for c, n in counts.items()}
    mean = sum(inverse.values()) / len(inverse)
    return ClassWeights({c: v / mean for c, v in inverse.items()})


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

_BACKGROUND = 10.0
_TORSO = 50.0
_LUNG = 100.0
_TAG_LEVELS = {ClassLabel.NEGATIVE: 120.0, ClassLabel.TYPICAL: 200.0}


@dataclass
class PhantomSample:
    pixels: np.ndarray
    mask: np.ndarray
    blob_centers: list[tuple[int, int]] = field(default_factory=list)
    tag_level: float = 0.0


def _ellipse(yy, xx, cy, cx, ay, ax) -> np.ndarray:
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _sample_blob(rng: np.random.Generator, lung: np.ndarray, side: int) -> tuple[int, int, float, float]:
    rows, cols = np.nonzero(lung)
    lo_r, hi_r, lo_c, hi_c = rows.min(), rows.max(), cols.min(), cols.max()
    sigma = 0.05 * side * rng.uniform(0.8, 1.2)
    amplitude = rng.uniform(60.0, 90.0)
    for _ in range(1000):
        i = int(rng.integers(lo_r, hi_r + 1))
        j = int(rng.integers(lo_c, hi_c + 1))
        if lung[i, j]:
            return i, j, sigma, amplitude
    raise GenerationError("blob placement failed after 1000 attempts")


def _render_blobs(blobs, yy, xx, mask) -> np.ndarray:
    out = np.zeros(mask.shape, dtype=np.float64)
    for i, j, sigma, amplitude in blobs:
        out += amplitude * np.exp(-((yy - i) ** 2 + (xx - j) ** 2) / (2.0 * sigma**2))
    return out * mask


def render_phantom_sample(config: PhantomConfig, index: int, label: ClassLabel) -> PhantomSample:
    """Render sample ``index`` of a phantom as if it carried ``label``.

    Anatomy, noise and label-independent content come from a per-index stream,
    so two renders that differ only in ``label`` share them exactly.
    """
    side = config.side
    anatomy = numpy_rng(config.seed, f"phantom.anatomy.{index}")
    signal = numpy_rng(config.seed, f"phantom.signal.{index}")
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)

    image = np.full((side, side), _BACKGROUND)
    image[_ellipse(yy, xx, 0.55 * side, 0.5 * side, 0.42 * side, 0.40 * side)] = _TORSO
    lungs = []
    for col in (0.32, 0.68):
        cy = side * (0.52 + anatomy.uniform(-0.03, 0.03))
        cx = side * (col + anatomy.uniform(-0.03, 0.03))
        ay = 0.26 * side * anatomy.uniform(0.9, 1.1)
        ax = 0.11 * side * anatomy.uniform(0.9, 1.1)
        lungs.append(_ellipse(yy, xx, cy, cx, ay, ax))
    mask = (lungs[0] | lungs[1]).astype(np.uint8)
    if mask[:TAG_SIZE, :TAG_SIZE].any():
        raise GenerationError("lung field overlaps the corner tag")
    image[mask == 1] = _LUNG

    # label-independent content, drawn identically for every label
    random_tag = _TAG_LEVELS[ClassLabel(int(anatomy.integers(0, 2)))]
    distractors = []
    if anatomy.uniform() < 0.5:
        distractors = [_sample_blob(anatomy, lungs[int(anatomy.integers(0, 2))], side)]
    noise = anatomy.normal(0.0, config.noise_sigma, size=(side, side))

    # label-dependent content from its own stream
    if config.class_mode is ClassMode.FOUR_CLASS:
        bilateral = [_sample_blob(signal, lung, side) for lung in lungs]
        unilateral = [_sample_blob(signal, lungs[int(signal.integers(0, 2))], side)]
        planted = {
            ClassLabel.NEGATIVE: [],
            ClassLabel.TYPICAL: bilateral,
            ClassLabel.INDETERMINATE: unilateral,
            ClassLabel.ATYPICAL: unilateral,
        }[label]
    else:
        n_blobs = int(signal.integers(1, 4))
        candidates = [_sample_blob(signal, lungs[int(signal.integers(0, 2))], side) for _ in range(n_blobs)]
        planted = candidates if label is ClassLabel.TYPICAL else []

    in_lung_signal = config.mode in (PhantomMode.SIGNAL_IN_LUNG, PhantomMode.MIXED)
    out_lung_signal = config.mode in (PhantomMode.SIGNAL_OUT_LUNG, PhantomMode.MIXED)
    blobs = list(planted) if in_lung_signal else []
    if config.mode is PhantomMode.SIGNAL_OUT_LUNG:
        blobs = distractors
    tag_level = _TAG_LEVELS.get(label, random_tag) if out_lung_signal else random_tag

    image += _render_blobs(blobs, yy, xx, mask)
    image[:TAG_SIZE, :TAG_SIZE] = tag_level
    image += noise
    pixels = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    centers = [(i, j) for i, j, _, _ in (planted if in_lung_signal else [])]
    return PhantomSample(pixels, mask, centers, tag_level)


def phantom_labels(config: PhantomConfig) -> list[ClassLabel]:
    classes = config.class_mode.classes
    per_class = config.n_samples // len(classes)
    labels = [c for c in classes for _ in range(per_class)]
    labels += list(classes[: config.n_samples - len(labels)])
    order = numpy_rng(config.seed, "phantom.labels").permutation(len(labels))
    return [labels[i] for i in order]


def gen_phantom(config: PhantomConfig) -> tuple[Dataset, dict[str, np.ndarray]]:
    """Generate a labeled lung phantom and its ground-truth lung masks."""
    config.validate()
    labels = phantom_labels(config)
    width = len(str(config.n_samples - 1))
    ids, images, masks = [], [], {}
    for index, label in enumerate(labels):
        sample = render_phantom_sample(config, index, label)
        sid = f"ph{index:0{width}d}"
        ids.append(sid)
        images.append(sample.pixels)
        masks[sid] = sample.mask
    dataset = Dataset(ids, np.stack(images), np.asarray([int(l) for l in labels]), config.class_mode)
    return dataset, masks


def materialize(spec: DatasetSpec) -> tuple[Dataset, dict[str, np.ndarray] | None]:
    """Load or generate the dataset a spec describes; masks when available."""
    if isinstance(spec.source, PhantomConfig):
        return gen_phantom(spec.source)
    dataset = load_dataset(spec)
    mask_dir = Path(spec.source) / "masks"
    if not mask_dir.is_dir():
        return dataset, None
    from .formats import read_mask

    masks = {}
    for sid in dataset.ids:
        path = mask_dir / sid
        if path.is_file():
            masks[sid] = _resize(read_mask(path) * 255, dataset.side) >= 128
            masks[sid] = masks[sid].astype(np.uint8)
    return dataset, masks


__all__ = [
    "ClassLabel",
    "ClassMode",
    "ClassWeights",
    "Dataset",
    "DatasetSpec",
    "ImageSample",
    "PhantomConfig",
    "PhantomMode",
    "compute_class_weights",
    "gen_phantom",
    "load_dataset",
    "make_split",
    "materialize",
    "render_phantom_sample",
    "save_dataset",
]
