"""
Datasets, the synthetic texture benchmark and episodic sampling.

Images are float32 arrays of shape (C, H, W) with values in [0, 1]. A
directory dataset is laid out as ``root/<class_name>/<image>.png`` with a
split file of ``<class_name>,<train|val|test>`` lines.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Deque, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from errors import LoadError, ReportError, SamplingError, UsageError

logger = logging.getLogger(__name__)

ROLES = ("train", "val", "test")
DEFAULT_SIDE = 32


@dataclass(frozen=True, eq=False)
class ImageSample:
    id: int
    pixels: np.ndarray
    label: int


@dataclass
class LabeledDataset:
    samples: List[ImageSample]
    classes: FrozenSet[int]
    role: str
    class_names: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise UsageError(f"dataset role must be one of {ROLES}, got '{self.role}'")
        ids = set()
        for sample in self.samples:
            if sample.label not in self.classes:
                raise UsageError(f"sample {sample.id} has label {sample.label} outside the dataset classes")
            if sample.id in ids:
                raise UsageError(f"duplicate sample id {sample.id}")
            ids.add(sample.id)

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def images(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 3, DEFAULT_SIDE, DEFAULT_SIDE), dtype=np.float32)
        return np.stack([sample.pixels for sample in self.samples]).astype(np.float32, copy=False)

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([sample.label for sample in self.samples], dtype=np.int64)

    @cached_property
    def ids(self) -> np.ndarray:
        return np.array([sample.id for sample in self.samples], dtype=np.int64)

    @cached_property
    def indices_by_class(self) -> Dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.labels == c) for c in sorted(self.classes)}

    def class_name(self, label: int) -> str:
        return self.class_names.get(label, f"class_{label:03d}")


# ---------------------------------------------------------------------------
# Hidden labels
# ---------------------------------------------------------------------------

class OracleAccess:
    """Capability token required to read the hidden labels of an unlabeled set"""
    _key = object()

    def __init__(self, key, reason: str):
        if key is not OracleAccess._key:
            raise UsageError("oracle access tokens are issued only by grant_oracle_access()")
        self.reason = reason


# the most recent grants, oldest dropped first
ORACLE_AUDIT_SIZE = 1024
ORACLE_AUDIT: Deque[str] = deque(maxlen=ORACLE_AUDIT_SIZE)


def grant_oracle_access(reason: str) -> OracleAccess:
    ORACLE_AUDIT.append(reason)
    logger.debug("oracle access granted: %s", reason)
    return OracleAccess(OracleAccess._key, reason)


class HiddenLabels:
    """True labels that only an OracleAccess holder may read"""

    def __init__(self, labels: np.ndarray):
        self._labels = np.asarray(labels, dtype=np.int64)
        self._labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self._labels)

    def reveal(self, token: OracleAccess) -> np.ndarray:
        if not isinstance(token, OracleAccess):
            raise UsageError("hidden labels require an OracleAccess token")
        return self._labels


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeSpec:
    n: int = 5
    k: int = 1
    t: int = 15
    u: int = 15

    def __post_init__(self):
        if self.n < 2 or self.k < 1 or self.t < 1 or self.u < 0:
            raise UsageError(f"episode spec needs n >= 2, k >= 1, t >= 1, u >= 0, got {self}")

    @property
    def per_class(self) -> int:
        return self.k + self.t + self.u

    @property
    def total(self) -> int:
        return self.per_class * self.n


@dataclass
class Episode:
    """
    One n-way k-shot task. Labels are episode-local indices into class_map;
    the unlabeled set's labels are hidden behind an OracleAccess token.
    """
    spec: EpisodeSpec
    class_map: Tuple[int, ...]
    support_images: np.ndarray
    support_labels: np.ndarray
    support_ids: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    query_ids: np.ndarray
    unlabeled_images: np.ndarray
    unlabeled_ids: np.ndarray
    hidden_labels: HiddenLabels

    @property
    def total(self) -> int:
        return len(self.support_ids) + len(self.query_ids) + len(self.unlabeled_ids)

    def global_class(self, local: int) -> int:
        return self.class_map[local]

    def unlabeled_labels(self, token: OracleAccess) -> np.ndarray:
        return self.hidden_labels.reveal(token)


def sample_episode(dataset: LabeledDataset, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    """Draw n classes, then k+t+u images per class, split into support/query/unlabeled"""
    classes = sorted(dataset.classes)
    if len(classes) < spec.n:
        raise SamplingError(f"{spec.n}-way episodes need {spec.n} classes, dataset has {len(classes)}")
    for c in classes:
        available = len(dataset.indices_by_class[c])
        if available < spec.per_class:
            raise SamplingError(
                f"class '{dataset.class_name(c)}' has {available} samples, episodes need {spec.per_class}")

    chosen = rng.choice(len(classes), size=spec.n, replace=False)
    class_map = tuple(classes[i] for i in chosen)
    parts = {"support": [], "query": [], "unlabeled": []}
    local = {"support": [], "query": [], "unlabeled": []}
    for index, c in enumerate(class_map):
        picks = rng.choice(dataset.indices_by_class[c], size=spec.per_class, replace=False)
        for name, block in (("support", picks[:spec.k]),
                            ("query", picks[spec.k:spec.k + spec.t]),
                            ("unlabeled", picks[spec.k + spec.t:])):
            parts[name].append(block)
            local[name].append(np.full(len(block), index, dtype=np.int64))

    def gather(name):
        idx = np.concatenate(parts[name]).astype(np.int64)
        return dataset.images[idx], np.concatenate(local[name]), dataset.ids[idx]

    support_images, support_labels, support_ids = gather("support")
    query_images, query_labels, query_ids = gather("query")
    unlabeled_images, unlabeled_labels, unlabeled_ids = gather("unlabeled")
    return Episode(spec=spec, class_map=class_map,
                   support_images=support_images, support_labels=support_labels, support_ids=support_ids,
                   query_images=query_images, query_labels=query_labels, query_ids=query_ids,
                   unlabeled_images=unlabeled_images, unlabeled_ids=unlabeled_ids,
                   hidden_labels=HiddenLabels(unlabeled_labels))


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------

def _class_styles(num_classes: int, seed: int) -> List[dict]:
    # a class is a grating frequency and orientation; color plays no part
    rng = np.random.default_rng([seed, 0])
    return [{"frequency": rng.uniform(2.0, 4.5), "orientation": rng.uniform(0.0, np.pi)}
            for _ in range(num_classes)]


def _grating(xs: np.ndarray, ys: np.ndarray, frequency: float, theta: float, phase: float) -> np.ndarray:
    return 0.5 + 0.5 * np.sin(2 * np.pi * frequency * (xs * np.cos(theta) + ys * np.sin(theta)) + phase)


def _colorize(grating: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    light = rng.uniform(0.5, 1.0, size=3)[:, None, None]
    dark = rng.uniform(0.0, 0.4, size=3)[:, None, None]
    return grating[None] * light + (1 - grating[None]) * dark


def _render(style: dict, side: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64) / side
    frequency = style["frequency"] * rng.uniform(0.88, 1.12)
    theta = style["orientation"] + rng.uniform(-0.25, 0.25)
    image = _colorize(_grating(xs, ys, frequency, theta, rng.uniform(0.0, 2 * np.pi)), rng)

    # a patch of some other texture over 20-45% of the image
    area = rng.uniform(0.2, 0.45)
    aspect = rng.uniform(0.5, 2.0)
    height, width = min(np.sqrt(area * aspect), 1.0), min(np.sqrt(area / aspect), 1.0)
    top, left = rng.uniform(0.0, 1.0 - height), rng.uniform(0.0, 1.0 - width)
    inside = (ys >= top) & (ys < top + height) & (xs >= left) & (xs < left + width)
    distractor = _colorize(_grating(xs, ys, rng.uniform(2.0, 4.5), rng.uniform(0.0, np.pi),
                                    rng.uniform(0.0, 2 * np.pi)), rng)
    image = np.where(inside[None], distractor, image)

    cy, cx = rng.uniform(0.15, 0.85, size=2)
    radius = rng.uniform(0.08, 0.15)
    blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * radius ** 2))[None]
    image = (1 - blob) * image + blob * rng.uniform(0.0, 1.0, size=3)[:, None, None]
    image = image + rng.normal(0.0, 0.12, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def make_synthetic_dataset(num_classes: int, per_class: int, side: int = DEFAULT_SIDE, seed: int = 7,
                           role: str = "train", first_class: int = 0, first_id: int = 0) -> LabeledDataset:
    """
    Procedural texture classes. A class is a sinusoidal grating of its own
    frequency and orientation, both jittered per sample. Every sample draws its
    own palette, a patch of another grating over part of the image, an occluding
    blob of random color and pixel noise, so neither color nor any single
    location identifies the class.
    """
    if num_classes < 2 or per_class < 1:
        raise UsageError("synthetic dataset needs >= 2 classes and >= 1 image per class")
    styles = _class_styles(first_class + num_classes, seed)
    samples = []
    next_id = first_id
    for c in range(first_class, first_class + num_classes):
        rng = np.random.default_rng([seed, 1, c])
        for _ in range(per_class):
            samples.append(ImageSample(id=next_id, pixels=_render(styles[c], side, rng), label=c))
            next_id += 1
    classes = frozenset(range(first_class, first_class + num_classes))
    return LabeledDataset(samples, classes, role, {c: f"synth_{c:03d}" for c in classes})


def make_synthetic_splits(num_classes: int = 40, per_class: int = 100, side: int = DEFAULT_SIDE,
                          seed: int = 7, test_classes: int = 10,
                          val_classes: int = 0) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Split num_classes synthetic classes into disjoint train/val/test class sets"""
    train_classes = num_classes - test_classes - val_classes
    if train_classes < 2 or test_classes < 2:
        raise UsageError(f"need >= 2 train and >= 2 test classes, got {train_classes} and {test_classes}")

    train = make_synthetic_dataset(train_classes, per_class, side, seed, "train")
    start = train_classes
    if val_classes:
        val = make_synthetic_dataset(val_classes, per_class, side, seed, "val",
                                     first_class=start, first_id=start * per_class)
    else:
        val = LabeledDataset([], frozenset(), "val")
    start += val_classes
    test = make_synthetic_dataset(test_classes, per_class, side, seed, "test",
                                  first_class=start, first_id=start * per_class)
    return train, val, test


# ---------------------------------------------------------------------------
# Directory datasets
# ---------------------------------------------------------------------------

def decode_image(path, side: int = DEFAULT_SIDE) -> np.ndarray:
    """Decode an image file to (3, side, side) float32 in [0, 1] with bilinear resizing"""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (side, side):
                img = img.resize((side, side), Image.Resampling.BILINEAR)
            array = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise LoadError(f"could not read image '{path}': {e}") from e
    return np.ascontiguousarray(array.transpose(2, 0, 1))


def encode_image(pixels: np.ndarray, path) -> None:
    array = np.clip(np.round(pixels.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(array).save(path, format="PNG")
    except OSError as e:
        raise ReportError(f"could not write image '{path}': {e}") from e


def read_split_file(split_file) -> Dict[str, str]:
    try:
        text = Path(split_file).read_text(encoding="utf-8")
    except OSError as e:
        raise LoadError(f"could not read split file '{split_file}': {e}") from e
    splits = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, sep, role = (part.strip() for part in line.rpartition(","))
        if not sep or role not in ROLES or not name:
            raise LoadError(f"{split_file}:{line_no}: expected '<class_name>,<train|val|test>', got '{line}'")
        splits[name] = role
    return splits


def load_dataset(root, split_file, side: int = DEFAULT_SIDE) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Load train/val/test datasets from root/<class>/<image>.png per the split file"""
    root = Path(root)
    splits = read_split_file(split_file)
    for name in splits:
        if not (root / name).is_dir():
            raise LoadError(f"class '{name}' from the split file has no directory under '{root}'")

    by_role = {role: [] for role in ROLES}
    names = {role: {} for role in ROLES}
    next_id = 0
    for label, name in enumerate(sorted(splits)):
        role = splits[name]
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise LoadError(f"class '{name}' has no PNG images in '{root / name}'")
        names[role][label] = name
        for path in files:
            by_role[role].append(ImageSample(id=next_id, pixels=decode_image(path, side), label=label))
            next_id += 1

    datasets = tuple(LabeledDataset(by_role[role], frozenset(names[role]), role, names[role]) for role in ROLES)
    logger.info("loaded %s from %s", ", ".join(f"{len(d)} {d.role}" for d in datasets), root)
    return datasets


def export_dataset(datasets: Sequence[LabeledDataset], root, split_file=None) -> Path:
    """Write datasets to root/<class_name>/<id>.png and a split file listing every class"""
    root = Path(root)
    split_file = Path(split_file) if split_file else root / "splits.csv"
    lines = []
    try:
        for dataset in datasets:
            for c in sorted(dataset.classes):
                (root / dataset.class_name(c)).mkdir(parents=True, exist_ok=True)
                lines.append(f"{dataset.class_name(c)},{dataset.role}")
            for sample in dataset.samples:
                encode_image(sample.pixels, root / dataset.class_name(sample.label) / f"{sample.id:06d}.png")
        split_file.parent.mkdir(parents=True, exist_ok=True)
        split_file.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise ReportError(f"could not export dataset to '{root}': {e}") from e
    return split_file
