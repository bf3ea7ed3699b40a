"""
Traffic Sign Dataset Ingestion

Loads annotated road-sign datasets (LISA annotation CSV, GTSRB class
directories or a plain folder-per-class tree), filters rare classes, crops and
resizes the signs, and splits them into reproducible train/test sets.
"""

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from PIL import Image
from sklearn.model_selection import train_test_split

from artifact_store import load_archive, save_archive
from errors import ConfigurationError, DataIngestError
from image_ops import bilinear_resize

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".ppm", ".bmp"}

# Column spellings accepted for LISA-style annotation files
LISA_COLUMNS = {
    "filename": ("filename",),
    "tag": ("annotationtag",),
    "left": ("upperleftx", "upperleftcornerx"),
    "top": ("upperlefty", "upperleftcornery"),
    "right": ("lowerrightx", "lowerrightcornerx"),
    "bottom": ("lowerrighty", "lowerrightcornery"),
}

GTSRB_ROI_COLUMNS = ("Roi.X1", "Roi.Y1", "Roi.X2", "Roi.Y2")


@dataclass(frozen=True)
class RawAnnotation:
    image_path: str
    class_name: str
    bounding_box: Optional[Tuple[int, int, int, int]] = None
    source_id: str = ""


class AnnotationList(list):
    """List of RawAnnotation carrying the count of skipped rows."""

    def __init__(self, items=(), skipped=0):
        super().__init__(items)
        self.skipped = skipped


class ImageList(list):
    """List of LabeledImage carrying the count of unreadable files."""

    def __init__(self, items=(), skipped=0):
        super().__init__(items)
        self.skipped = skipped


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    image_id: str = ""


@dataclass
class ClassCatalog:
    names: List[str]
    counts: List[int]
    min_count: int

    @property
    def num_classes(self):
        return len(self.names)

    @property
    def total(self):
        return int(sum(self.counts))

    def index_of(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigurationError(f"class '{name}' is not in the catalog {self.names}")

    def top(self, k):
        """Catalog restricted to the ``k`` most frequent classes."""
        return ClassCatalog(self.names[:k], self.counts[:k], self.min_count)

    def retain(self, annotations):
        """Annotations whose class is in the catalog."""
        keep = set(self.names)
        return AnnotationList((a for a in annotations if a.class_name in keep), getattr(annotations, "skipped", 0))

    def to_dict(self):
        return {"names": list(self.names), "counts": [int(c) for c in self.counts], "min_count": self.min_count}


@dataclass
class DatasetSplit:
    train: List[LabeledImage]
    test: List[LabeledImage]
    seed: int
    train_fraction: float
    class_names: List[str] = field(default_factory=list)

    def of_class(self, label, part="train"):
        return [image for image in getattr(self, part) if image.label == label]


def load_dataset(root, format):
    """Read annotations from ``root`` in the declared ``format``.

    Returns an AnnotationList sorted by (image path, row); malformed rows are
    skipped and counted in ``.skipped``.
    """
    root = Path(root)
    if not root.exists():
        raise ConfigurationError(f"dataset root does not exist: {root}", field_path="dataset.root")

    if format == "lisa_csv":
        annotations = _load_lisa(root)
    elif format == "gtsrb_dir":
        annotations = _load_gtsrb(root)
    elif format == "folder_per_class":
        annotations = _load_folders(root)
    else:
        raise ConfigurationError(f"unknown dataset format '{format}'", field_path="dataset.format")

    if annotations.skipped:
        logger.warning("Skipped %d malformed annotation rows under %s", annotations.skipped, root)
    logger.info("Loaded %d annotations from %s", len(annotations), root)
    return annotations


def _sorted(annotations, skipped):
    ordered = sorted(annotations, key=lambda a: (a.image_path, a.source_id))
    return AnnotationList(ordered, skipped)


def _normalise(column):
    return "".join(ch for ch in str(column).lower() if ch.isalnum())


def _find_lisa_csv(root):
    if root.is_file():
        return root
    preferred = root / "allAnnotations.csv"
    if preferred.exists():
        return preferred
    candidates = sorted(root.glob("*.csv"))
    if not candidates:
        raise ConfigurationError(f"no annotation CSV found under {root}", field_path="dataset.root")
    return candidates[0]


def _load_lisa(root):
    csv_path = _find_lisa_csv(root)
    # sep=None lets pandas sniff ';' versus ','
    frame = pd.read_csv(csv_path, sep=None, engine="python", dtype=str)
    lookup = {_normalise(column): column for column in frame.columns}
    columns = {}
    for key, spellings in LISA_COLUMNS.items():
        match = next((lookup[s] for s in spellings if s in lookup), None)
        if match is None:
            raise ConfigurationError(f"{csv_path} lacks a '{spellings[0]}' column", field_path="dataset.root")
        columns[key] = match

    base = csv_path.parent
    annotations = []
    skipped = 0
    for row, record in enumerate(frame.itertuples(index=False)):
        values = dict(zip(frame.columns, record))
        filename = values.get(columns["filename"])
        tag = values.get(columns["tag"])
        box = _parse_box([values.get(columns[k]) for k in ("left", "top", "right", "bottom")])
        if not isinstance(filename, str) or not isinstance(tag, str) or not tag.strip() or box is None:
            skipped += 1
            continue
        annotations.append(RawAnnotation(
            image_path=str(base / filename.strip()),
            class_name=tag.strip(),
            bounding_box=box,
            source_id=f"{filename.strip()}#{row:06d}",
        ))
    return _sorted(annotations, skipped)


def _parse_box(values):
    try:
        left, top, right, bottom = (int(float(v)) for v in values)
    except (TypeError, ValueError):
        return None
    if left < 0 or top < 0 or right <= left or bottom <= top:
        return None
    return (left, top, right, bottom)


def _image_files(directory):
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def _load_gtsrb(root):
    annotations = []
    skipped = 0
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        name = class_dir.name
        class_name = str(int(name)) if name.isdigit() else name
        boxes = {}
        for csv_path in sorted(class_dir.glob("*.csv")):
            frame = pd.read_csv(csv_path, sep=None, engine="python", dtype=str)
            if "Filename" not in frame.columns or not all(c in frame.columns for c in GTSRB_ROI_COLUMNS):
                logger.warning("Ignoring %s: missing ROI columns", csv_path)
                continue
            for _, record in frame.iterrows():
                box = _parse_box([record[c] for c in GTSRB_ROI_COLUMNS])
                if box is None:
                    skipped += 1
                    continue
                boxes[str(record["Filename"]).strip()] = box
        for image_path in _image_files(class_dir):
            annotations.append(RawAnnotation(
                image_path=str(image_path),
                class_name=class_name,
                bounding_box=boxes.get(image_path.name),
                source_id=f"{name}/{image_path.name}",
            ))
    return _sorted(annotations, skipped)


def _load_folders(root):
    annotations = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for image_path in _image_files(class_dir):
            annotations.append(RawAnnotation(
                image_path=str(image_path),
                class_name=class_dir.name,
                source_id=f"{class_dir.name}/{image_path.name}",
            ))
    return _sorted(annotations, 0)


def apply_aliases(annotations, aliases):
    """Rename classes through ``aliases`` and drop classes it does not map."""
    renamed = [
        RawAnnotation(a.image_path, aliases[a.class_name], a.bounding_box, a.source_id)
        for a in annotations if a.class_name in aliases
    ]
    return AnnotationList(renamed, getattr(annotations, "skipped", 0))


def build_catalog(annotations, min_count):
    """Keep classes with at least ``min_count`` annotations.

    Classes are indexed by descending count, ties broken alphabetically.
    """
    if min_count < 1:
        raise ConfigurationError("min_count must be at least 1", field_path="dataset.min_count")
    counts = Counter(a.class_name for a in annotations)
    kept = sorted(((name, n) for name, n in counts.items() if n >= min_count), key=lambda item: (-item[1], item[0]))
    if not kept:
        raise DataIngestError(f"no class has at least min_count={min_count} annotations")

    catalog = ClassCatalog([name for name, _ in kept], [n for _, n in kept], min_count)
    logger.info("Catalog: %d of %d classes kept (%d annotations)", catalog.num_classes, len(counts), catalog.total)
    return catalog


def _read_crop(annotation):
    try:
        with Image.open(annotation.image_path) as image:
            image = image.convert("RGB")
            if annotation.bounding_box is not None:
                left, top, right, bottom = annotation.bounding_box
                if right > image.width or bottom > image.height:
                    return None
                image = image.crop(annotation.bounding_box)
            return np.asarray(image, dtype=np.float32) / 255.0
    except (OSError, ValueError):
        return None


def materialize(annotations, catalog, side, workers=1):
    """Crop, resize to ``side`` x ``side`` and scale each retained annotation.

    Unreadable files (or boxes outside the image) are skipped and counted.
    """
    if side < 8:
        raise ConfigurationError("side must be at least 8", field_path="dataset.side")
    retained = catalog.retain(annotations)

    # map() keeps input order, so parallel reads stay deterministic
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        crops = list(pool.map(_read_crop, retained))

    images = ImageList()
    for annotation, crop in zip(retained, crops):
        if crop is None:
            images.skipped += 1
            continue
        pixels = np.clip(bilinear_resize(crop, side, side), 0.0, 1.0).astype(np.float32)
        images.append(LabeledImage(pixels, catalog.index_of(annotation.class_name), annotation.source_id))

    if images.skipped:
        logger.warning("Skipped %d unreadable images", images.skipped)
    return images


def split(images, train_fraction, seed):
    """Per-class stratified shuffle split driven only by ``seed``."""
    if not 0 < train_fraction < 1:
        raise ConfigurationError("train_fraction must lie in (0, 1)", field_path="dataset.train_fraction")

    by_label = {}
    for image in images:
        by_label.setdefault(image.label, []).append(image)

    rng = np.random.RandomState(seed)
    train, test = [], []
    for label in sorted(by_label):
        members = by_label[label]
        if len(members) < 2:
            raise DataIngestError(f"class {label} has {len(members)} image(s); at least 2 are needed to stratify")
        n_train = min(max(int(round(len(members) * train_fraction)), 1), len(members) - 1)
        train_idx, test_idx = train_test_split(np.arange(len(members)), train_size=n_train, random_state=rng)
        train.extend(members[i] for i in train_idx)
        test.extend(members[i] for i in test_idx)

    logger.info("Split %d images into %d train / %d test", len(train) + len(test), len(train), len(test))
    return DatasetSplit(train, test, seed, train_fraction)


def _pack(images, side):
    if not images:
        return (np.zeros((0, side, side, 3), dtype=np.float32), np.zeros(0, dtype=np.int64), np.zeros(0, dtype="<U1"))
    pixels = np.stack([image.pixels for image in images]).astype(np.float32)
    labels = np.array([image.label for image in images], dtype=np.int64)
    ids = np.array([image.image_id for image in images])
    return pixels, labels, ids


def _unpack(pixels, labels, ids):
    return [LabeledImage(pixels[i], int(labels[i]), str(ids[i])) for i in range(len(labels))]


def save_dataset_cache(path, dataset_split, catalog, side, config_hash=None):
    """Write a materialized split and its catalog into one archive."""
    train = _pack(dataset_split.train, side)
    test = _pack(dataset_split.test, side)
    header = {
        "config_hash": config_hash,
        "side": side,
        "seed": dataset_split.seed,
        "train_fraction": dataset_split.train_fraction,
        "catalog": catalog.to_dict(),
    }
    arrays = {
        "train_pixels": train[0], "train_labels": train[1], "train_ids": train[2],
        "test_pixels": test[0], "test_labels": test[1], "test_ids": test[2],
    }
    return save_archive(path, "dataset", arrays, header)


def load_dataset_cache(path, producer="ingest"):
    """Inverse of :func:`save_dataset_cache`; returns (split, catalog, header)."""
    header, arrays = load_archive(path, "dataset", producer=producer)
    catalog = ClassCatalog(**header["catalog"])
    dataset_split = DatasetSplit(
        train=_unpack(arrays["train_pixels"], arrays["train_labels"], arrays["train_ids"]),
        test=_unpack(arrays["test_pixels"], arrays["test_labels"], arrays["test_ids"]),
        seed=header["seed"],
        train_fraction=header["train_fraction"],
        class_names=list(catalog.names),
    )
    return dataset_split, catalog, header


def ingest(root, format, min_count, side, train_fraction, seed, max_classes=None, workers=1):
    """Run load -> catalog -> materialize -> split in one call."""
    annotations = load_dataset(root, format)
    catalog = build_catalog(annotations, min_count)
    if max_classes is not None and max_classes < catalog.num_classes:
        catalog = catalog.top(max_classes)
    images = materialize(annotations, catalog, side, workers=workers)
    dataset_split = split(images, train_fraction, seed)
    dataset_split.class_names = list(catalog.names)
    return dataset_split, catalog


def load_foreign_images(root, format, aliases, catalog, side, workers=1):
    """Ingest a transfer dataset, labelled with the source catalog via ``aliases``."""
    annotations = apply_aliases(load_dataset(root, format), aliases)
    return materialize(annotations, catalog, side, workers=workers)


def dataset_summary(images, catalog):
    """Per-class image counts as a DataFrame."""
    counts = Counter(image.label for image in images)
    return pd.DataFrame({
        "class": catalog.names,
        "images": [counts.get(i, 0) for i in range(catalog.num_classes)],
    })
