"""
Soft attention maps: representative selection, resizing and archives.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.distance import cdist

from artifact_store import array_digest, load_archive, save_archive
from errors import ConfigurationError, ShapeMismatchError, SignAttackError
from image_ops import bilinear_resize, to_uint8

logger = logging.getLogger(__name__)


@dataclass
class AttentionMap:
    weights: np.ndarray
    class_index: int
    source_image_id: str = ""

    @property
    def shape(self):
        return self.weights.shape

    def digest(self):
        return array_digest(np.asarray(self.weights, dtype=np.float64))


def ones_map(side, class_index):
    """All-ones map: the perturbation is applied everywhere."""
    return AttentionMap(np.ones((side, side), dtype=np.float32), class_index, "all-ones")


def select_representative(maps):
    """Map closest (Euclidean) to the class average; lowest source id on ties."""
    if not maps:
        raise SignAttackError("cannot select a representative from an empty list of attention maps")
    shapes = {m.weights.shape for m in maps}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"attention maps have mixed shapes {sorted(shapes)}")
    classes = {m.class_index for m in maps}
    if len(classes) != 1:
        raise ConfigurationError(f"attention maps mix classes {sorted(classes)}")

    ordered = sorted(maps, key=lambda m: m.source_image_id)
    flat = np.stack([np.asarray(m.weights, dtype=np.float64).ravel() for m in ordered])
    distances = cdist(flat, flat.mean(axis=0, keepdims=True))[:, 0]
    return ordered[int(np.argmin(distances))]


def finalize_map(attention_map, m, n):
    """Bilinear resize to (m, n), then min-max normalize into [0, 1].

    A constant map normalizes to all zeros.
    """
    if m < 2 or n < 2:
        raise ConfigurationError(f"map size must be at least 2x2, got {m}x{n}")
    weights = np.asarray(attention_map.weights, dtype=np.float64)
    if not np.all(np.isfinite(weights)):
        raise SignAttackError(f"attention map for class {attention_map.class_index} has non-finite weights")

    resized = bilinear_resize(weights, m, n)
    low, high = resized.min(), resized.max()
    if high > low:
        normalized = np.clip((resized - low) / (high - low), 0.0, 1.0)
    else:
        normalized = np.zeros_like(resized)
    return AttentionMap(normalized, attention_map.class_index, attention_map.source_image_id)


def save_map_archive(path, class_maps, class_names, config_hash=None, map_source="combined"):
    """All finalized class maps in one archive."""
    labels = sorted(class_maps)
    arrays = {
        "maps": np.stack([class_maps[label].weights for label in labels]).astype(np.float64),
        "labels": np.array(labels, dtype=np.int64),
        "source_ids": np.array([class_maps[label].source_image_id for label in labels]),
    }
    header = {"config_hash": config_hash, "class_names": list(class_names), "map_source": map_source}
    return save_archive(path, "attention_maps", arrays, header)


def load_map_archive(path, producer="train-attention"):
    """Returns ({label: AttentionMap}, header)."""
    header, arrays = load_archive(path, "attention_maps", producer=producer)
    class_maps = {
        int(label): AttentionMap(arrays["maps"][i], int(label), str(arrays["source_ids"][i]))
        for i, label in enumerate(arrays["labels"])
    }
    return class_maps, header


def export_map_images(class_maps, class_names, out_dir, scale=4):
    """Write each map as a grayscale PNG (nearest upscaled for viewing)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for label, attention_map in sorted(class_maps.items()):
        image = Image.fromarray(to_uint8(attention_map.weights))
        image = image.resize((image.width * scale, image.height * scale), Image.NEAREST)
        path = out_dir / f"attention_{label:02d}_{class_names[label]}.png"
        image.save(path)
        paths.append(path)
    logger.info("Exported %d attention maps to %s", len(paths), out_dir)
    return paths
