"""Benchmark ingestion via explicit JSON manifests.

Manifest schema:
    {root, split, classes[], background_index?, ignore_index?, pairs[[img, label]]}

Paths in `pairs` are relative to `root` (absolute paths pass through).
Labels are single-channel 8-bit images whose pixel values are class
indices, with `ignore_index` (default 255) skipped during scoring.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError

DEFAULT_IGNORE_INDEX = 255


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    split: str
    classes: tuple
    background_index: int | None
    ignore_index: int
    pairs: tuple  # ((image_path, label_path), ...) resolved

    def __len__(self):
        return len(self.pairs)


def _resolve(root, path):
    return path if os.path.isabs(path) else os.path.join(root, path)


def load_label(path, n_classes, ignore_index):
    """Label image -> (H, W) int array, validated against the class range."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P", "I", "I;16"):
                raise DataError(
                    f"label {path} has mode {img.mode!r}, expected indexed/gray"
                )
            arr = np.asarray(img)
    except (OSError, Image.UnidentifiedImageError) as e:
        raise DataError(f"cannot read label {path}: {e}") from e
    if arr.ndim != 2:
        raise DataError(f"label {path} is not single-channel")
    arr = arr.astype(np.int64)
    bad = (arr != ignore_index) & ((arr < 0) | (arr >= n_classes))
    if bad.any():
        values = sorted(np.unique(arr[bad]).tolist())[:8]
        raise DataError(
            f"label {path} has values {values} outside [0, {n_classes}) "
            f"and not ignore ({ignore_index})"
        )
    return arr


def load_image(path):
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, Image.UnidentifiedImageError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def ingest(manifest_path, validate_labels=True):
    """Read and validate a dataset manifest.

    Validation checks the schema, that every referenced file exists and,
    unless `validate_labels=False` (large datasets), that every label
    stays in the class range. Errors name the offending path.
    """
    try:
        with open(manifest_path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {manifest_path}: {e}") from e
    for key in ("root", "classes", "pairs"):
        if key not in raw:
            raise DataError(f"manifest {manifest_path} lacks required key {key!r}")
    classes = tuple(raw["classes"])
    if not classes or any(not str(c).strip() for c in classes):
        raise DataError(f"manifest {manifest_path} has empty class names")
    if not raw["pairs"]:
        raise DataError(f"manifest {manifest_path} lists no image/label pairs")
    ignore_index = int(raw.get("ignore_index", DEFAULT_IGNORE_INDEX))
    background_index = raw.get("background_index")
    if background_index is not None:
        background_index = int(background_index)
        if not 0 <= background_index < len(classes):
            raise DataError(
                f"background index {background_index} outside class range"
            )
    root = raw["root"]
    if not os.path.isabs(root):
        root = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), root)
    pairs = []
    for entry in raw["pairs"]:
        if not isinstance(entry, (list, tuple)) or len(entry) != 2:
            raise DataError(f"malformed pair entry in {manifest_path}: {entry!r}")
        img_path, label_path = (_resolve(root, p) for p in entry)
        for p in (img_path, label_path):
            if not os.path.exists(p):
                raise DataError(f"missing file referenced by manifest: {p}")
        pairs.append((img_path, label_path))
    manifest = DatasetManifest(
        root=root,
        split=str(raw.get("split", "")),
        classes=classes,
        background_index=background_index,
        ignore_index=ignore_index,
        pairs=tuple(pairs),
    )
    if validate_labels:
        for _, label_path in manifest.pairs:
            load_label(label_path, len(classes), ignore_index)
    return manifest


def write_manifest(manifest, path):
    """Serialize a manifest (inverse of ingest, paths kept absolute)."""
    payload = {
        "root": manifest.root,
        "split": manifest.split,
        "classes": list(manifest.classes),
        "background_index": manifest.background_index,
        "ignore_index": manifest.ignore_index,
        "pairs": [list(p) for p in manifest.pairs],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
