import json

import numpy as np
import pytest
from PIL import Image

from corrseg.datasets import ingest, load_label, write_manifest
from corrseg.errors import DataError


def _write_pair(root, stem, label_values, size=(16, 20)):
    img = np.random.default_rng(0).integers(0, 255, (*size, 3), dtype=np.uint8)
    Image.fromarray(img, "RGB").save(root / f"{stem}.jpg")
    lbl = np.asarray(label_values, dtype=np.uint8)
    Image.fromarray(lbl, "L").save(root / f"{stem}_lbl.png")
    return [f"{stem}.jpg", f"{stem}_lbl.png"]


def _write_manifest(root, pairs, classes, background_index=None, **extra):
    payload = {
        "root": str(root),
        "split": "val",
        "classes": classes,
        "background_index": background_index,
        "ignore_index": 255,
        "pairs": pairs,
        **extra,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(payload))
    return str(path)


def test_ingest_valid_manifest(tmp_path):
    labels = np.zeros((16, 20), dtype=np.uint8)
    labels[4:, 6:] = 2
    labels[0, 0] = 255
    pairs = [_write_pair(tmp_path, "a", labels)]
    path = _write_manifest(tmp_path, pairs, ["x", "y", "z"])
    manifest = ingest(path)
    assert manifest.classes == ("x", "y", "z")
    assert manifest.background_index is None
    assert manifest.ignore_index == 255
    assert len(manifest) == 1


def test_ingest_with_background_index(tmp_path):
    pairs = [_write_pair(tmp_path, "a", np.zeros((8, 8), np.uint8))]
    path = _write_manifest(tmp_path, pairs, ["background", "dog"], background_index=0)
    manifest = ingest(path)
    assert manifest.background_index == 0


def test_ingest_label_out_of_range_is_error(tmp_path):
    bad = np.full((8, 8), 7, dtype=np.uint8)  # >= C and != 255
    pairs = [_write_pair(tmp_path, "a", bad)]
    path = _write_manifest(tmp_path, pairs, ["x", "y"])
    with pytest.raises(DataError, match="outside"):
        ingest(path)
    # opting out defers the check to load time
    manifest = ingest(path, validate_labels=False)
    with pytest.raises(DataError, match="outside"):
        load_label(manifest.pairs[0][1], 2, 255)


def test_ingest_missing_file_names_path(tmp_path):
    pairs = [["ghost.jpg", "ghost_lbl.png"]]
    path = _write_manifest(tmp_path, pairs, ["x"])
    with pytest.raises(DataError, match="ghost.jpg"):
        ingest(path)


def test_ingest_empty_pairs_rejected(tmp_path):
    path = _write_manifest(tmp_path, [], ["x"])
    with pytest.raises(DataError, match="no image/label pairs"):
        ingest(path)


def test_ingest_empty_class_rejected(tmp_path):
    pairs = [_write_pair(tmp_path, "a", np.zeros((4, 4), np.uint8))]
    path = _write_manifest(tmp_path, pairs, ["x", " "])
    with pytest.raises(DataError, match="empty class names"):
        ingest(path)


def test_ingest_bad_background_index(tmp_path):
    pairs = [_write_pair(tmp_path, "a", np.zeros((4, 4), np.uint8))]
    path = _write_manifest(tmp_path, pairs, ["x"], background_index=5)
    with pytest.raises(DataError, match="background index"):
        ingest(path)


def test_relative_root_resolves_against_manifest_dir(tmp_path):
    sub = tmp_path / "data"
    sub.mkdir()
    pairs = [_write_pair(sub, "a", np.zeros((4, 4), np.uint8))]
    payload = {"root": "data", "classes": ["x"], "pairs": pairs}
    path = tmp_path / "m.json"
    path.write_text(json.dumps(payload))
    manifest = ingest(str(path))
    assert manifest.pairs[0][0].startswith(str(sub))


def test_manifest_round_trip(tmp_path, synth_benchmark):
    manifest = ingest(synth_benchmark)
    out = tmp_path / "again.json"
    write_manifest(manifest, str(out))
    again = ingest(str(out))
    assert again.classes == manifest.classes
    assert again.pairs == manifest.pairs
    assert again.ignore_index == manifest.ignore_index
