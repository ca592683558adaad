"""Raw-tensor serialization.

Two closely related on-disk layouts are used throughout:

* weight directory: many ``<name>.bin`` files plus a single
  ``manifest.json`` mapping ``name -> {shape, dtype}``;
* dump directory: per-tensor sidecars, ``<name>.bin`` plus
  ``<name>.json`` with ``{shape, dtype, layout: "row-major"}``.

All .bin files are raw little-endian float32 (or int64 for label/index
arrays in dumps), row-major, no header.
"""

import json
import os

import numpy as np

from .errors import DataError

_DTYPES = {"float32": np.float32, "int64": np.int64}


def _to_array(tensor):
    # torch tensors and array-likes both land here
    if hasattr(tensor, "detach"):
        tensor = tensor.detach().cpu().numpy()
    arr = np.asarray(tensor)
    if arr.dtype in (np.float64, np.float16):
        arr = arr.astype(np.float32)
    if arr.dtype not in (np.float32, np.int64):
        if np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.int64)
        else:
            arr = arr.astype(np.float32)
    return np.asarray(arr, order="C")  # ascontiguousarray would promote 0-dim to 1-dim


def write_tensor(path_stem, tensor):
    """Write ``<stem>.bin`` + ``<stem>.json`` sidecar, returning the array written."""
    arr = _to_array(tensor)
    with open(path_stem + ".bin", "wb") as f:
        f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    sidecar = {
        "shape": list(arr.shape),
        "dtype": str(arr.dtype),
        "layout": "row-major",
    }
    with open(path_stem + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")
    return arr


def read_tensor(path_stem):
    """Read a tensor written by :func:`write_tensor`."""
    with open(path_stem + ".json") as f:
        sidecar = json.load(f)
    dtype = _DTYPES.get(sidecar.get("dtype"))
    if dtype is None:
        raise DataError(f"unsupported dtype in sidecar {path_stem}.json: {sidecar.get('dtype')}")
    shape = tuple(sidecar["shape"])
    arr = np.fromfile(path_stem + ".bin", dtype=np.dtype(dtype).newbyteorder("<"))
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise DataError(
            f"{path_stem}.bin holds {arr.size} values, sidecar shape {shape} needs {expected}"
        )
    return arr.astype(dtype).reshape(shape)


def write_dump(dump_dir, tensors):
    """Dump a {name: tensor} mapping into ``dump_dir`` (created if missing)."""
    os.makedirs(dump_dir, exist_ok=True)
    for name, tensor in tensors.items():
        write_tensor(os.path.join(dump_dir, name), tensor)


def read_dump(dump_dir):
    """Load every ``*.bin``/``*.json`` pair in a dump directory."""
    if not os.path.isdir(dump_dir):
        raise DataError(f"not a dump directory: {dump_dir}")
    out = {}
    for fn in sorted(os.listdir(dump_dir)):
        if fn.endswith(".json") and os.path.exists(os.path.join(dump_dir, fn[:-5] + ".bin")):
            stem = os.path.join(dump_dir, fn[:-5])
            out[fn[:-5]] = read_tensor(stem)
    return out
