"""Checkpoint container: a zip archive with a JSON manifest and raw float64 blobs.

Layout (all entries stored uncompressed, timestamps pinned to 1980-01-01 so
identical content always produces identical bytes)::

    manifest.json          UTF-8 JSON, keys sorted, 2-space indent
    blobs/<name>.f64       little-endian IEEE-754 float64, C order, no header

Every blob is listed in ``manifest["blobs"]`` as ``{name: {"shape": [...],
"path": "blobs/<name>.f64"}}``; the shape is the only metadata needed to
rebuild the array.  Model checkpoints, recorder debug dumps and the dataset
cache all share this format.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import InputError

_EPOCH = (1980, 1, 1, 0, 0, 0)
_DTYPE = np.dtype("<f8")


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def encode_blob(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()


def decode_blob(raw: bytes, shape) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    arr = np.frombuffer(raw, dtype=_DTYPE)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise InputError(f"blob holds {arr.size} values, manifest shape {shape} needs {int(np.prod(shape))}")
    return arr.astype(np.float64).reshape(shape)


def write_container(path, manifest: dict, arrays: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["blobs"] = {
        name: {"shape": list(np.shape(arr)), "path": f"blobs/{name}.f64"}
        for name, arr in arrays.items()
    }
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry("manifest.json"), text.encode("utf-8"))
        for name in sorted(arrays):
            zf.writestr(_entry(manifest["blobs"][name]["path"]), encode_blob(arrays[name]))
    return path


def read_container(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise InputError(f"cannot open container {path}: {exc}") from exc
    with zf:
        manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
        arrays = {
            name: decode_blob(zf.read(entry["path"]), entry["shape"])
            for name, entry in manifest.get("blobs", {}).items()
        }
    return manifest, arrays


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
