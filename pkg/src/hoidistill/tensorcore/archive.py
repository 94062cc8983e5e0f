"""Tensor archive: ``manifest.json`` + ``data.bin`` (little-endian float32).

Manifest entries map name -> {shape, dtype: "f32", offset, length}, where
``offset`` and ``length`` are counted in bytes into ``data.bin``. Entries are
written in sorted-name order so identical content gives identical bytes.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
DATA = "data.bin"
_LE_F32 = np.dtype("<f4")


def save_archive(path, tensors, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {}
    offset = 0
    with open(path / DATA, "wb") as fh:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype=_LE_F32)
            raw = arr.tobytes(order="C")
            fh.write(raw)
            manifest[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset, "length": len(raw)}
            offset += len(raw)
    doc = {"tensors": manifest}
    if extra:
        doc["extra"] = extra
    (path / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def read_manifest(path):
    doc = json.loads((Path(path) / MANIFEST).read_text())
    return doc["tensors"], doc.get("extra", {})


def load_archive(path):
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise FileNotFoundError(f"no tensor archive at {path}")
    manifest, _ = read_manifest(path)
    blob = (path / DATA).read_bytes()
    out = {}
    for name, entry in manifest.items():
        if entry.get("dtype") != "f32":
            raise ValueError(f"unsupported dtype {entry.get('dtype')!r} for {name!r}")
        start, length = entry["offset"], entry["length"]
        arr = np.frombuffer(blob, dtype=_LE_F32, count=length // 4, offset=start)
        out[name] = arr.reshape(entry["shape"]).astype(np.float32)
    return out
