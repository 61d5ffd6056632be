"""Tensor archive: a directory holding ``manifest.json`` plus one raw
little-endian binary file per tensor.

The same layout is used for head models, model checkpoints, datasets and
embedding stores, so anything written by one component can be inspected
with a few lines of numpy.
"""

from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np

from .errors import ParseError

MANIFEST = "manifest.json"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4", "int64": "<i8"}


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".bin"


def save_archive(path, tensors: dict, meta: dict | None = None, dtype: str = "float32") -> Path:
    """Write ``tensors`` (name -> array) to ``path``.

    Floating tensors are stored as ``dtype``; integer tensors as int32.
    ``meta`` is stored verbatim under the ``"meta"`` key of the manifest.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    used = set()
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        kind = "int32" if np.issubdtype(arr.dtype, np.integer) else dtype
        fname = _safe_name(name)
        if fname in used:
            fname = f"{fname[:-4]}_{len(used)}.bin"
        used.add(fname)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[kind])
        data.tofile(path / fname)
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": kind}
    manifest = {"format": "exprflow-tensor-archive", "version": 1,
                "byte_order": "little", "tensors": entries, "meta": meta or {}}
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path / MANIFEST)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{mpath}: line {exc.lineno}: {exc.msg}") from exc
    if "tensors" not in manifest:
        raise ParseError(f"{mpath}: missing key 'tensors'")
    return manifest


def load_archive(path) -> tuple[dict, dict]:
    """Inverse of :func:`save_archive`; returns ``(tensors, meta)``."""
    path = Path(path)
    manifest = read_manifest(path)
    tensors = {}
    for name, entry in manifest["tensors"].items():
        try:
            kind, shape, fname = entry["dtype"], entry["shape"], entry["file"]
        except KeyError as exc:
            raise ParseError(f"{path / MANIFEST}: tensor '{name}' missing key {exc}") from exc
        if kind not in _DTYPES:
            raise ParseError(f"{path / MANIFEST}: tensor '{name}' has unknown dtype {kind!r}")
        arr = np.fromfile(path / fname, dtype=_DTYPES[kind])
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise ParseError(f"{path / fname}: expected {expected} values, found {arr.size}")
        tensors[name] = arr.reshape(shape).astype(arr.dtype.newbyteorder("="))
    return tensors, manifest.get("meta", {})
