"""Named-array container used for checkpoints and backbone weight files.

A container is an ``.npz`` archive: one entry per named array plus a
``__manifest__`` entry holding UTF-8 JSON with

* ``format`` / ``version`` - identify the file kind,
* ``arrays`` - ``{name: {"shape": [...], "dtype": str}}``,
* ``sha256`` - digest over names, shapes and raw bytes (sorted by name),
* any extra metadata supplied by the writer (config echo, counters, ...).
"""
from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np

MANIFEST_KEY = "__manifest__"


class ContainerError(ValueError):
    pass


def _digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(str(a.dtype).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def write_container(path: str | Path, arrays: dict[str, np.ndarray], *, kind: str, version: int = 1,
                    meta: dict | None = None) -> Path:
    arrays = {k: np.asarray(v) for k, v in arrays.items()}
    if MANIFEST_KEY in arrays:
        raise ContainerError(f"{MANIFEST_KEY!r} is reserved")
    manifest = {
        "format": kind,
        "version": version,
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in sorted(arrays.items())},
        "sha256": _digest(arrays),
        **(meta or {}),
    }
    blob = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **{MANIFEST_KEY: blob}, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def read_container(path: str | Path, *, kind: str | None = None,
                   version: int | None = None) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise ContainerError(f"no such file: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except Exception as exc:
        raise ContainerError(f"{path} is not a readable container: {exc}") from exc
    if MANIFEST_KEY not in data:
        raise ContainerError(f"{path} has no manifest")
    manifest = json.loads(bytes(data.pop(MANIFEST_KEY)).decode())
    if kind is not None and manifest.get("format") != kind:
        raise ContainerError(f"{path}: expected format {kind!r}, found {manifest.get('format')!r}")
    if version is not None and manifest.get("version") != version:
        raise ContainerError(f"{path}: unsupported version {manifest.get('version')} (expected {version})")
    for name, info in manifest["arrays"].items():
        if name not in data:
            raise ContainerError(f"{path}: manifest entry {name!r} missing from archive")
        if list(data[name].shape) != info["shape"]:
            raise ContainerError(f"{path}: entry {name!r} has shape {list(data[name].shape)}, "
                                 f"manifest says {info['shape']}")
    if _digest(data) != manifest["sha256"]:
        raise ContainerError(f"{path}: checksum mismatch")
    return data, manifest
