"""Binary array cache: one JSON manifest line followed by raw float64 blocks.

Blocks are little-endian ``float64`` in C order, concatenated in the order
listed in the manifest.  Writes are atomic (temp file + rename).
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import UnstableLabError

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class CacheError(UnstableLabError):
    """Raised when a cache file is missing, truncated or malformed."""


def cache_root() -> Path:
    root = os.environ.get("UNSTABLE_LAB_CACHE")
    return Path(root) if root else Path.home() / ".cache" / "unstable_lab"


def write_blocks(path, blocks: dict, meta: dict | None = None) -> Path:
    """Write named arrays and a JSON-serializable ``meta`` dict to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.ascontiguousarray(v, dtype=_DTYPE) for k, v in blocks.items()}
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "<f8",
        "blocks": [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()],
        "meta": meta or {},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for a in arrays.values():
                fh.write(a.tobytes(order="C"))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_header(path) -> dict:
    try:
        with open(path, "rb") as fh:
            line = fh.readline()
        header = json.loads(line)
    except (OSError, ValueError) as exc:
        raise CacheError(f"unreadable cache header in {path}: {exc}") from exc
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise CacheError(f"unsupported cache format in {path}")
    return header


def read_blocks(path) -> tuple[dict, dict]:
    """Return ``(blocks, meta)``; raises :class:`CacheError` on any inconsistency."""
    header = read_header(path)
    with open(path, "rb") as fh:
        fh.readline()
        payload = fh.read()
    out = {}
    offset = 0
    try:
        for spec in header["blocks"]:
            shape = tuple(int(s) for s in spec["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            nbytes = count * _DTYPE.itemsize
            if offset + nbytes > len(payload):
                raise CacheError(f"truncated block {spec['name']!r} in {path}")
            out[spec["name"]] = np.frombuffer(payload, _DTYPE, count, offset).reshape(shape).copy()
            offset += nbytes
    except (KeyError, TypeError, ValueError) as exc:
        raise CacheError(f"malformed cache manifest in {path}: {exc}") from exc
    if offset != len(payload):
        raise CacheError(f"trailing bytes in {path}")
    return out, header.get("meta", {})
