"""Shared binary container used for datasets, trajectories and distilled sets.

Layout::

    magic     4 bytes   (b"BVLD", b"BTRJ", b"BDST")
    version   1 byte    (1)
    meta_len  4 bytes   little-endian uint32
    meta      meta_len  UTF-8 JSON
    payload             float64 little-endian row-major blocks, in meta["blocks"] order

``meta["blocks"]`` is a list of ``{"name", "shape"}`` and ``meta["digest"]`` is
the SHA-256 of the payload bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

VERSION = 1
_HEADER = struct.Struct("<4sBI")


class ContainerError(Exception):
    """Base class for container format failures."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DigestError(ContainerError):
    pass


def payload_digest(blocks: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for arr in blocks.values():
        h.update(_block_bytes(arr))
    return h.hexdigest()


def _block_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def encode(magic: bytes, meta: dict, blocks: dict[str, np.ndarray]) -> bytes:
    meta = dict(meta)
    meta["blocks"] = [{"name": k, "shape": list(np.shape(v))} for k, v in blocks.items()]
    payload = b"".join(_block_bytes(v) for v in blocks.values())
    meta["digest"] = hashlib.sha256(payload).hexdigest()
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(magic, VERSION, len(meta_bytes)) + meta_bytes + payload


def decode(magic: bytes, data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 4:
        raise TruncatedError("file shorter than the magic")
    if data[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedError("file shorter than the header")
    _, version, meta_len = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"unsupported container version {version} (expected {VERSION})")
    start = _HEADER.size
    if len(data) < start + meta_len:
        raise TruncatedError("metadata truncated")
    try:
        meta = json.loads(data[start : start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable metadata: {exc}") from None
    offset = start + meta_len
    blocks: dict[str, np.ndarray] = {}
    for spec in meta["blocks"]:
        shape = tuple(spec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(data) < offset + nbytes:
            raise TruncatedError(f"payload truncated in block '{spec['name']}'")
        arr = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset)
        blocks[spec["name"]] = arr.astype(np.float64).reshape(shape)
        offset += nbytes
    if len(data) != offset:
        raise ContainerError(f"{len(data) - offset} trailing bytes after payload")
    digest = hashlib.sha256(data[start + meta_len :]).hexdigest()
    if digest != meta.get("digest"):
        raise DigestError("payload digest mismatch")
    return meta, blocks


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, magic: bytes, meta: dict, blocks: dict[str, np.ndarray]) -> None:
    write_atomic(path, encode(magic, meta, blocks))


def load(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(magic, Path(path).read_bytes())


def config_digest(obj) -> str:
    """Stable SHA-256 of a JSON-serializable object."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
