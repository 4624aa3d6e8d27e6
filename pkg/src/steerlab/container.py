"""Versioned binary container for subspace artifacts and model checkpoints.

Layout::

    STEERLAB\\n
    <one-line JSON header>\\n
    <little-endian float64 blocks, row-major, concatenated>

The header lists every entry with its metadata and block shapes, plus a
SHA-256 checksum of the payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, IoError, VersionMismatch

MAGIC = b"STEERLAB\n"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(entries: list[dict]) -> bytes:
    """Serialize entries of the form {"meta": {...}, "blocks": {name: ndarray}}."""
    payload = bytearray()
    header_entries = []
    for entry in entries:
        blocks = []
        for name, arr in entry["blocks"].items():
            a = np.ascontiguousarray(np.asarray(arr, dtype=_DTYPE))
            blocks.append({"name": name, "shape": list(a.shape)})
            payload += a.tobytes(order="C")
        header_entries.append({"meta": entry["meta"], "blocks": blocks})
    header = {
        "version": FORMAT_VERSION,
        "checksum": hashlib.sha256(bytes(payload)).hexdigest(),
        "entries": header_entries,
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + line + b"\n" + bytes(payload)


def decode(data: bytes) -> list[dict]:
    if not data.startswith(MAGIC):
        raise IoError("not a steerlab container")
    rest = data[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise IoError("truncated header")
    try:
        header = json.loads(rest[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IoError(f"unreadable header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported container version {header.get('version')!r}")
    payload = rest[nl + 1:]
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise ChecksumMismatch("payload checksum does not match header")
    entries = []
    offset = 0
    for h in header["entries"]:
        blocks = {}
        for b in h["blocks"]:
            shape = tuple(b["shape"])
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * _DTYPE.itemsize
            if offset + nbytes > len(payload):
                raise IoError("payload shorter than declared blocks")
            blocks[b["name"]] = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=offset).reshape(shape).copy()
            offset += nbytes
        entries.append({"meta": h["meta"], "blocks": blocks})
    if offset != len(payload):
        raise IoError("trailing bytes after declared blocks")
    return entries


def write(path, entries: list[dict]) -> None:
    try:
        atomic_write_bytes(path, encode(entries))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read(path) -> list[dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return decode(data)
