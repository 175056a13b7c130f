"""Self-describing record files used for checkpoints, datasets and sample sets.

Layout::

    NSYNC-RECORD <version>\\n
    <one-line JSON header>\\n
    <raw little-endian array payload>

The header carries ``kind``, free-form metadata, and an ``arrays`` table of
``{name, dtype, shape, offset}``. Writing is byte-deterministic: no
timestamps, sorted JSON keys, and an atomic rename into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from nsync.errors import ConfigError

MAGIC = "NSYNC-RECORD"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "int64": "<i8"}


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | os.PathLike, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def encode_record(kind: str, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            dtype = "float64"
        elif arr.dtype.kind in "iu":
            dtype = "int64"
        else:
            raise TypeError(f"unsupported dtype for {name!r}: {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"kind": kind, "format_version": FORMAT_VERSION, "meta": dict(meta), "arrays": table}
    head = f"{MAGIC} {FORMAT_VERSION}\n" + json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n"
    return head.encode("utf-8") + b"".join(chunks)


def write_record(path, kind: str, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_record(kind, meta, arrays))


def read_record(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a record; returns ``(meta, arrays)``.

    Raises ConfigError on a bad magic line, an unsupported version, a kind
    mismatch, or a truncated payload.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such file: {path}")
    data = path.read_bytes()
    try:
        nl1 = data.index(b"\n")
        nl2 = data.index(b"\n", nl1 + 1)
    except ValueError:
        raise ConfigError(f"{path}: not an nsync record") from None
    magic = data[:nl1].decode("utf-8", "replace").split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise ConfigError(f"{path}: not an nsync record")
    if magic[1] != str(FORMAT_VERSION):
        raise ConfigError(f"{path}: record format version {magic[1]} is not supported (expected {FORMAT_VERSION})")
    header = json.loads(data[nl1 + 1 : nl2])
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: header version mismatch")
    if kind is not None and header.get("kind") != kind:
        raise ConfigError(f"{path}: expected a {kind} record, found {header.get('kind')!r}")
    payload = memoryview(data)[nl2 + 1 :]
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise ConfigError(f"{path}: truncated payload for array {entry['name']!r}")
        arr = np.frombuffer(payload[start:end], dtype=dtype).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64 if entry["dtype"] == "float64" else np.int64)
    return header["meta"], arrays
