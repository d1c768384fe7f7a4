"""Binary container for named float64 arrays plus a JSON header.

Layout::

    MAGIC (8 bytes) | header length (uint64 LE) | header JSON (UTF-8) | raw buffers

The header's ``tensors`` list records name, shape, byte offset and byte length
for each array; buffers are little-endian float64 in row-major order. The
header is written with sorted keys so identical content gives identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"CQATNSR1"
_LEN = struct.Struct("<Q")


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> bytes:
    manifest = []
    buffers = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        buffers.append(raw)
        offset += len(raw)
    header = {"meta": meta, "tensors": manifest, "payload_bytes": offset}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(header_bytes)) + header_bytes + b"".join(buffers)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < len(MAGIC) + _LEN.size or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a tensor container (bad magic or truncated preamble)")
    (hlen,) = _LEN.unpack_from(blob, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if len(blob) < start + hlen:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    payload = blob[start + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"payload is {len(payload)} bytes, manifest expects {header['payload_bytes']}"
        )
    arrays = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return arrays, header["meta"]


def atomic_write_bytes(path: str | os.PathLike, blob: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    atomic_write_bytes(path, dumps(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
