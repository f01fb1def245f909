"""PECK1 checkpoint container.

Layout: ``b"PECK1\\n"``, an 8-byte little-endian header length, a UTF-8
JSON header ``{model_type, config, parameters: {name: {shape, offset}}}``
and then the float32 little-endian parameter data in manifest order.
Offsets are byte offsets from the start of the data section.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from ..volume import DataError

MAGIC = b"PECK1\n"


def checkpoint_bytes(model_type: str, config: dict, params: dict) -> bytes:
    manifest, chunks, offset = {}, [], 0
    for name, arr in params.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        manifest[name] = {"shape": list(a.shape), "offset": offset}
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"model_type": model_type, "config": config, "parameters": manifest},
                        sort_keys=False, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_checkpoint(path, model_type: str, config: dict, params: dict) -> None:
    atomic_write(path, checkpoint_bytes(model_type, config, params))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, params)`` with params as float32 arrays in manifest order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise DataError(f"{path}: not a PECK1 checkpoint (bad magic)")
    if len(blob) < len(MAGIC) + 8:
        raise DataError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable checkpoint header ({exc})") from exc
    data = blob[start + hlen:]
    params, expected = {}, 0
    for name, entry in header["parameters"].items():
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 4
        off = entry["offset"]
        if off + n > len(data):
            raise DataError(f"{path}: truncated parameter data for {name!r}")
        params[name] = np.frombuffer(data, dtype="<f4", count=n // 4, offset=off).reshape(shape).astype(np.float32)
        expected = max(expected, off + n)
    if expected != len(data):
        raise DataError(f"{path}: {len(data)} data bytes, manifest describes {expected}")
    return header, params
