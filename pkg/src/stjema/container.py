"""Binary tensor container used for checkpoints and dynamic-graph caches.

Layout (all integers little-endian)::

    magic        8 bytes   b"STJEMA01"
    header_len   u32
    header       header_len bytes of UTF-8 JSON (sorted keys); carries
                 schema_version, kind, config_hash, step and free-form metadata
    n_tensors    u32
    per tensor:
      name_len   u16, name (UTF-8)
      dtype      u8   0=float64 1=float32 2=int64 3=uint8
      ndim       u8, then ndim x u64 dims
      data       raw little-endian bytes, C order
    checksum     32 bytes  SHA-256 of everything between magic and checksum

Files are written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"STJEMA01"
SCHEMA_VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
TAGS = {v.str: k for k, v in DTYPES.items()}


def encode_container(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    header = {"schema_version": SCHEMA_VERSION, **header}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(hbytes)), hbytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tag = TAGS.get(le.dtype.str)
        if tag is None:
            raise FormatError("unsupported-dtype", f"{name}: {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(le).tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + hashlib.sha256(payload).digest()


def decode_container(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise FormatError("bad-magic", "not an STJEMA01 container")
    payload, digest = blob[8:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise FormatError("checksum-mismatch", "container payload is corrupted")
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(payload):
            raise FormatError("truncated", "container ends early")
        out = payload[pos:pos + n]
        pos += n
        return out

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise FormatError("schema-version", f"unsupported container schema {header.get('schema_version')}")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in DTYPES:
            raise FormatError("unsupported-dtype", f"{name}: tag {tag}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(take(size), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if pos != len(payload):
        raise FormatError("trailing-bytes", "unexpected data after tensor table")
    return header, tensors


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_container(header, tensors)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes())
