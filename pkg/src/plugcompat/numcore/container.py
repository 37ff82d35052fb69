"""Binary container for named float64 tensors.

Layout (all integers little-endian)::

    b"PCMP" | u32 version | u32 count
    per tensor: u32 name_len | name (UTF-8) | u32 rank | rank x u64 dims | f64 payload

Tensors are written in sorted-name order so equal dicts give equal bytes.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct

import numpy as np

from plugcompat.errors import ContainerError

MAGIC = b"PCMP"
VERSION = 1


def dumps(tensors):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob):
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise ContainerError("not a PCMP container (bad magic)")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos : pos + name_len]).decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(view, dtype="<f8", count=size, offset=pos).astype(np.float64)
            pos += 8 * size
            out[name] = arr.reshape(dims)
    except (struct.error, ValueError) as exc:
        raise ContainerError(f"truncated container: {exc}") from exc
    if pos != len(view):
        raise ContainerError("trailing bytes after last tensor")
    return out


def save(path, tensors):
    try:
        with open(path, "wb") as fh:
            fh.write(dumps(tensors))
    except OSError as exc:
        raise ContainerError(f"cannot write {path}: {exc}") from exc


def load(path):
    if not os.path.exists(path):
        raise ContainerError(f"no such container: {path}")
    with open(path, "rb") as fh:
        return loads(fh.read())


def checksum(tensors):
    return hashlib.sha256(dumps(tensors)).hexdigest()
