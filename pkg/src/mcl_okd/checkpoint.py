"""Version-stamped, checksummed checkpoint files.

Layout (little-endian)::

    offset  size  field
    0       8     magic b"MCLOKDCK"
    8       4     format version (uint32)
    12      8     payload length in bytes (uint64)
    20      32    SHA-256 of the payload
    52      ...   payload: a ``torch.save`` pickle of the state dictionary

The header and checksum are verified before the payload is deserialized, so
a damaged file never yields a partially restored state.
"""
import hashlib
import io
import os
import struct
from pathlib import Path

import torch

from .errors import CheckpointIntegrityError

MAGIC = b"MCLOKDCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")


def dump_bytes(state):
    buf = io.BytesIO()
    torch.save(state, buf)
    payload = buf.getvalue()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(payload), hashlib.sha256(payload).digest())
    return header + payload


def load_bytes(blob, source="<bytes>"):
    if len(blob) < _HEADER.size:
        raise CheckpointIntegrityError(f"{source}: file too short to be a checkpoint")
    magic, version, length, digest = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointIntegrityError(f"{source}: not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointIntegrityError(f"{source}: unsupported checkpoint version {version}")
    payload = blob[_HEADER.size :]
    if len(payload) != length:
        raise CheckpointIntegrityError(f"{source}: truncated payload ({len(payload)} of {length} bytes)")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointIntegrityError(f"{source}: checksum mismatch")
    return torch.load(io.BytesIO(payload), weights_only=False)


def save(state, path):
    """Write atomically: a crash mid-write leaves any previous file intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(dump_bytes(state))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load(path):
    path = Path(path)
    return load_bytes(path.read_bytes(), source=str(path))
