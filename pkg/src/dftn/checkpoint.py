"""Checkpoint container with integrity checking.

Layout: 4-byte magic, little-endian u32 format version, 32-byte SHA-256
of the payload, then the payload (a serialized state dictionary).  A
wrong magic or unknown version raises DataFormatError; a checksum
mismatch or truncation raises CorruptionError, so callers can tell "not
a checkpoint" apart from "a damaged checkpoint".
"""

import hashlib
import io
import struct

import torch

from .errors import CorruptionError, DataFormatError

_MAGIC = b"DFCK"
_VERSION = 1
_HEADER = struct.Struct("<I")


def save_checkpoint(path, payload):
    """Serialize a payload dict to path with checksum protection."""
    buf = io.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    digest = hashlib.sha256(blob).digest()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(_VERSION))
        fh.write(digest)
        fh.write(blob)


def load_checkpoint(path):
    """Read a payload saved by save_checkpoint, verifying format and integrity."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC):
        raise CorruptionError(f"{path}: too short to be a checkpoint")
    if blob[: len(_MAGIC)] != _MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a checkpoint file")
    offset = len(_MAGIC)
    if len(blob) < offset + _HEADER.size + 32:
        raise CorruptionError(f"{path}: truncated checkpoint header")
    (version,) = _HEADER.unpack_from(blob, offset)
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    offset += _HEADER.size
    digest = blob[offset:offset + 32]
    payload = blob[offset + 32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptionError(f"{path}: checksum mismatch, checkpoint is corrupt")
    return torch.load(io.BytesIO(payload), weights_only=False)
