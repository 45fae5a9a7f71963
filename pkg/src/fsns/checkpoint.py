"""Versioned binary checkpoints with CRC integrity and atomic replacement.

Layout (all integers little-endian):

    8 bytes   magic b"FSNSCKPT"
    uint32    format version
    uint32    header length L
    L bytes   UTF-8 JSON header (config hash, step, RNG identity, grid, shape)
    payload   coefficient array as float64 re/im interleaved, C order
    uint32    CRC32 of everything above

Files are written to a temporary name in the same directory and moved into
place with os.replace, so a reader never sees a partial checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib

import numpy as np

MAGIC = b"FSNSCKPT"
VERSION = 1


class CheckpointError(Exception):
    """Malformed checkpoint file."""


class CRCError(CheckpointError):
    """Checksum mismatch: the file is truncated or corrupted."""


class VersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


def config_fingerprint(mapping: dict) -> str:
    """Stable short hash of a JSON-serializable configuration mapping."""
    blob = json.dumps(mapping, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path: str, coeffs: np.ndarray, header: dict) -> None:
    """Write coefficients and header atomically; complex input of any precision.

    The caller owns the header contents; `shape` and `state_dtype` are filled
    in here so `load_checkpoint` can reconstruct the array.
    """
    arr = np.ascontiguousarray(coeffs)
    if not np.iscomplexobj(arr):
        raise ValueError("checkpoint payload must be a complex array")
    header = dict(header)
    header["shape"] = list(arr.shape)
    header["state_dtype"] = str(arr.dtype)
    hj = json.dumps(header, sort_keys=True).encode()
    payload = arr.astype("<c16", copy=False).view("<f8").tobytes()
    blob = MAGIC + struct.pack("<II", VERSION, len(hj)) + hj + payload
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict, np.ndarray]:
    """Read a checkpoint; returns (header, complex128 array).

    Raises CheckpointError/VersionError/CRCError on malformed input.  The
    array is returned in float64 precision regardless of the precision the
    run used; `header["state_dtype"]` records the original for the caller.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CRCError(f"{path}: CRC mismatch")
    version, hlen = struct.unpack("<II", blob[len(MAGIC) : len(MAGIC) + 8])
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, expected {VERSION}")
    hstart = len(MAGIC) + 8
    header = json.loads(blob[hstart : hstart + hlen].decode())
    data = blob[hstart + hlen : -4]
    shape = tuple(header["shape"])
    count = int(np.prod(shape)) if shape else 1
    if len(data) != count * 16:
        raise CheckpointError(f"{path}: payload size {len(data)}, expected {count * 16}")
    flat = np.frombuffer(data, dtype="<f8").copy().view(np.complex128)
    return header, flat.reshape(shape)
