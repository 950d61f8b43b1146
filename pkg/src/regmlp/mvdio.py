"""MVD container: the package's portable binary format for volumes, label
maps, and displacement fields.

Layout (little-endian throughout):

    magic   4 bytes  "MVD1"
    kind    u8       1 = volume, 2 = labels, 3 = field
    rank    u8       spatial rank D
    reserved u16     0
    extents D x u32  spatial extents
    channels u32     1 for volumes/labels, D for fields
    payload          row-major; 4-byte IEEE reals (kinds 1, 3),
                     4-byte unsigned integers (kind 2)
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MVD1"

KIND_VOLUME = 1
KIND_LABELS = 2
KIND_FIELD = 3

_KIND_NAMES = {KIND_VOLUME: "volume", KIND_LABELS: "labels", KIND_FIELD: "field"}
_NAME_KINDS = {v: k for k, v in _KIND_NAMES.items()}


class MvdError(ValueError):
    """Base class for malformed MVD data."""


class BadMagicError(MvdError):
    pass


class UnknownKindError(MvdError):
    pass


class TruncatedPayloadError(MvdError):
    pass


def header_bytes(kind, extents, channels):
    rank = len(extents)
    return (
        MAGIC
        + struct.pack("<BBH", kind, rank, 0)
        + struct.pack(f"<{rank}I", *extents)
        + struct.pack("<I", channels)
    )


def mvd_write(path, payload, kind):
    """Write a volume ([*S] float), label map ([*S] int), or field
    ([*S, D] float) to `path`.  Floats are stored as 4-byte IEEE reals."""
    if kind not in _NAME_KINDS:
        raise UnknownKindError(f"unknown payload kind {kind!r}")
    code = _NAME_KINDS[kind]
    arr = np.asarray(payload)
    if code == KIND_FIELD:
        if arr.ndim < 2 or arr.shape[-1] != arr.ndim - 1:
            raise MvdError(
                f"field payload must be [*spatial, D], got shape {arr.shape}"
            )
        extents = arr.shape[:-1]
        channels = arr.shape[-1]
        data = arr.astype("<f4").tobytes(order="C")
    elif code == KIND_VOLUME:
        extents = arr.shape
        channels = 1
        data = arr.astype("<f4").tobytes(order="C")
    else:
        if not np.issubdtype(arr.dtype, np.integer):
            raise MvdError("label payload must be integer valued")
        if np.any(arr < 0):
            raise MvdError("label values must be non-negative")
        extents = arr.shape
        channels = 1
        data = arr.astype("<u4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header_bytes(code, extents, channels))
        fh.write(data)


def mvd_read(path):
    """Read an MVD file; returns (array, kind) with kind one of
    "volume" / "labels" / "field".  Floats come back as float64 (the exact
    stored float32 values), labels as int64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"not an MVD file: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise TruncatedPayloadError("header truncated")
    code, rank, reserved = struct.unpack_from("<BBH", blob, 4)
    if code not in _KIND_NAMES:
        raise UnknownKindError(f"unknown kind byte {code}")
    if reserved != 0:
        raise MvdError(f"reserved header field must be 0, got {reserved}")
    head = 8 + 4 * rank + 4
    if len(blob) < head:
        raise TruncatedPayloadError("header truncated")
    extents = struct.unpack_from(f"<{rank}I", blob, 8)
    (channels,) = struct.unpack_from("<I", blob, 8 + 4 * rank)
    count = int(np.prod(extents, dtype=np.int64)) * channels
    expected = head + 4 * count
    if len(blob) < expected:
        raise TruncatedPayloadError(
            f"payload truncated: need {expected} bytes, have {len(blob)}"
        )
    if code == KIND_LABELS:
        if channels != 1:
            raise MvdError("label maps must have one channel")
        arr = np.frombuffer(blob, dtype="<u4", count=count, offset=head)
        return arr.reshape(extents).astype(np.int64), "labels"
    if code == KIND_VOLUME:
        if channels != 1:
            raise MvdError("volumes must have one channel")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=head)
        return arr.reshape(extents).astype(np.float64), "volume"
    if channels != rank:
        raise MvdError(f"field channels {channels} must equal rank {rank}")
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=head)
    return arr.reshape(extents + (channels,)).astype(np.float64), "field"
