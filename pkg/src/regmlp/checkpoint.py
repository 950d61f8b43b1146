"""Checkpoint archive: parameter name -> (shape, little-endian float64 data).

The container is an uncompressed zip with one ``<name>.bin`` entry per
parameter plus a ``manifest.txt`` listing names in canonical (model
declaration) order.  Entry layout: u32 rank, rank x u32 extents, then the
row-major float64 payload, all little-endian.  Timestamps are pinned so
identical weights produce bit-identical files.
"""

from __future__ import annotations

import struct
import zipfile

import numpy as np

MANIFEST = "manifest.txt"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    """Archive malformed or incompatible with the target model."""


def _encode(arr):
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes(order="C")


def _decode(blob):
    (rank,) = struct.unpack_from("<I", blob, 0)
    shape = struct.unpack_from(f"<{rank}I", blob, 4)
    data = np.frombuffer(blob, dtype="<f8", offset=4 + 4 * rank)
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError("payload length does not match declared shape")
    return data.reshape(shape).astype(np.float64)


def save_checkpoint(path, model):
    names = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, p in model.named_parameters():
            if name in names:
                raise CheckpointError(f"duplicate parameter name {name!r}")
            names.append(name)
            info = zipfile.ZipInfo(name + ".bin", date_time=_EPOCH)
            zf.writestr(info, _encode(p.data))
        info = zipfile.ZipInfo(MANIFEST, date_time=_EPOCH)
        zf.writestr(info, "".join(n + "\n" for n in names))


def load_checkpoint(path, model):
    """Restore weights in place; raises CheckpointError on any mismatch."""
    params = dict(model.named_parameters())
    with zipfile.ZipFile(path, "r") as zf:
        try:
            listed = zf.read(MANIFEST).decode().split()
        except KeyError:
            raise CheckpointError("missing manifest") from None
        if set(listed) != set(params):
            missing = sorted(set(params) - set(listed))[:3]
            extra = sorted(set(listed) - set(params))[:3]
            raise CheckpointError(
                f"parameter sets differ (missing {missing}, unexpected {extra})"
            )
        for name in listed:
            arr = _decode(zf.read(name + ".bin"))
            if arr.shape != params[name].shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: "
                    f"{arr.shape} vs {params[name].shape}"
                )
            params[name].data = np.ascontiguousarray(arr)
