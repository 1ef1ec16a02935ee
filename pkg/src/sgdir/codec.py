"""SGV binary volumes.

Layout (little endian)::

    b"SGV1" | rank u8 | channels u8 | dtype u8 | reserved u8
    | dims u32 * rank | spacing f32 * rank | payload

``dtype`` is 0 for float32 and 1 for uint16.  The payload is row-major over
the grid with the channel index varying fastest.
"""
from __future__ import annotations

import struct
from typing import Optional, Tuple

import numpy as np

from .errors import CodecError
from .grid import DisplacementField, GridGeometry, LabelMap, ScalarImage

MAGIC = b"SGV1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2")}
CODES = {np.dtype("<f4"): 0, np.dtype("<u2"): 1}


def encode(array: np.ndarray, spacing: Optional[Tuple[float, ...]] = None) -> bytes:
    """Serialize ``array`` of shape ``(C, *dims)``.  Float arrays are stored
    as float32, integer arrays as uint16."""
    array = np.asarray(array)
    if np.issubdtype(array.dtype, np.floating):
        dt = np.dtype("<f4")
    elif np.issubdtype(array.dtype, np.integer) or array.dtype == bool:
        if array.size and (array.min() < 0 or array.max() > 0xFFFF):
            raise CodecError("integer data does not fit uint16")
        dt = np.dtype("<u2")
    else:
        raise CodecError(f"unsupported dtype {array.dtype}")
    channels, dims = array.shape[0], array.shape[1:]
    rank = len(dims)
    if rank not in (2, 3) or not 1 <= channels <= 255:
        raise CodecError(f"cannot encode shape {array.shape}")
    spacing = (1.0,) * rank if spacing is None else tuple(spacing)
    head = MAGIC + struct.pack("<4B", rank, channels, CODES[dt], 0)
    head += struct.pack(f"<{rank}I", *dims) + struct.pack(f"<{rank}f", *spacing)
    payload = np.moveaxis(array, 0, -1).astype(dt)
    return head + np.ascontiguousarray(payload).tobytes()


def decode(raw: bytes) -> Tuple[np.ndarray, Tuple[float, ...]]:
    """Inverse of :func:`encode`: ``(array (C, *dims), spacing)``."""
    if raw[:4] != MAGIC:
        raise CodecError(f"bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise CodecError("truncated header")
    rank, channels, code, _ = struct.unpack("<4B", raw[4:8])
    if code not in DTYPES:
        raise CodecError(f"unknown dtype code {code}")
    if rank not in (2, 3) or channels == 0:
        raise CodecError(f"invalid rank {rank} or channel count {channels}")
    off = 8 + 8 * rank
    if len(raw) < off:
        raise CodecError("truncated header")
    dims = struct.unpack(f"<{rank}I", raw[8:8 + 4 * rank])
    spacing = tuple(float(s) for s in struct.unpack(f"<{rank}f", raw[8 + 4 * rank:off]))
    dt = DTYPES[code]
    expected = int(np.prod(dims)) * channels * dt.itemsize
    if len(raw) - off != expected:
        raise CodecError(f"payload has {len(raw) - off} bytes, expected {expected}")
    data = np.frombuffer(raw[off:], dtype=dt).reshape(tuple(dims) + (channels,))
    return np.moveaxis(data, -1, 0).copy(), spacing


def write(path, array, spacing=None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array, spacing))


def read(path) -> Tuple[np.ndarray, Tuple[float, ...]]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def write_image(path, img: ScalarImage) -> None:
    write(path, img.values[None], img.geom.spacing)


def write_labels(path, labels: LabelMap) -> None:
    write(path, labels.labels[None], labels.geom.spacing)


def write_field(path, u: DisplacementField) -> None:
    write(path, u.vectors, u.geom.spacing)


def _single(path):
    data, spacing = read(path)
    if data.shape[0] != 1:
        raise CodecError(f"{path}: expected one channel, found {data.shape[0]}")
    return data[0], spacing


def read_image(path) -> ScalarImage:
    values, spacing = _single(path)
    return ScalarImage(GridGeometry(values.shape, spacing), values.astype(np.float32))


def read_labels(path) -> LabelMap:
    values, spacing = _single(path)
    return LabelMap(GridGeometry(values.shape, spacing), values.astype(np.int64))


def read_field(path) -> DisplacementField:
    data, spacing = read(path)
    geom = GridGeometry(data.shape[1:], spacing)
    if data.shape[0] != geom.rank:
        raise CodecError(f"{path}: field needs {geom.rank} channels, found {data.shape[0]}")
    return DisplacementField(geom, data.astype(np.float32))
