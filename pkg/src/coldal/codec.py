"""CAL3D grid file codec.

Layout (little endian)::

    magic   6 bytes  "CAL3D\\0"
    version u16      (= 1)
    kind    u8       0 = Volume3D, 1 = LabelMap, 2 = ProbMap
    channels u32
    dims    u32 x 3  (D, H, W)
    spacing f32 x 3
    payload          f32 for kinds 0/2, u8 for kind 1, C order, channel-major

LabelMap files store the class count in ``channels``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError, InvalidArgumentError, MagicMismatchError, TruncatedPayloadError, VersionMismatchError
from .volume import LabelMap, ProbMap, Volume3D

MAGIC = b"CAL3D\x00"
VERSION = 1
KIND_VOLUME, KIND_LABEL, KIND_PROB = 0, 1, 2
_HEADER = struct.Struct("<6sHBI3I3f")

Grid = Union[Volume3D, LabelMap, ProbMap]


def encode(grid: Grid, spacing=(1.0, 1.0, 1.0)) -> bytes:
    if isinstance(grid, Volume3D):
        kind, channels, payload = KIND_VOLUME, 1, grid.data.astype("<f4")
        spacing = grid.spacing
        dims = grid.shape
    elif isinstance(grid, LabelMap):
        if grid.num_classes > 256:
            raise InvalidArgumentError("CAL3D label maps hold at most 256 classes")
        kind, channels, payload = KIND_LABEL, grid.num_classes, grid.data.astype(np.uint8)
        dims = grid.shape
    elif isinstance(grid, ProbMap):
        kind, channels, payload = KIND_PROB, grid.num_classes, grid.data.astype("<f4")
        dims = grid.shape
    else:
        raise TypeError(f"cannot encode {type(grid).__name__}")
    header = _HEADER.pack(MAGIC, VERSION, kind, channels, *dims, *spacing)
    return header + np.ascontiguousarray(payload).tobytes()


def decode(buf: bytes, volume_id: str = "") -> Grid:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise MagicMismatchError("not a CAL3D file (magic mismatch)")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("header truncated")
    _, version, kind, channels, d, h, w, sx, sy, sz = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported CAL3D version {version}")
    body = buf[_HEADER.size:]
    if kind == KIND_LABEL:
        count, dtype = d * h * w, np.uint8
    elif kind in (KIND_VOLUME, KIND_PROB):
        count = (channels if kind == KIND_PROB else 1) * d * h * w
        dtype = np.dtype("<f4")
    else:
        raise FormatError(f"unknown grid kind {kind}")
    if len(body) != count * np.dtype(dtype).itemsize:
        raise TruncatedPayloadError(
            f"payload has {len(body)} bytes, header dims imply {count * np.dtype(dtype).itemsize}"
        )
    data = np.frombuffer(body, dtype=dtype)
    if kind == KIND_VOLUME:
        return Volume3D(volume_id, data.reshape(d, h, w).astype(np.float32), (sx, sy, sz))
    if kind == KIND_LABEL:
        return LabelMap(data.reshape(d, h, w).copy(), num_classes=channels)
    return ProbMap(data.reshape(channels, d, h, w).astype(np.float32), validate=False)


def write_volume(path: Union[str, os.PathLike], grid: Grid) -> None:
    Path(path).write_bytes(encode(grid))


def read_volume(path: Union[str, os.PathLike]) -> Grid:
    path = Path(path)
    name = path.name
    volume_id = name[: -len(".cal3d")] if name.endswith(".cal3d") else path.stem
    return decode(path.read_bytes(), volume_id)
