"""Grid types and the basic geometry operations on them.

All grids are numpy arrays in C order (W fastest). Instances are treated as
immutable: the arrays are flagged read-only on construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import BoundsError, InvalidArgumentError

Int3 = Tuple[int, int, int]


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _as_int3(value, name: str) -> Int3:
    if isinstance(value, (int, np.integer)):
        value = (int(value),) * 3
    out = tuple(int(v) for v in value)
    if len(out) != 3:
        raise InvalidArgumentError(f"{name} must have 3 components, got {value!r}")
    return out  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class Volume3D:
    id: str
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidArgumentError(f"volume must be a non-empty 3D grid, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError(f"volume {self.id!r} contains non-finite values")
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise InvalidArgumentError(f"spacing must be 3 positive values, got {self.spacing!r}")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> Int3:
        return self.data.shape  # type: ignore[return-value]

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.id == other.id
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class LabelMap:
    data: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvalidArgumentError(f"label map must be 3D, got shape {data.shape}")
        if self.num_classes < 1:
            raise InvalidArgumentError(f"num_classes must be >= 1, got {self.num_classes}")
        if data.size and (data.min() < 0 or data.max() >= self.num_classes):
            raise InvalidArgumentError(f"label values must lie in [0, {self.num_classes})")
        dtype = np.uint8 if self.num_classes <= 256 else np.uint32
        object.__setattr__(self, "data", _freeze(data.astype(dtype, copy=False)))

    @property
    def shape(self) -> Int3:
        return self.data.shape  # type: ignore[return-value]

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class ProbMap:
    data: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4 or data.shape[0] < 2:
            raise InvalidArgumentError(f"prob map must be C x D x H x W with C >= 2, got {data.shape}")
        if self.validate:
            if data.min() < 0.0 or data.max() > 1.0:
                raise InvalidArgumentError("probabilities must lie in [0, 1]")
            sums = data.sum(axis=0, dtype=np.float64)
            if np.max(np.abs(sums - 1.0)) > 1e-4:
                raise InvalidArgumentError("per-voxel channel sums must be within 1e-4 of 1")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> Int3:
        return self.data.shape[1:]  # type: ignore[return-value]

    def argmax(self) -> LabelMap:
        return LabelMap(np.argmax(self.data, axis=0).astype(np.uint8), self.num_classes)

    def __eq__(self, other):
        if not isinstance(other, ProbMap):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()


@dataclass(frozen=True)
class Patch:
    origin: Int3
    size: Int3
    image: np.ndarray
    label: Optional[np.ndarray] = None

    def __post_init__(self):
        if any(s < 1 for s in self.size):
            raise InvalidArgumentError(f"patch size must be >= 1, got {self.size}")


def window_normalize(v: Volume3D, level: float, width: float) -> Volume3D:
    """Clip to ``[level - width/2, level + width/2]`` and map affinely onto [0, 1]."""
    if not (math.isfinite(level) and math.isfinite(width)):
        raise InvalidArgumentError(f"window must be finite, got level={level}, width={width}")
    if width <= 0:
        raise InvalidArgumentError(f"window width must be positive, got {width}")
    lo = level - width / 2.0
    out = (np.clip(v.data.astype(np.float64), lo, lo + width) - lo) / width
    return Volume3D(v.id, out.astype(np.float32), v.spacing)


def extract_patch(
    v: Volume3D | np.ndarray,
    lbl: Optional[LabelMap | np.ndarray],
    origin: Sequence[int],
    size: Sequence[int],
) -> Patch:
    image = v.data if isinstance(v, Volume3D) else np.asarray(v)
    origin = _as_int3(origin, "origin")
    size = _as_int3(size, "size")
    extent = image.shape
    for o, s, e in zip(origin, size, extent):
        if s < 1 or o < 0 or o + s > e:
            raise BoundsError(f"patch origin={origin} size={size} does not fit extent {extent}")
    window = tuple(slice(o, o + s) for o, s in zip(origin, size))
    label = None
    if lbl is not None:
        ldata = lbl.data if isinstance(lbl, LabelMap) else np.asarray(lbl)
        if ldata.shape != extent:
            raise InvalidArgumentError(f"label shape {ldata.shape} != volume shape {extent}")
        label = ldata[window].copy()
    return Patch(origin, size, image[window].copy(), label)


def pad_offsets(extent: Sequence[int], size: Sequence[int]) -> Int3:
    """Offsets placing ``extent`` inside ``size`` centred with floor bias."""
    return tuple((s - e) // 2 for e, s in zip(extent, size))  # type: ignore[return-value]


def pad_array(data: np.ndarray, size: Sequence[int], fill) -> np.ndarray:
    size = _as_int3(size, "size")
    if any(s < e for s, e in zip(size, data.shape)):
        raise InvalidArgumentError(f"pad size {size} smaller than extent {data.shape}")
    offs = pad_offsets(data.shape, size)
    out = np.full(size, fill, dtype=data.dtype)
    out[tuple(slice(o, o + e) for o, e in zip(offs, data.shape))] = data
    return out


def pad_to(v: Volume3D, size: Sequence[int], fill: float) -> Volume3D:
    return Volume3D(v.id, pad_array(v.data, size, np.float32(fill)), v.spacing)
