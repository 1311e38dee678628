"""Pseudo labels from CT intensity thresholding and 3D connected components."""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .errors import InvalidArgumentError
from .volume import LabelMap, Volume3D

DEFAULT_LEVEL = 125.0
DEFAULT_WIDTH = 50.0


def threshold_mask(v: Volume3D, lo: float, hi: float) -> LabelMap:
    if lo > hi:
        raise InvalidArgumentError(f"lo ({lo}) must not exceed hi ({hi})")
    return LabelMap(((v.data >= lo) & (v.data <= hi)).astype(np.uint8), 2)


def _offsets(connectivity: int):
    """Half of the neighbourhood: offsets that precede a voxel in scan order."""
    if connectivity not in (6, 26):
        raise InvalidArgumentError(f"connectivity must be 6 or 26, got {connectivity}")
    out = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if (dz, dy, dx) <= (0, 0, 0):
                    continue
                if connectivity == 6 and abs(dz) + abs(dy) + abs(dx) != 1:
                    continue
                out.append((dz, dy, dx))
    return out


def _edges(mask: np.ndarray, connectivity: int, index: np.ndarray):
    """Pairs of flat foreground indices that are neighbours."""
    d, h, w = mask.shape
    src, dst = [], []
    for dz, dy, dx in _offsets(connectivity):
        a = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip((dz, dy, dx), (d, h, w)))
        b = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip((dz, dy, dx), (d, h, w)))
        both = mask[a] & mask[b]
        if both.any():
            src.append(index[a][both])
            dst.append(index[b][both])
    if not src:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(src), np.concatenate(dst)


def _union_find(n: int, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Root (minimum member) for each of ``n`` nodes, by hooking plus pointer jumping."""
    parent = np.arange(n, dtype=np.int64)
    if len(src) == 0:
        return parent
    while True:
        ra, rb = parent[src], parent[dst]
        differ = ra != rb
        if not differ.any():
            return parent
        ra, rb = ra[differ], rb[differ]
        lo, hi = np.minimum(ra, rb), np.maximum(ra, rb)
        np.minimum.at(parent, hi, lo)
        while True:
            grand = parent[parent]
            if np.array_equal(grand, parent):
                break
            parent = grand


def connected_components(mask: LabelMap | np.ndarray, connectivity: int = 26) -> Tuple[LabelMap, List[int]]:
    """Label the foreground of a binary mask.

    Component ids are dense ``1..K`` and assigned in order of each component's
    first voxel in C scan order. Returns the id grid and ``sizes`` with
    ``sizes[id - 1]`` the voxel count of component ``id``.
    """
    data = mask.data if isinstance(mask, LabelMap) else np.asarray(mask)
    if data.ndim != 3:
        raise InvalidArgumentError(f"mask must be 3D, got shape {data.shape}")
    if data.size and (data.min() < 0 or data.max() > 1):
        raise InvalidArgumentError("connected_components expects a binary mask")
    fg = data.astype(bool)
    n_fg = int(fg.sum())
    labels = np.zeros(data.shape, dtype=np.int64)
    if n_fg == 0:
        return _component_map(labels, 0), []

    index = np.full(data.shape, -1, dtype=np.int64)
    index[fg] = np.arange(n_fg)  # compact ids follow C scan order
    src, dst = _edges(fg, connectivity, index)
    roots = _union_find(n_fg, src, dst)
    # roots are the minimum compact index of each component, which is also its
    # first voxel in scan order, so sorting roots orders components correctly
    uniq, inverse, counts = np.unique(roots, return_inverse=True, return_counts=True)
    labels[fg] = inverse + 1
    return _component_map(labels, len(uniq)), [int(c) for c in counts]


def _component_map(labels: np.ndarray, k: int) -> LabelMap:
    return LabelMap(labels, num_classes=k + 1)


def make_pseudo_label(
    v: Volume3D,
    window: Tuple[float, float] = (DEFAULT_LEVEL, DEFAULT_WIDTH),
    connectivity: int = 26,
    keep_top: int = 1,
) -> LabelMap:
    """Binary pseudo label: voxels inside the (level, width) window that belong to
    one of the ``keep_top`` largest connected components."""
    if keep_top < 1:
        raise InvalidArgumentError(f"keep_top must be >= 1, got {keep_top}")
    level, width = window
    mask = threshold_mask(v, level - width / 2.0, level + width / 2.0)
    comps, sizes = connected_components(mask, connectivity)
    if len(sizes) <= keep_top:
        return mask
    # stable sort: equal sizes keep scan order
    keep = np.argsort(-np.asarray(sizes), kind="stable")[:keep_top] + 1
    return LabelMap(np.isin(comps.data, keep).astype(np.uint8), 2)
