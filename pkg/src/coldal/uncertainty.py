"""MC-dropout epistemic uncertainty maps and their volume-level scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .model import ModelParams, sliding_window_probs
from .volume import ProbMap, Volume3D

KINDS = ("variance", "entropy")
DEFAULT_PASSES = 10


@dataclass(frozen=True)
class UncertaintyMap:
    data: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown uncertainty kind {self.kind!r}")
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class VolumeScore:
    id: str
    score: float
    kind: str
    m: int


def mc_predict(
    params: ModelParams,
    v: Volume3D,
    m: int = DEFAULT_PASSES,
    dropout_seed_base: int = 0,
    patch_size=None,
    overlap: float = 0.25,
) -> List[ProbMap]:
    """``m`` dropout-enabled whole-volume predictions; pass ``t`` uses seed ``base + t``."""
    if m < 2:
        raise InvalidArgumentError(f"need at least 2 MC passes, got {m}")
    patch_size = patch_size or v.shape
    seeds = [dropout_seed_base + t for t in range(m)]
    probs = sliding_window_probs(params, v.data, patch_size, overlap, pass_seeds=seeds)
    return [ProbMap(p, validate=False) for p in probs]


def _stack(maps: Sequence) -> np.ndarray:
    if len(maps) == 0:
        raise InvalidArgumentError("need at least one prediction")
    arrays = [m.data if isinstance(m, ProbMap) else np.asarray(m) for m in maps]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise InvalidArgumentError("MC predictions have differing shapes")
    return np.stack(arrays).astype(np.float64)


def entropy_from_stack(stack: np.ndarray) -> np.ndarray:
    mean = stack.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(mean > 0, mean * np.log(np.where(mean > 0, mean, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=0), 0.0)


def variance_from_stack(stack: np.ndarray) -> np.ndarray:
    return stack.var(axis=0).sum(axis=0)


def entropy_map(maps: Sequence[ProbMap]) -> UncertaintyMap:
    """Entropy of the pass-averaged class distribution (natural log, 0 ln 0 = 0)."""
    return UncertaintyMap(entropy_from_stack(_stack(maps)), "entropy")


def variance_map(maps: Sequence[ProbMap]) -> UncertaintyMap:
    """Population variance across passes, summed over class channels."""
    if len(maps) < 2:
        raise InvalidArgumentError("variance needs at least 2 passes")
    return UncertaintyMap(variance_from_stack(_stack(maps)), "variance")


def score(umap: UncertaintyMap, volume_id: str = "", m: int = 0) -> VolumeScore:
    if umap.data.size == 0:
        raise InvalidArgumentError("cannot score an empty map")
    return VolumeScore(volume_id, float(umap.data.mean()), umap.kind, m)


def score_volume(
    params: ModelParams,
    v: Volume3D,
    m: int = DEFAULT_PASSES,
    dropout_seed_base: int = 0,
    patch_size=None,
    overlap: float = 0.25,
) -> dict:
    """Both volume scores from a single set of MC passes: ``{kind: VolumeScore}``."""
    maps = mc_predict(params, v, m, dropout_seed_base, patch_size, overlap)
    stack = _stack(maps)
    return {
        "variance": VolumeScore(v.id, float(variance_from_stack(stack).mean()), "variance", m),
        "entropy": VolumeScore(v.id, float(entropy_from_stack(stack).mean()), "entropy", m),
    }
