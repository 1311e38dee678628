"""Synthetic CT-like phantoms with exact ground truth.

Each case is an air-filled cube holding an ellipsoidal body of soft tissue,
one connected multi-lobe "organ" whose intensity sits inside the abdominal
soft-tissue window, an optional hypodense "lesion" inside the organ, and an
optional small in-window distractor blob that is not part of the organ.
Ground-truth classes: 0 background, 1 organ, 2 lesion.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from . import codec
from .errors import InvalidArgumentError
from .rng import rng_for
from .volume import LabelMap, Volume3D

BACKGROUND, ORGAN, LESION = 0, 1, 2
NUM_CLASSES = 3


@dataclass(frozen=True)
class PhantomSpec:
    extent: int = 32
    organ_count: Tuple[int, int] = (1, 3)
    organ_mean: float = 125.0
    organ_std: float = 5.0
    lesion_prob: float = 0.5
    lesion_mean: float = 70.0
    lesion_std: float = 5.0
    body_mean: float = 20.0
    body_std: float = 8.0
    air_value: float = -1000.0
    distractor_prob: float = 0.5
    noise_std: float = 5.0
    spacing: Tuple[float, float, float] = (1.5, 1.5, 2.0)
    seed: int = 0

    def __post_init__(self):
        if self.extent < 16:
            raise InvalidArgumentError(f"extent must be >= 16, got {self.extent}")
        lo, hi = self.organ_count
        if lo < 1 or hi < lo:
            raise InvalidArgumentError(f"invalid organ_count range {self.organ_count}")
        for name in ("organ_std", "lesion_std", "body_std", "noise_std"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0")
        for name in ("lesion_prob", "distractor_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("organ_count", "spacing"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class LabeledCase:
    volume: Volume3D
    truth: LabelMap

    @property
    def id(self) -> str:
        return self.volume.id

    @property
    def has_lesion(self) -> bool:
        return bool(np.any(self.truth.data == LESION))


def case_id(index: int) -> str:
    return f"case_{index:04d}"


def _ellipsoid(grid, center, radii) -> np.ndarray:
    zz, yy, xx = grid
    return (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    ) <= 1.0


def generate_case(spec: PhantomSpec, index: int) -> LabeledCase:
    s = spec.extent
    scale = s / 32.0
    grid = np.mgrid[0:s, 0:s, 0:s].astype(np.float64)
    mid = (s - 1) / 2.0

    geo = rng_for(spec.seed, index, "geometry")
    body_radii = geo.uniform(0.40, 0.47, size=3) * s
    body = _ellipsoid(grid, (mid, mid, mid), body_radii)

    main_center = mid + geo.uniform(-2.0, 2.0, size=3) * scale
    main_radii = geo.uniform(7.5, 9.5, size=3) * scale
    organ = _ellipsoid(grid, main_center, main_radii)
    n_lobes = int(geo.integers(spec.organ_count[0], spec.organ_count[1] + 1)) - 1
    for _ in range(n_lobes):
        direction = geo.normal(size=3)
        direction /= np.linalg.norm(direction)
        # lobe centre stays inside the main ellipsoid so the organ remains connected
        lobe_center = main_center + direction * main_radii * geo.uniform(0.5, 0.8)
        lobe_radii = geo.uniform(3.5, 5.5, size=3) * scale
        organ |= _ellipsoid(grid, lobe_center, lobe_radii)
    organ &= body

    truth = np.zeros((s, s, s), dtype=np.uint8)
    truth[organ] = ORGAN

    lesion = np.zeros_like(organ)
    if geo.random() < spec.lesion_prob:
        core = np.argwhere(organ)
        center = core[geo.integers(len(core))].astype(np.float64)
        radii = geo.uniform(2.8, 5.0, size=3) * scale
        lesion = _ellipsoid(grid, center, radii) & organ
        if not lesion.any():
            lesion[tuple(center.astype(int))] = True
        truth[lesion] = LESION

    distractor = np.zeros_like(organ)
    if geo.random() < spec.distractor_prob:
        # place a small in-window blob well away from the organ, if room allows
        dist_ok = body & ~_dilate(organ, int(round(4 * scale)))
        candidates = np.argwhere(dist_ok)
        if len(candidates):
            center = candidates[geo.integers(len(candidates))].astype(np.float64)
            blob = _ellipsoid(grid, center, geo.uniform(1.5, 2.5, size=3) * scale) & dist_ok
            distractor = blob

    tex = rng_for(spec.seed, index, "texture")
    vol = np.full((s, s, s), spec.air_value, dtype=np.float64)
    vol[body] = tex.normal(spec.body_mean, spec.body_std, size=int(body.sum()))
    vol[organ] = tex.normal(spec.organ_mean, spec.organ_std, size=int(organ.sum()))
    vol[distractor] = tex.normal(spec.organ_mean, spec.organ_std, size=int(distractor.sum()))
    vol[lesion] = tex.normal(spec.lesion_mean, spec.lesion_std, size=int(lesion.sum()))
    noise = rng_for(spec.seed, index, "noise")
    vol += noise.normal(0.0, spec.noise_std, size=vol.shape) if spec.noise_std > 0 else 0.0

    return LabeledCase(
        Volume3D(case_id(index), vol.astype(np.float32), spec.spacing),
        LabelMap(truth, NUM_CLASSES),
    )


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    from scipy.ndimage import binary_dilation

    if r <= 0:
        return mask.copy()
    return binary_dilation(mask, iterations=r)


def generate_dataset(spec: PhantomSpec, n_train: int, n_val: int) -> Tuple[List[LabeledCase], List[LabeledCase]]:
    if n_train < 1 or n_val < 1:
        raise InvalidArgumentError("n_train and n_val must both be >= 1")
    train = [generate_case(spec, i) for i in range(n_train)]
    val = [generate_case(spec, n_train + i) for i in range(n_val)]
    return train, val


MANIFEST = "manifest.json"


def write_dataset(out_dir, spec: PhantomSpec, train, val) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, cases in (("train", train), ("val", val)):
        (out / split).mkdir(exist_ok=True)
        for case in cases:
            image = f"{split}/{case.id}.cal3d"
            truth = f"{split}/{case.id}_truth.cal3d"
            codec.write_volume(out / image, case.volume)
            codec.write_volume(out / truth, case.truth)
            entries.append(
                {"id": case.id, "split": split, "image": image, "truth": truth, "lesion": case.has_lesion}
            )
    manifest = {"version": 1, "spec": spec.to_dict(), "cases": entries}
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(data_dir) -> Tuple[List[LabeledCase], List[LabeledCase]]:
    root = Path(data_dir)
    manifest = json.loads((root / MANIFEST).read_text())
    splits = {"train": [], "val": []}
    for entry in manifest["cases"]:
        vol = codec.read_volume(root / entry["image"])
        vol = Volume3D(entry["id"], vol.data, vol.spacing)
        truth = codec.read_volume(root / entry["truth"])
        splits[entry["split"]].append(LabeledCase(vol, truth))
    return splits["train"], splits["val"]
