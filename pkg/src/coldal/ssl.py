"""Stage-two semi-supervised fine-tuning: noisy labels, ROI patches, two views, and the weighted step."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from .errors import DivergenceError, InvalidArgumentError
from .losses import consistency_t, dice_ce_t, one_hot, total_loss
from .model import AdamState, GradTape, ModelParams, adam_step
from .rng import derive_seed, rng_for
from .volume import LabelMap, Patch, ProbMap, Volume3D, extract_patch

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.9
DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 0.001


def generate_noisy_label(p: ProbMap, tau: float = DEFAULT_TAU) -> LabelMap:
    """Foreground only where the argmax class is non-background with probability >= tau."""
    if not 0.0 < tau <= 1.0:
        raise InvalidArgumentError(f"tau must lie in (0, 1], got {tau}")
    data = p.data
    arg = np.argmax(data, axis=0)
    best = np.take_along_axis(data, arg[None], axis=0)[0]
    out = np.where((arg > 0) & (best >= tau), arg, 0).astype(np.uint8)
    return LabelMap(out, p.num_classes)


class RoiSampler:
    """Caches foreground/background voxel indices of one label grid."""

    def __init__(self, label: np.ndarray):
        label = np.asarray(label)
        self.shape = label.shape
        flat = label.reshape(-1)
        self.fg = np.flatnonzero(flat > 0)
        self.bg = np.flatnonzero(flat == 0)
        self._warned = False

    def origin(self, size, fg_ratio: Tuple[float, float], rng: np.random.Generator):
        fg_w, bg_w = fg_ratio
        if fg_w < 0 or bg_w < 0 or fg_w + bg_w <= 0:
            raise InvalidArgumentError(f"invalid fg:bg ratio {fg_ratio}")
        want_fg = rng.random() < fg_w / (fg_w + bg_w)
        pool = self.fg if want_fg else self.bg
        if len(pool) == 0:
            if want_fg and not self._warned:
                self._warned = True
                log.warning("no foreground voxels for a foreground-centred patch; using a background centre")
            pool = self.bg if want_fg else self.fg
            want_fg = not want_fg
        center = np.unravel_index(pool[rng.integers(len(pool))], self.shape)
        origin = tuple(
            int(min(max(c - s // 2, 0), e - s)) for c, s, e in zip(center, size, self.shape)
        )
        return origin, want_fg, tuple(int(c) for c in center)


def sample_roi_patch(v: Volume3D | np.ndarray, lbl: LabelMap | np.ndarray, size, fg_ratio=(1, 1), seed: int = 0) -> Patch:
    """Patch centred (then clamped) on a foreground voxel with probability fg/(fg+bg), else background."""
    ldata = lbl.data if isinstance(lbl, LabelMap) else np.asarray(lbl)
    size = tuple(size) if not isinstance(size, int) else (size,) * 3
    origin, _, _ = RoiSampler(ldata).origin(size, fg_ratio, rng_for(seed, "roi"))
    return extract_patch(v, ldata, origin, size)


@dataclass(frozen=True)
class AugmentConfig:
    shift: float = 0.1
    scale: float = 0.1
    noise: float = 0.05


def make_views(patch: Patch, aug_seed: int, aug: AugmentConfig = AugmentConfig()) -> Tuple[Patch, Patch]:
    """v1 is an exact copy; v2 gets random intensity scale, shift and gaussian noise."""
    rng = rng_for(aug_seed, "views")
    delta = rng.uniform(-aug.shift, aug.shift) if aug.shift > 0 else 0.0
    s = rng.uniform(1.0 - aug.scale, 1.0 + aug.scale) if aug.scale > 0 else 1.0
    image = patch.image.astype(np.float64)
    v2 = image * s + delta
    if aug.noise > 0:
        v2 = v2 + rng.normal(0.0, aug.noise, size=image.shape)
    v1 = Patch(patch.origin, patch.size, patch.image.copy(), None if patch.label is None else patch.label.copy())
    return v1, Patch(patch.origin, patch.size, v2.astype(np.float32), v1.label)


@dataclass
class StepLoss:
    supervised: float
    semi: float
    total: float


def _check_finite(loss: torch.Tensor, what: str):
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite {what} loss")


def semi_step(
    params: ModelParams,
    adam: AdamState,
    labeled_images: np.ndarray,
    labeled_targets: np.ndarray,
    unlabeled_views: Optional[Tuple[np.ndarray, np.ndarray]],
    alpha: float,
    beta: float,
    lr: float,
    dropout_seed: int,
    hard_target: bool = True,
):
    """One Adam step on ``alpha * DiceCE(labeled) + beta * consistency(v1, v2)``.

    ``labeled_images``/``labeled_targets`` are (B, D, H, W) batches; the view
    pair holds two (D, H, W) images. The labeled forward uses dropout seed
    ``derive_seed(dropout_seed, "labeled")``, the same as the supervised
    trainer, so ``beta = 0`` reproduces a supervised update exactly.
    """
    tape = GradTape(params)
    C = params.config.out_channels
    logp = tape.log_probs(labeled_images, derive_seed(dropout_seed, "labeled"))
    target = one_hot(torch.from_numpy(np.asarray(labeled_targets, dtype=np.int64)), C)
    sup = dice_ce_t(logp, target)
    _check_finite(sup, "supervised")
    if unlabeled_views is not None:
        v1, v2 = unlabeled_views
        with torch.no_grad():
            probs_v1 = tape.log_probs(np.asarray(v1)[None], None).exp()
        logp_v2 = tape.log_probs(np.asarray(v2)[None], derive_seed(dropout_seed, "unlabeled"))
        semi = consistency_t(logp_v2, probs_v1, hard=hard_target)
        _check_finite(semi, "consistency")
    else:
        semi = torch.zeros((), dtype=torch.float64)
    loss = total_loss(sup, semi, alpha, beta)
    grads = tape.backward(loss)
    new_params, new_adam = adam_step(params, adam, grads, lr, adam.step + 1)
    return new_params, new_adam, StepLoss(float(sup.detach()), float(semi.detach()), float(loss.detach()))
