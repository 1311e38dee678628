"""Step-budgeted supervised training and semi-supervised fine-tuning loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import DivergenceError
from .losses import dice_ce_t, one_hot
from .model import AdamState, GradTape, ModelParams, adam_step
from .rng import derive_seed, rng_for
from .ssl import AugmentConfig, RoiSampler, make_views, semi_step
from .volume import Patch

log = logging.getLogger(__name__)


@dataclass
class TrainItem:
    """A normalised image with the label used to train on it."""

    id: str
    image: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        self.sampler = RoiSampler(self.label)


def sample_batch(items: Sequence[TrainItem], patch_size, batch_size: int, fg_ratio, seed: int, step: int, tag: str = "labeled"):
    size = (patch_size,) * 3 if isinstance(patch_size, int) else tuple(patch_size)
    images, labels = [], []
    for b in range(batch_size):
        rng = rng_for(seed, tag, step, b)
        item = items[int(rng.integers(len(items)))]
        origin, _, _ = item.sampler.origin(size, fg_ratio, rng)
        win = tuple(slice(o, o + s) for o, s in zip(origin, size))
        images.append(item.image[win])
        labels.append(item.label[win])
    return np.stack(images), np.stack(labels)


def supervised_step(params: ModelParams, adam: AdamState, images, targets, lr: float, dropout_seed: int):
    """One Adam step on DiceCE of a labeled batch; returns (params, adam, loss)."""
    tape = GradTape(params)
    logp = tape.log_probs(images, derive_seed(dropout_seed, "labeled"))
    target = one_hot(torch.from_numpy(np.asarray(targets, dtype=np.int64)), params.config.out_channels)
    loss = dice_ce_t(logp, target)
    if not torch.isfinite(loss):
        raise DivergenceError("non-finite supervised loss")
    grads = tape.backward(loss)
    new_params, new_adam = adam_step(params, adam, grads, lr, adam.step + 1)
    return new_params, new_adam, float(loss.detach())


@dataclass
class TrainSettings:
    steps: int
    lr: float
    patch_size: int
    batch_size: int
    fg_ratio: Tuple[float, float]


def train_supervised(
    params: ModelParams,
    items: Sequence[TrainItem],
    settings: TrainSettings,
    seed: int,
    on_step: Optional[Callable[[int, ModelParams, float], None]] = None,
) -> Tuple[ModelParams, AdamState, List[float]]:
    """Fixed step budget from fresh optimizer moments."""
    adam = AdamState.zeros_like(params)
    losses = []
    for step in range(settings.steps):
        images, labels = sample_batch(items, settings.patch_size, settings.batch_size, settings.fg_ratio, seed, step)
        params, adam, loss = supervised_step(params, adam, images, labels, settings.lr, derive_seed(seed, "drop", step))
        losses.append(loss)
        if on_step is not None:
            on_step(step, params, loss)
    return params, adam, losses


def finetune_semi(
    params: ModelParams,
    labeled: Sequence[TrainItem],
    unlabeled: Sequence[TrainItem],
    settings: TrainSettings,
    noisy_fg_ratio: Tuple[float, float],
    alpha: float,
    beta: float,
    seed: int,
    aug: AugmentConfig = AugmentConfig(),
    hard_target: bool = True,
    log_rows: Optional[list] = None,
) -> Tuple[ModelParams, AdamState]:
    """Fine-tune on labeled batches plus one ROI patch of a noisy-labeled volume per step.

    ``unlabeled`` items carry noisy labels, used only to place the ROI patch.
    """
    adam = AdamState.zeros_like(params)
    size = (settings.patch_size,) * 3
    for step in range(settings.steps):
        images, labels = sample_batch(labeled, settings.patch_size, settings.batch_size, settings.fg_ratio, seed, step)
        views = None
        if unlabeled:
            rng = rng_for(seed, "unlabeled", step)
            item = unlabeled[int(rng.integers(len(unlabeled)))]
            origin, _, _ = item.sampler.origin(size, noisy_fg_ratio, rng)
            win = tuple(slice(o, o + s) for o, s in zip(origin, size))
            patch = Patch(origin, size, item.image[win])
            v1, v2 = make_views(patch, derive_seed(seed, "aug", step), aug)
            views = (v1.image, v2.image)
        params, adam, parts = semi_step(
            params, adam, images, labels, views, alpha, beta, settings.lr,
            derive_seed(seed, "drop", step), hard_target,
        )
        if log_rows is not None:
            log_rows.append((step, parts.supervised, parts.semi, parts.total))
    return params, adam
