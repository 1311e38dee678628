"""Small residual encoder-decoder for 3D segmentation.

The network is written functionally over a named parameter dict so weights
can be copied between tasks by name. Gradients come from torch autograd;
``GradTape`` wraps a recorded train-mode forward and its reverse pass.

Architecture per level: 3x3x3 conv + SiLU, optional residual block
(conv-SiLU-conv plus identity, then SiLU), then dropout. Downsampling is
2x average pooling, upsampling is nearest neighbour followed by the decoder
level's conv on the concatenated skip. A 1x1x1 "head" conv produces logits.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    BoundsError,
    DivergenceError,
    FormatError,
    IncompatibilityError,
    InvalidArgumentError,
    MagicMismatchError,
    StateError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .rng import derive_seed, rng_for
from .volume import Patch, ProbMap, Volume3D, pad_array, pad_offsets

KERNEL = 3
MERGE_KERNEL = 1  # decoder conv applied to [upsampled, skip]
ACTIVATION = "silu"
HEAD = "head"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 2
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 2
    dropout_rate: float = 0.2
    residual_blocks: bool = True

    def __post_init__(self):
        if self.levels < 1:
            raise InvalidArgumentError("levels must be >= 1")
        if self.out_channels < 2:
            raise InvalidArgumentError("out_channels must be >= 2")
        if self.base_channels < 1 or self.in_channels < 1:
            raise InvalidArgumentError("channel counts must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArgumentError("dropout_rate must lie in [0, 1)")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: "OrderedDict[str, torch.Tensor]"

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()))

    def to(self, dtype) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, v.detach().to(dtype)) for k, v in self.tensors.items()))

    def equal(self, other: "ModelParams") -> bool:
        if self.config != other.config or list(self.tensors) != list(other.tensors):
            return False
        return all(torch.equal(self.tensors[k], other.tensors[k]) for k in self.tensors)


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    k = KERNEL
    shapes: "OrderedDict[str, tuple]" = OrderedDict()

    def block(prefix, cin, cout, ck=k):
        shapes[f"{prefix}.conv.weight"] = (cout, cin, ck, ck, ck)
        shapes[f"{prefix}.conv.bias"] = (cout,)
        if config.residual_blocks:
            for r in ("res1", "res2"):
                shapes[f"{prefix}.{r}.weight"] = (cout, cout, k, k, k)
                shapes[f"{prefix}.{r}.bias"] = (cout,)

    cin = config.in_channels
    for i in range(config.levels):
        block(f"enc{i}", cin, config.channels(i))
        cin = config.channels(i)
    for i in reversed(range(config.levels - 1)):
        block(f"dec{i}", config.channels(i + 1) + config.channels(i), config.channels(i), MERGE_KERNEL)
    shapes[f"{HEAD}.weight"] = (config.out_channels, config.channels(0), 1, 1, 1)
    shapes[f"{HEAD}.bias"] = (config.out_channels,)
    return shapes


def _init_tensor(name: str, shape: tuple, seed: int) -> torch.Tensor:
    if name.endswith(".bias"):
        return torch.zeros(shape, dtype=torch.float32)
    fan_in = int(np.prod(shape[1:]))
    std = math.sqrt(2.0 / fan_in)
    if ".res2." in name:
        std *= 0.5  # keeps the residual sum from doubling activation scale at init
    values = rng_for(seed, "init", name).normal(0.0, std, size=shape)
    return torch.from_numpy(values.astype(np.float32))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fan-in scaled normal weights, zero biases; fully determined by ``seed``."""
    return ModelParams(
        config, OrderedDict((n, _init_tensor(n, s, seed)) for n, s in param_shapes(config).items())
    )


# -- forward -----------------------------------------------------------------

def _dropout(h: torch.Tensor, rate: float, seeds: Optional[Sequence[int]], layer: int) -> torch.Tensor:
    if seeds is None or rate <= 0.0:
        return h
    if h.shape[0] == 1 and len(seeds) > 1:
        h = h.expand(len(seeds), *h.shape[1:])
    if h.shape[0] != len(seeds):
        raise InvalidArgumentError(f"batch of {h.shape[0]} but {len(seeds)} dropout seeds")
    keep = 1.0 - rate
    masks = []
    for s in seeds:
        gen = torch.Generator().manual_seed(derive_seed(s, "dropout", layer))
        masks.append(torch.rand(h.shape[1:], generator=gen) >= rate)
    mask = torch.stack(masks).to(h.dtype)
    return h * mask * (1.0 / keep)


def _block(p: Dict[str, torch.Tensor], prefix: str, h: torch.Tensor, residual: bool) -> torch.Tensor:
    w = p[f"{prefix}.conv.weight"]
    h = F.silu(F.conv3d(h, w, p[f"{prefix}.conv.bias"], padding=w.shape[-1] // 2))
    if residual:
        r = F.silu(F.conv3d(h, p[f"{prefix}.res1.weight"], p[f"{prefix}.res1.bias"], padding=KERNEL // 2))
        r = F.conv3d(r, p[f"{prefix}.res2.weight"], p[f"{prefix}.res2.bias"], padding=KERNEL // 2)
        h = F.silu(h + r)
    return h


def network_logits(
    params: ModelParams,
    x: torch.Tensor,
    seeds: Optional[Sequence[int]] = None,
    tensors: Optional[Dict[str, torch.Tensor]] = None,
) -> torch.Tensor:
    """Logits for a batch ``x`` of shape (B, in, D, H, W).

    ``seeds`` is None for deterministic inference, otherwise one dropout seed
    per output sample. A batch-1 ``x`` with several seeds is broadcast at the
    first dropout layer, so the deterministic prefix is computed once.
    """
    cfg = params.config
    p = params.tensors if tensors is None else tensors
    div = cfg.divisor
    if x.ndim != 5 or x.shape[1] != cfg.in_channels or any(s % div for s in x.shape[2:]):
        raise InvalidArgumentError(
            f"input shape {tuple(x.shape)} incompatible with config (spatial dims must be divisible by {div})"
        )
    rate = cfg.dropout_rate
    layer = 0
    skips = []
    h = x.contiguous(memory_format=torch.channels_last_3d)  # faster CPU conv kernels
    for i in range(cfg.levels):
        if i > 0:
            h = F.avg_pool3d(h, 2)
        h = _block(p, f"enc{i}", h, cfg.residual_blocks)
        h = _dropout(h, rate, seeds, layer)
        layer += 1
        skips.append(h)
    for i in reversed(range(cfg.levels - 1)):
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        skip = skips[i]
        if skip.shape[0] != h.shape[0]:
            skip = skip.expand(h.shape[0], *skip.shape[1:])
        h = _block(p, f"dec{i}", torch.cat([h, skip], 1), cfg.residual_blocks)
        h = _dropout(h, rate, seeds, layer)
        layer += 1
    return F.conv3d(h, p[f"{HEAD}.weight"], p[f"{HEAD}.bias"])


def sample_seeds(seed: int, batch: int) -> List[int]:
    return [derive_seed(seed, b) for b in range(batch)]


MODES = ("train", "eval", "mc_dropout")


def _image_tensor(image, dtype) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim == 4:
        arr = arr[:, None]
    return torch.from_numpy(np.array(arr, order="C")).to(dtype)  # copy: frozen inputs are read-only


def forward(params: ModelParams, patch, mode: str = "eval", seed: int = 0) -> ProbMap:
    """Softmax probabilities for a single patch (or raw D x H x W image)."""
    if mode not in MODES:
        raise InvalidArgumentError(f"mode must be one of {MODES}")
    image = patch.image if isinstance(patch, Patch) else patch
    if np.asarray(image).ndim != 3:
        raise InvalidArgumentError("forward expects a single 3D patch")
    dtype = next(iter(params.tensors.values())).dtype
    x = _image_tensor(image, dtype)
    seeds = None if mode == "eval" else sample_seeds(seed, 1)
    with torch.no_grad():
        probs = torch.softmax(network_logits(params, x, seeds), dim=1)
    return ProbMap(probs[0].to(torch.float32).numpy())


class GradTape:
    """Records train-mode forwards so ``backward`` can return exact gradients.

    Several forwards may be recorded before one ``backward``; the tape is
    consumed by ``backward``.
    """

    def __init__(self, params: ModelParams):
        self.params = params
        self.leaves = OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in params.tensors.items())
        self._recorded = False

    @property
    def dtype(self):
        return next(iter(self.leaves.values())).dtype

    def log_probs(self, images, seed: Optional[int]) -> torch.Tensor:
        """Log-softmax output for a batch (B, D, H, W); dropout active when ``seed`` is given."""
        x = images if isinstance(images, torch.Tensor) else _image_tensor(images, self.dtype)
        seeds = None if seed is None else sample_seeds(seed, x.shape[0])
        logits = network_logits(self.params, x, seeds, tensors=self.leaves)
        self._recorded = True
        return torch.log_softmax(logits, dim=1)

    def backward(self, loss: torch.Tensor) -> "OrderedDict[str, torch.Tensor]":
        if not self._recorded:
            raise StateError("backward called without a recorded forward pass")
        self._recorded = False
        grads = torch.autograd.grad(loss, list(self.leaves.values()), allow_unused=True)
        return OrderedDict(
            (k, torch.zeros_like(v) if g is None else g.detach())
            for (k, v), g in zip(self.leaves.items(), grads)
        )


def backward(tape: GradTape, loss: torch.Tensor):
    return tape.backward(loss)


# -- optimisation ------------------------------------------------------------

@dataclass
class AdamState:
    m: "OrderedDict[str, torch.Tensor]"
    v: "OrderedDict[str, torch.Tensor]"
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            OrderedDict((k, torch.zeros_like(t)) for k, t in params.tensors.items()),
            OrderedDict((k, torch.zeros_like(t)) for k, t in params.tensors.items()),
            0,
        )


def adam_step(params: ModelParams, moments: AdamState, grads, lr: float, step: int):
    """One Adam update with bias correction for update number ``step`` (1-based)."""
    if step < 1:
        raise InvalidArgumentError("Adam step counter is 1-based")
    bad = [k for k, g in grads.items() if not torch.isfinite(g).all()]
    if bad:
        raise DivergenceError(f"non-finite gradient in {', '.join(bad)} at step {step}")
    c1 = 1.0 - ADAM_BETA1**step
    c2 = 1.0 - ADAM_BETA2**step
    new_p, new_m, new_v = OrderedDict(), OrderedDict(), OrderedDict()
    for name, theta in params.tensors.items():
        g = grads[name].to(theta.dtype)
        m = ADAM_BETA1 * moments.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * moments.v[name] + (1.0 - ADAM_BETA2) * g * g
        new_p[name] = theta - lr * (m / c1) / (torch.sqrt(v / c2) + ADAM_EPS)
        new_m[name], new_v[name] = m, v
    return ModelParams(params.config, new_p), AdamState(new_m, new_v, step)


# -- checkpoints ---------------------------------------------------------------

PROVENANCES = ("proxy", "supervised", "semi", "init")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    adam: AdamState
    step: int = 0
    provenance: str = "init"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise InvalidArgumentError(f"unknown provenance {self.provenance!r}")
        for name, t in self.params.tensors.items():
            if self.adam.m[name].shape != t.shape or self.adam.v[name].shape != t.shape:
                raise InvalidArgumentError(f"optimizer moment shape mismatch for {name}")

    @classmethod
    def fresh(cls, params: ModelParams, provenance: str = "init") -> "Checkpoint":
        return cls(params.config, params, AdamState.zeros_like(params), 0, provenance)

    def equal(self, other: "Checkpoint") -> bool:
        return (
            self.config == other.config
            and self.step == other.step
            and self.provenance == other.provenance
            and self.adam.step == other.adam.step
            and self.params.equal(other.params)
            and all(torch.equal(self.adam.m[k], other.adam.m[k]) for k in self.adam.m)
            and all(torch.equal(self.adam.v[k], other.adam.v[k]) for k in self.adam.v)
        )


def warm_start(target: ModelConfig, source: Checkpoint) -> ModelParams:
    """Copy every parameter by name; a head whose class count changed restarts at zero.

    A zero head predicts the uniform distribution, so fine-tuning starts from
    the transferred features instead of a random, often saturated, readout
    of them that a small learning rate cannot undo in a short budget.
    """
    fresh = init_params(target, 0)
    src = source.params.tensors
    offending = []
    out = OrderedDict()
    for name, t in fresh.tensors.items():
        is_head = name.startswith(HEAD + ".")
        if name in src and tuple(src[name].shape) == tuple(t.shape):
            out[name] = src[name].detach().clone().to(torch.float32)
        elif is_head and target.out_channels != source.config.out_channels:
            out[name] = torch.zeros_like(t)
        else:
            offending.append(name)
    offending += [n for n in src if n not in fresh.tensors]
    if offending:
        raise IncompatibilityError(offending)
    return ModelParams(target, out)


_CK_MAGIC = b"CALCK\x00"
_CK_VERSION = 1
_CK_HEAD = struct.Struct("<6sHB")
_CK_CONFIG = struct.Struct("<BHHHdBQQ")


def _pack_tensor(name: str, t: torch.Tensor) -> bytes:
    raw = name.encode()
    arr = t.detach().to(torch.float32).contiguous().numpy().astype("<f4")
    return (
        struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    )


def encode_checkpoint(ck: Checkpoint) -> bytes:
    c = ck.config
    parts = [
        _CK_HEAD.pack(_CK_MAGIC, _CK_VERSION, PROVENANCES.index(ck.provenance)),
        _CK_CONFIG.pack(
            c.levels, c.base_channels, c.in_channels, c.out_channels, c.dropout_rate,
            int(c.residual_blocks), ck.step, ck.adam.step,
        ),
    ]
    records = list(ck.params.tensors.items())
    records += [(f"adam.m/{k}", v) for k, v in ck.adam.m.items()]
    records += [(f"adam.v/{k}", v) for k, v in ck.adam.v.items()]
    parts.append(struct.pack("<I", len(records)))
    parts += [_pack_tensor(n, t) for n, t in records]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:6] != _CK_MAGIC:
        raise MagicMismatchError("not a checkpoint file (magic mismatch)")
    r = _Reader(buf)
    _, version, prov = r.unpack(_CK_HEAD.format)
    if version != _CK_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    levels, base, cin, cout, drop, resid, step, adam_step_ = r.unpack(_CK_CONFIG.format)
    config = ModelConfig(levels, base, cin, cout, drop, bool(resid))
    (count,) = r.unpack("<I")
    params, m, v = OrderedDict(), OrderedDict(), OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        t = torch.from_numpy(arr.copy())
        if name.startswith("adam.m/"):
            m[name[7:]] = t
        elif name.startswith("adam.v/"):
            v[name[7:]] = t
        else:
            params[name] = t
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint records")
    if prov >= len(PROVENANCES):
        raise FormatError(f"unknown provenance code {prov}")
    return Checkpoint(config, ModelParams(config, params), AdamState(m, v, adam_step_), step, PROVENANCES[prov])


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# -- whole-volume inference --------------------------------------------------

def tile_starts(extent: int, patch: int, overlap: float) -> List[int]:
    if extent <= patch:
        return [0]
    stride = max(1, int(patch * (1.0 - overlap)))
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def _tiles(shape, patch_size, overlap):
    grids = [tile_starts(e, p, overlap) for e, p in zip(shape, patch_size)]
    return [(a, b, c) for a in grids[0] for b in grids[1] for c in grids[2]]


def sliding_window_probs(
    params: ModelParams,
    image: np.ndarray,
    patch_size,
    overlap: float = 0.25,
    pass_seeds: Optional[Sequence[int]] = None,
    pad_value: float = 0.0,
) -> np.ndarray:
    """Tiled whole-volume probabilities.

    Returns (C, D, H, W) for deterministic inference, or (m, C, D, H, W) when
    ``pass_seeds`` gives one dropout seed per MC pass. Every pass uses the same
    tiling, and tile ``q`` of pass ``t`` uses dropout seed
    ``derive_seed(pass_seeds[t], q)``.
    """
    if not 0.0 <= overlap < 1.0:
        raise InvalidArgumentError("overlap must lie in [0, 1)")
    if isinstance(patch_size, int):
        patch_size = (patch_size,) * 3
    patch_size = tuple(int(p) for p in patch_size)
    if any(p % params.config.divisor for p in patch_size):
        raise InvalidArgumentError(f"patch size {patch_size} not divisible by {params.config.divisor}")
    image = np.asarray(image, dtype=np.float32)
    shape = image.shape
    padded_shape = tuple(max(e, p) for e, p in zip(shape, patch_size))
    padded = pad_array(image, padded_shape, np.float32(pad_value)) if padded_shape != shape else image
    offs = pad_offsets(shape, padded_shape)
    if any(p > e for p, e in zip(patch_size, padded.shape)):
        raise BoundsError("patch larger than padded volume")

    dtype = next(iter(params.tensors.values())).dtype
    C = params.config.out_channels
    n_pass = 1 if pass_seeds is None else len(pass_seeds)
    acc = np.zeros((n_pass, C) + padded.shape, dtype=np.float64)
    cnt = np.zeros(padded.shape, dtype=np.float64)
    tiles = _tiles(padded.shape, patch_size, overlap)
    with torch.no_grad():
        if pass_seeds is None:
            batch = np.stack([padded[a:a + patch_size[0], b:b + patch_size[1], c:c + patch_size[2]] for a, b, c in tiles])
            probs = torch.softmax(network_logits(params, _image_tensor(batch, dtype)), dim=1).double().numpy()
        for q, (a, b, c) in enumerate(tiles):
            win = (slice(a, a + patch_size[0]), slice(b, b + patch_size[1]), slice(c, c + patch_size[2]))
            if pass_seeds is None:
                acc[0][(slice(None),) + win] += probs[q]
            else:
                x = _image_tensor(padded[win], dtype)
                seeds = [derive_seed(s, q) for s in pass_seeds]
                out = torch.softmax(network_logits(params, x, seeds), dim=1).double().numpy()
                acc[(slice(None), slice(None)) + win] += out
            cnt[win] += 1.0
    acc /= cnt
    crop = (slice(None), slice(None)) + tuple(slice(o, o + e) for o, e in zip(offs, shape))
    out = acc[crop].astype(np.float32)
    return out[0] if pass_seeds is None else out


def sliding_window_predict(
    params: ModelParams, v: Volume3D, patch_size, overlap: float = 0.25, pad_value: float = 0.0
) -> ProbMap:
    return ProbMap(sliding_window_probs(params, v.data, patch_size, overlap, pad_value=pad_value), validate=False)
