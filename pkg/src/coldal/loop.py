"""The active learning loop: proxy stage, per-iteration training and selection,
pool-state persistence, and the multi-cell experiment runner."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import multiprocessing as mp
import numpy as np
import torch

from . import acquisition
from .acquisition import RankedPool
from .config import SettingConfig
from .errors import DivergenceError, FormatError, InvalidArgumentError, InvalidTransitionError, VersionMismatchError
from .metrics import (
    METRICS_HEADER, PER_VOLUME_HEADER, MetricsRow, dice_score, pct_labeled, read_csv, report, write_csv, write_report,
)
from .model import (
    AdamState, Checkpoint, ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint,
    sliding_window_predict, warm_start,
)
from .phantom import NUM_CLASSES, LabeledCase, load_dataset
from .proxy import make_pseudo_label
from .rng import derive_seed
from .ssl import AugmentConfig, generate_noisy_label
from .training import TrainItem, TrainSettings, finetune_semi, train_supervised
from .uncertainty import score_volume
from .volume import Volume3D, window_normalize

log = logging.getLogger(__name__)

STATE_VERSION = 1


# -- pool state ------------------------------------------------------------------


@dataclass(frozen=True)
class PoolState:
    """Partition of the training pool. ``labeled`` keeps annotation order."""

    iteration: int
    labeled: Tuple[str, ...]
    unlabeled: Tuple[str, ...]
    noisy: Tuple[str, ...] = ()
    proxy_ranking: Optional[RankedPool] = None

    def __post_init__(self):
        if self.iteration < 0:
            raise InvalidArgumentError("iteration must be >= 0")
        if set(self.labeled) & set(self.unlabeled):
            raise InvalidTransitionError("labeled and unlabeled sets overlap")
        if len(set(self.labeled)) != len(self.labeled) or len(set(self.unlabeled)) != len(self.unlabeled):
            raise InvalidArgumentError("duplicate ids in pool state")

    @classmethod
    def initial(cls, pool_ids: Sequence[str], proxy_ranking: Optional[RankedPool] = None) -> "PoolState":
        return cls(0, (), tuple(sorted(pool_ids)), (), proxy_ranking)

    @property
    def pool_size(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    def to_json(self) -> dict:
        return {
            "version": STATE_VERSION,
            "iteration": self.iteration,
            "labeled": list(self.labeled),
            "unlabeled": list(self.unlabeled),
            "noisy": list(self.noisy),
            "proxy_ranking": None if self.proxy_ranking is None else [[i, s] for i, s in self.proxy_ranking.entries],
        }

    @classmethod
    def from_json(cls, doc) -> "PoolState":
        if not isinstance(doc, dict):
            raise FormatError("pool state must be a JSON object")
        if doc.get("version") != STATE_VERSION:
            raise VersionMismatchError(f"pool state version {doc.get('version')!r}, expected {STATE_VERSION}")
        try:
            ranking = doc["proxy_ranking"]
            pool = None if ranking is None else RankedPool(tuple((str(i), float(s)) for i, s in ranking), "proxy")
            return cls(
                int(doc["iteration"]),
                tuple(str(i) for i in doc["labeled"]),
                tuple(str(i) for i in doc["unlabeled"]),
                tuple(str(i) for i in doc["noisy"]),
                pool,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed pool state: {exc}") from exc


def encode_state(state: PoolState) -> bytes:
    return (json.dumps(state.to_json(), indent=1) + "\n").encode()


def decode_state(buf: bytes) -> PoolState:
    try:
        doc = json.loads(buf.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt pool state: {exc}") from exc
    return PoolState.from_json(doc)


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_state(path, state: PoolState) -> None:
    _atomic_write(path, encode_state(state))


def load_state(path) -> PoolState:
    return decode_state(Path(path).read_bytes())


def simulate_annotation(state: PoolState, ids: Sequence[str]) -> PoolState:
    """Move ``ids`` from the unlabeled pool to the labeled set (the oracle supplies truth)."""
    ids = list(ids)
    unlabeled = set(state.unlabeled)
    bad = [i for i in ids if i not in unlabeled]
    if bad or len(set(ids)) != len(ids):
        raise InvalidTransitionError(f"cannot annotate ids not in the unlabeled pool: {bad or ids}")
    chosen = set(ids)
    return replace(
        state,
        labeled=state.labeled + tuple(ids),
        unlabeled=tuple(i for i in state.unlabeled if i not in chosen),
    )


# -- dataset view ------------------------------------------------------------------


class Dataset:
    """Training pool and frozen validation set with cached network inputs."""

    def __init__(self, train: Sequence[LabeledCase], val: Sequence[LabeledCase], input_window=(40.0, 400.0)):
        self.train = {c.id: c for c in train}
        self.val = list(val)
        self.input_window = tuple(input_window)
        self._inputs: Dict[str, Volume3D] = {}

    @classmethod
    def load(cls, data_dir, input_window=(40.0, 400.0)) -> "Dataset":
        train, val = load_dataset(data_dir)
        return cls(train, val, input_window)

    @property
    def pool_ids(self) -> List[str]:
        return sorted(self.train)

    def case(self, case_id: str) -> LabeledCase:
        if case_id in self.train:
            return self.train[case_id]
        for c in self.val:
            if c.id == case_id:
                return c
        raise KeyError(case_id)

    def input(self, case: LabeledCase) -> Volume3D:
        if case.id not in self._inputs:
            self._inputs[case.id] = window_normalize(case.volume, *self.input_window)
        return self._inputs[case.id]


def _model_config(s: SettingConfig, out_channels: int) -> ModelConfig:
    return ModelConfig(
        levels=s.levels, base_channels=s.base_channels, in_channels=1, out_channels=out_channels,
        dropout_rate=s.dropout_rate, residual_blocks=s.residual_blocks,
    )


def _train_settings(s: SettingConfig, steps: int, fg_ratio) -> TrainSettings:
    return TrainSettings(steps, s.lr, s.patch_size, s.batch_size, fg_ratio)


def predict_labels(params: ModelParams, data: Dataset, case: LabeledCase, s: SettingConfig):
    return sliding_window_predict(params, data.input(case), s.inference_patch, s.overlap)


def evaluate(params: ModelParams, data: Dataset, s: SettingConfig) -> List[dict]:
    """Per-volume validation Dice of an eval-mode sliding-window prediction."""
    first = 0 if s.include_background_dice else 1
    rows = []
    for case in data.val:
        pred = predict_labels(params, data, case, s).argmax()
        per_class = [dice_score(pred, case.truth, c) for c in range(params.config.out_channels)]
        row = {"case_id": case.id, "dice_organ": per_class[1], "dice_lesion": per_class[2] if len(per_class) > 2 else 1.0}
        row["dice_mean"] = float(np.mean(per_class[first:]))
        rows.append(row)
    return rows


def score_pool(params: ModelParams, data: Dataset, ids: Sequence[str], s: SettingConfig, seed: int, *tag) -> Dict[str, dict]:
    """MC-dropout scores of both kinds for each id."""
    out = {}
    for i in ids:
        base = derive_seed(seed, "mc", *tag, i)
        out[i] = score_volume(params, data.input(data.train[i]), s.m, base, s.inference_patch, s.overlap)
    return out


def _ranking(scores: Dict[str, dict], kind: str, provenance: str) -> RankedPool:
    return acquisition.rank([v[kind] for v in scores.values()], provenance)


# -- proxy stage -----------------------------------------------------------------------


@dataclass
class ProxyResult:
    checkpoint: Checkpoint
    ranking: RankedPool
    scores: Dict[str, Tuple[float, float]]  # id -> (variance, entropy)
    best_val_dice: float


PROXY_KEYS = (
    "proxy_steps", "proxy_val_every", "lr", "patch_size", "batch_size", "inference_patch", "overlap", "m",
    "dropout_rate", "window", "input_window", "connectivity", "keep_top", "levels", "base_channels",
    "residual_blocks", "fg_bg_labeled", "proxy_kind",
)


def proxy_key(s: SettingConfig) -> str:
    doc = {k: getattr(s, k) for k in PROXY_KEYS}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def run_proxy_stage(data: Dataset, s: SettingConfig, seed: int, unlabeled: Optional[Sequence[str]] = None) -> ProxyResult:
    """Pseudo-label the pool, train the binary proxy model and rank the pool by its uncertainty."""
    ids = sorted(unlabeled if unlabeled is not None else data.pool_ids)
    if not ids:
        raise InvalidArgumentError("proxy stage needs a non-empty unlabeled pool")
    pseudo = lambda c: make_pseudo_label(c.volume, s.window, s.connectivity, s.keep_top).data
    items = [TrainItem(i, data.input(data.train[i]).data, pseudo(data.train[i])) for i in ids]
    val_truth = [(c, pseudo(c)) for c in data.val]

    config = _model_config(s, 2)
    params = init_params(config, derive_seed(seed, "proxy", "init"))
    best = {"dice": -1.0, "params": params, "step": 0}

    def validate(step, p, loss):
        done = step + 1
        if done % s.proxy_val_every and done != s.proxy_steps:
            return
        dices = [dice_score(predict_labels(p, data, c, s).argmax(), t, 1) for c, t in val_truth]
        d = float(np.mean(dices)) if dices else 0.0
        log.debug("proxy step %d loss %.4f val dice %.4f", done, loss, d)
        if d > best["dice"]:
            best.update(dice=d, params=p, step=done)

    try:
        _, adam, _ = train_supervised(params, items, _train_settings(s, s.proxy_steps, s.fg_bg_labeled),
                                      derive_seed(seed, "proxy", "train"), validate)
    except DivergenceError as exc:
        raise DivergenceError(f"proxy training diverged: {exc}") from exc
    ck = Checkpoint(config, best["params"], AdamState.zeros_like(best["params"]), best["step"], "proxy")
    scores = score_pool(ck.params, data, ids, s, seed, "proxy")
    ranking = _ranking(scores, s.proxy_kind, "proxy")
    flat = {i: (v["variance"].score, v["entropy"].score) for i, v in scores.items()}
    return ProxyResult(ck, ranking, flat, best["dice"])


def save_proxy(directory, result: ProxyResult, wall_s: float = 0.0) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "proxy.ckpt", result.checkpoint)
    rows = [[i, repr(v), repr(e)] for i, (v, e) in sorted(result.scores.items())]
    write_csv(d / "scores.csv", ["id", "variance", "entropy"], rows)
    acquisition.write_ranking_csv(d / "ranking.csv", result.ranking)
    (d / "meta.json").write_text(json.dumps({"best_val_dice": repr(result.best_val_dice), "wall_s": wall_s}) + "\n")
    _atomic_write(d / "done", b"ok\n")


def load_proxy(directory, kind: str) -> ProxyResult:
    d = Path(directory)
    ck = load_checkpoint(d / "proxy.ckpt")
    scores = {r["id"]: (float(r["variance"]), float(r["entropy"])) for r in read_csv(d / "scores.csv")}
    idx = 0 if kind == "variance" else 1
    ranking = RankedPool(tuple((i, sc[idx]) for i, sc in sorted(scores.items(), key=lambda kv: (-kv[1][idx], kv[0]))), "proxy")
    meta = json.loads((d / "meta.json").read_text())
    return ProxyResult(ck, ranking, scores, float(meta["best_val_dice"]))


# -- one active iteration -------------------------------------------------------------


@dataclass
class IterationResult:
    state: PoolState  # after annotation, iteration advanced
    checkpoint: Checkpoint
    row: MetricsRow
    per_volume: List[dict]
    noisy: Tuple[str, ...]
    selected: Tuple[str, ...]


def _items(data: Dataset, ids: Sequence[str]) -> List[TrainItem]:
    return [TrainItem(i, data.input(data.train[i]).data, data.train[i].truth.data) for i in ids]


def run_active_iteration(
    state: PoolState,
    start: Optional[Checkpoint],
    s: SettingConfig,
    data: Dataset,
    seed: int,
    previous: Optional[Checkpoint] = None,
) -> IterationResult:
    """Train on the labeled set, optionally fine-tune semi-supervised, evaluate, and select the next batch.

    ``start`` is the proxy checkpoint (or None for a fresh initialisation);
    ``previous`` is the last iteration's model, used with ``warm_start_from = previous``.
    """
    t = state.iteration
    if not state.labeled:
        raise InvalidArgumentError("active iteration needs at least one labeled volume")
    config = _model_config(s, NUM_CLASSES)
    if previous is not None and s.warm_start_from == "previous":
        params = previous.params.clone()
    elif start is not None:
        params = warm_start(config, start)
    else:
        params = init_params(config, derive_seed(seed, "init"))

    # (a) supervised stage on all labeled data
    labeled = _items(data, state.labeled)
    params, adam, _ = train_supervised(params, labeled, _train_settings(s, s.step_budget, s.fg_bg_labeled),
                                       derive_seed(seed, "sup", t))
    provenance = "supervised"

    # (b) semi-supervised fine-tuning on the most certain unlabeled volumes
    noisy: Tuple[str, ...] = ()
    if s.semi_supervised and state.unlabeled:
        scores = score_pool(params, data, state.unlabeled, s, seed, "certain", t)
        count = min(len(state.labeled), len(state.unlabeled))
        noisy = tuple(sorted(acquisition.select_most_certain(_ranking(scores, s.certainty_kind, "supervised"), count)))
        noisy_items = []
        for i in noisy:
            probs = predict_labels(params, data, data.train[i], s)
            noisy_items.append(TrainItem(i, data.input(data.train[i]).data, generate_noisy_label(probs, s.tau).data))
        aug = AugmentConfig(s.aug_shift, s.aug_scale, s.aug_noise)
        params, adam = finetune_semi(
            params, labeled, noisy_items, _train_settings(s, s.semi_step_budget, s.fg_bg_labeled), s.fg_bg_noisy,
            s.alpha, s.beta, derive_seed(seed, "semi", t), aug, s.consistency_target == "hard",
        )
        provenance = "semi"
    ck = Checkpoint(config, params, adam, adam.step, provenance)

    # (d) validation
    per_volume = evaluate(params, data, s)
    means = {k: float(np.mean([r[k] for r in per_volume])) for k in ("dice_organ", "dice_lesion", "dice_mean")}
    if not all(np.isfinite(v) for v in means.values()):
        raise DivergenceError(f"non-finite validation metric at iteration {t}")
    row = MetricsRow(s.name, seed, t, len(state.labeled), pct_labeled(len(state.labeled), state.pool_size), **means)

    # (c) selection for the next iteration
    selected: List[str] = []
    if t < s.j:
        k = min(s.k, len(state.unlabeled))
        if s.acquisition == "random":
            selected = acquisition.random_select(list(state.unlabeled), k, derive_seed(seed, "acq", t))
        elif s.acquisition == "proxy_static":
            if state.proxy_ranking is None:
                raise InvalidArgumentError("proxy_static acquisition without a proxy ranking")
            selected = acquisition.select_most_uncertain(state.proxy_ranking.restricted(state.unlabeled), k)
        else:
            scores = score_pool(params, data, state.unlabeled, s, seed, "acq", t)
            selected = acquisition.select_most_uncertain(_ranking(scores, s.acquisition, provenance), k)
    new_state = simulate_annotation(state, selected)
    new_state = replace(new_state, iteration=t + 1, noisy=noisy)
    return IterationResult(new_state, ck, row, per_volume, noisy, tuple(selected))


def cold_start(s: SettingConfig, data: Dataset, seed: int, proxy: Optional[ProxyResult]) -> PoolState:
    state = PoolState.initial(data.pool_ids, proxy.ranking if proxy is not None and s.proxy_ranking else None)
    k = min(s.k, len(state.unlabeled))
    if s.proxy_ranking:
        if proxy is None:
            raise InvalidArgumentError("proxy ranking requested without a proxy stage")
        first = acquisition.select_most_uncertain(state.proxy_ranking, k)
    else:
        first = acquisition.random_select(list(state.unlabeled), k, derive_seed(seed, "cold"))
    return simulate_annotation(state, first)


def needs_proxy(s: SettingConfig) -> bool:
    return s.proxy_ranking or s.pretrained_weights


# -- experiment runner ----------------------------------------------------------------

Observer = Callable[[PoolState, IterationResult], None]


def _cell_dir(out: Path, s: SettingConfig, seed: int) -> Path:
    return out / "cells" / s.name / f"seed_{seed}"


def _proxy_dir(out: Path, s: SettingConfig, seed: int) -> Path:
    return out / "proxy" / f"{proxy_key(s)}_seed_{seed}"


def _data_for(s: SettingConfig, data_dir) -> Dataset:
    global _DATA_CACHE
    key = (str(data_dir), s.input_window)
    if _DATA_CACHE is None or _DATA_CACHE[0] != key:
        _DATA_CACHE = (key, Dataset.load(data_dir, s.input_window))
    return _DATA_CACHE[1]


_DATA_CACHE = None


def ensure_proxy(s: SettingConfig, data: Dataset, seed: int, out: Path) -> Tuple[ProxyResult, float]:
    d = _proxy_dir(out, s, seed)
    if not (d / "done").exists():
        t0 = time.perf_counter()
        result = run_proxy_stage(data, s, seed)
        save_proxy(d, result, time.perf_counter() - t0)
    # always reload so fresh and cached runs see bit-identical values
    wall = float(json.loads((d / "meta.json").read_text()).get("wall_s", 0.0))
    return load_proxy(d, s.proxy_kind), wall


def _row_from_dict(d: dict) -> MetricsRow:
    return MetricsRow.from_csv(d)


def run_cell(
    s: SettingConfig,
    data: Dataset,
    seed: int,
    out: Path,
    resume: bool = False,
    stop_after: Optional[int] = None,
    observer: Optional[Observer] = None,
) -> Tuple[List[MetricsRow], List[dict], List[Tuple[int, float]]]:
    """Run (or resume) one setting x seed cell; returns metrics rows, per-volume rows and iteration timings."""
    torch.set_num_threads(1)
    cell = _cell_dir(out, s, seed)
    if cell.exists() and not resume:
        shutil.rmtree(cell)
    cell.mkdir(parents=True, exist_ok=True)
    proxy = ensure_proxy(s, data, seed, out)[0] if needs_proxy(s) else None
    start = proxy.checkpoint if proxy is not None and s.pretrained_weights else None

    state_path = cell / "state.json"
    rows: List[MetricsRow] = []
    per_volume: List[dict] = []
    previous = None
    if resume and state_path.exists():
        state = load_state(state_path)
        rows = [_row_from_dict(r) for r in read_csv(cell / "rows.csv") if int(r["iteration"]) < state.iteration]
        per_volume = [r for r in read_csv(cell / "per_volume.csv") if int(r["iteration"]) < state.iteration]
        if state.iteration > 0:
            previous = load_checkpoint(cell / f"model_iter{state.iteration - 1}.ckpt")
        timings = [(int(r["iteration"]), float(r["wall_s"])) for r in read_csv(cell / "timing.csv")
                   if int(r["iteration"]) < state.iteration]
    else:
        state = cold_start(s, data, seed, proxy)
        save_state(state_path, state)
        timings = []

    done_now = 0
    while state.iteration <= s.j:
        if stop_after is not None and done_now >= stop_after:
            break
        t0 = time.perf_counter()
        res = run_active_iteration(state, start, s, data, seed, previous)
        wall = time.perf_counter() - t0
        timings.append((state.iteration, wall))
        if observer is not None:
            observer(state, res)
        rows.append(res.row)
        per_volume.extend({"setting": s.name, "seed": seed, "iteration": state.iteration, **r} for r in res.per_volume)
        save_checkpoint(cell / f"model_iter{state.iteration}.ckpt", res.checkpoint)
        write_csv(cell / "rows.csv", METRICS_HEADER, [r.csv_row() for r in rows])
        write_csv(cell / "per_volume.csv", PER_VOLUME_HEADER, [_per_volume_line(r) for r in per_volume])
        write_csv(cell / "timing.csv", ["iteration", "wall_s"], [[i, f"{w:.3f}"] for i, w in timings])
        save_state(cell / f"state_after_iter{state.iteration}.json", res.state)
        save_state(state_path, res.state)
        previous, state = res.checkpoint, res.state
        done_now += 1
        log.info("%s seed %d iteration %d dice %.4f (%.1fs)", s.name, seed, res.row.iteration, res.row.dice_mean, wall)
    return rows, per_volume, timings


def _per_volume_line(r: dict) -> List[str]:
    return [r["setting"], str(r["seed"]), str(r["iteration"]), r["case_id"]] + [
        f"{float(r[k]):.6f}" for k in ("dice_organ", "dice_lesion", "dice_mean")
    ]


def _proxy_job(args):
    s, data_dir, seed, out = args
    torch.set_num_threads(1)
    _, wall = ensure_proxy(s, _data_for(s, data_dir), seed, Path(out))
    return s.name, seed, wall


def _cell_job(args):
    s, data_dir, seed, out, resume, stop_after = args
    rows, per_volume, timings = run_cell(s, _data_for(s, data_dir), seed, Path(out), resume, stop_after)
    return s.name, seed, rows, per_volume, timings


def _map(fn, jobs: Sequence, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("spawn")) as pool:
        return list(pool.map(fn, jobs))


@dataclass
class ExperimentResult:
    rows: List[MetricsRow]
    per_volume: List[dict]
    timings: List[Tuple[str, int, str, float]]  # setting, seed, stage, seconds
    complete: bool


def run_experiment(
    settings: Sequence[SettingConfig],
    data_dir,
    out_dir,
    resume: bool = False,
    jobs: int = 1,
    stop_after: Optional[int] = None,
    record_wall_time: bool = False,
    seeds: Optional[Sequence[int]] = None,
) -> ExperimentResult:
    """Run every setting x seed cell and write metrics.csv, per_volume.csv, timing.csv and the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [(s, seed) for s in settings for seed in (seeds if seeds is not None else s.seeds)]

    proxy_jobs, seen = [], set()
    for s, seed in cells:
        key = (proxy_key(s), seed)
        if needs_proxy(s) and key not in seen:
            seen.add(key)
            proxy_jobs.append((s, str(data_dir), seed, str(out)))
    timings = [(name, seed, "proxy", wall) for name, seed, wall in _map(_proxy_job, proxy_jobs, jobs)]

    cell_jobs = [(s, str(data_dir), seed, str(out), resume, stop_after) for s, seed in cells]
    results = _map(_cell_job, cell_jobs, jobs)

    order = {s.name: n for n, s in enumerate(settings)}
    rows, per_volume = [], []
    for name, seed, r, pv, tm in results:
        rows.extend(r)
        per_volume.extend(pv)
        timings.extend((name, seed, f"iter{it}", wall) for it, wall in tm)
    rows.sort(key=lambda r: (order[r.setting], r.seed, r.iteration))
    per_volume.sort(key=lambda r: (order[r["setting"]], int(r["seed"]), int(r["iteration"]), r["case_id"]))
    if record_wall_time:
        walls = {(n, sd, st): w for n, sd, st, w in timings}
        rows = [replace(r, wall_s=walls.get((r.setting, r.seed, f"iter{r.iteration}"))) for r in rows]
    else:
        rows = [replace(r, wall_s=None) for r in rows]

    write_csv(out / "metrics.csv", METRICS_HEADER, [r.csv_row() for r in rows])
    write_csv(out / "per_volume.csv", PER_VOLUME_HEADER, [_per_volume_line(r) for r in per_volume])
    write_csv(out / "timing.csv", ["setting", "seed", "stage", "wall_s"], [[n, sd, st, f"{w:.3f}"] for n, sd, st, w in timings])
    # normalise through the CSV text so fresh and resumed runs report identical values
    rows = [MetricsRow.from_csv(dict(zip(METRICS_HEADER, r.csv_row()))) for r in rows]
    complete = len(rows) == sum(s.j + 1 for s, _ in cells)
    if rows:
        write_report(report(rows, per_volume), out / "summary.csv", out / "pairwise_wilcoxon.csv", out / "report.md")
    return ExperimentResult(rows, per_volume, timings, complete)
