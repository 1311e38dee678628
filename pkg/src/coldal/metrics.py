"""Dice, the Wilcoxon signed-rank test, and aggregation of run metrics."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidArgumentError, UndefinedTestError
from .volume import LabelMap

CLASS_NAMES = {1: "organ", 2: "lesion"}


def dice_score(pred: LabelMap | np.ndarray, truth: LabelMap | np.ndarray, cls: int) -> float:
    """2|X n Y| / (|X| + |Y|) for class ``cls``; 1.0 when both are empty."""
    p = pred.data if isinstance(pred, LabelMap) else np.asarray(pred)
    t = truth.data if isinstance(truth, LabelMap) else np.asarray(truth)
    if p.shape != t.shape:
        raise InvalidArgumentError(f"shape mismatch {p.shape} vs {t.shape}")
    x, y = p == cls, t == cls
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((x & y).sum()) / total


# -- Wilcoxon signed-rank ----------------------------------------------------

EXACT_MAX_N = 25
ALTERNATIVES = ("two-sided", "greater", "less")


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # sum of ranks of pairs with a < b
    p_value: float
    n: int
    method: str


def _exact_upper_lower(ranks2: np.ndarray, obs2: int) -> Tuple[float, float]:
    """P(T >= obs) and P(T <= obs) under random signs; ranks given doubled as ints."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    n_patterns = 2 ** len(ranks2)
    upper = sum(counts[obs2:]) / n_patterns
    lower = sum(counts[: obs2 + 1]) / n_patterns
    return float(upper), float(lower)


def wilcoxon_signed_rank(
    a: Sequence[float], b: Sequence[float], alternative: str = "two-sided"
) -> WilcoxonResult:
    """Paired signed-rank test on ``a - b``.

    Zero differences are dropped and tied magnitudes get mid-ranks. The null
    distribution is exact (all sign patterns) for up to 25 non-zero pairs,
    otherwise a tie-corrected normal approximation with continuity correction.
    ``greater`` tests whether ``a`` tends to exceed ``b``.
    """
    if alternative not in ALTERNATIVES:
        raise InvalidArgumentError(f"alternative must be one of {ALTERNATIVES}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidArgumentError("samples must be 1D and of equal length")
    if len(a) < 5:
        raise InvalidArgumentError("need at least 5 pairs")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise UndefinedTestError("all paired differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())

    if n <= EXACT_MAX_N:
        ranks2 = np.rint(ranks * 2).astype(np.int64)
        upper, lower = _exact_upper_lower(ranks2, int(round(w_plus * 2)))
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts**3) - tie_counts).sum()) / 48.0
        sd = math.sqrt(var)
        upper = 0.5 * math.erfc(((w_plus - mean - 0.5) / sd) / math.sqrt(2.0))
        lower = 0.5 * math.erfc(-((w_plus - mean + 0.5) / sd) / math.sqrt(2.0))
        method = "normal"
    if alternative == "greater":
        p = upper
    elif alternative == "less":
        p = lower
    else:
        p = min(1.0, 2.0 * min(upper, lower))
    return WilcoxonResult(w_minus, min(1.0, p), n, method)


# -- run metrics ---------------------------------------------------------------

METRICS_HEADER = [
    "setting", "seed", "iteration", "labeled_count", "pct_labeled",
    "dice_organ", "dice_lesion", "dice_mean", "wall_s",
]
PER_VOLUME_HEADER = ["setting", "seed", "iteration", "case_id", "dice_organ", "dice_lesion", "dice_mean"]


@dataclass
class MetricsRow:
    setting: str
    seed: int
    iteration: int
    labeled_count: int
    pct_labeled: float
    dice_organ: float
    dice_lesion: float
    dice_mean: float
    wall_s: Optional[float] = None

    def __post_init__(self):
        for name in ("dice_organ", "dice_lesion", "dice_mean"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise InvalidArgumentError(f"{name}={value} outside [0, 1]")

    def csv_row(self) -> List[str]:
        return [
            self.setting, str(self.seed), str(self.iteration), str(self.labeled_count),
            f"{self.pct_labeled:.4f}", f"{self.dice_organ:.6f}", f"{self.dice_lesion:.6f}",
            f"{self.dice_mean:.6f}", "" if self.wall_s is None else f"{self.wall_s:.3f}",
        ]

    @classmethod
    def from_csv(cls, row: dict) -> "MetricsRow":
        return cls(
            row["setting"], int(row["seed"]), int(row["iteration"]), int(row["labeled_count"]),
            float(row["pct_labeled"]), float(row["dice_organ"]), float(row["dice_lesion"]),
            float(row["dice_mean"]), float(row["wall_s"]) if row.get("wall_s") else None,
        )


def pct_labeled(labeled_count: int, pool_size: int) -> float:
    return 100.0 * labeled_count / pool_size


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())  # population std: 0 for one seed


@dataclass
class Summary:
    per_iteration: List[dict]
    final: List[dict]
    pairwise: List[dict]


MEAN_NOTE = "dice_mean averages non-background classes (organ, lesion) without weighting"


def report(
    metrics: Sequence[MetricsRow],
    per_volume: Sequence[dict] = (),
    alternative: str = "two-sided",
) -> Summary:
    """Aggregate over seeds per (setting, iteration) and compare settings at their final iteration."""
    if not metrics:
        raise InvalidArgumentError("report needs at least one metrics row")
    order: List[str] = []
    groups: Dict[Tuple[str, int], List[MetricsRow]] = defaultdict(list)
    for row in metrics:
        if row.setting not in order:
            order.append(row.setting)
        groups[(row.setting, row.iteration)].append(row)

    per_iter = []
    for setting in order:
        iters = sorted(i for s, i in groups if s == setting)
        for it in iters:
            rows = groups[(setting, it)]
            entry = {
                "setting": setting, "iteration": it, "labeled_count": rows[0].labeled_count,
                "pct_labeled": rows[0].pct_labeled, "n_seeds": len(rows),
            }
            for key in ("dice_mean", "dice_organ", "dice_lesion"):
                m, s = _mean_std([getattr(r, key) for r in rows])
                entry[f"{key}_mean"], entry[f"{key}_std"] = m, s
            per_iter.append(entry)
    final_iter = {s: max(i for t, i in groups if t == s) for s in order}
    final = [e for e in per_iter if e["iteration"] == final_iter[e["setting"]]]

    volumes: Dict[str, Dict[Tuple[int, str], float]] = defaultdict(dict)
    for row in per_volume:
        setting, it = row["setting"], int(row["iteration"])
        if setting in final_iter and it == final_iter[setting]:
            volumes[setting][(int(row["seed"]), row["case_id"])] = float(row["dice_mean"])
    pairwise = []
    for s1, s2 in combinations(order, 2):
        keys = sorted(set(volumes[s1]) & set(volumes[s2]))
        entry = {"setting_a": s1, "setting_b": s2, "n_pairs": len(keys), "statistic": "", "p_value": "", "method": ""}
        if len(keys) >= 5:
            try:
                res = wilcoxon_signed_rank([volumes[s1][k] for k in keys], [volumes[s2][k] for k in keys], alternative)
                entry.update(statistic=res.statistic, p_value=res.p_value, method=res.method)
            except UndefinedTestError:
                entry.update(method="undefined")
        pairwise.append(entry)
    return Summary(per_iter, final, pairwise)


SUMMARY_HEADER = [
    "setting", "iteration", "labeled_count", "pct_labeled", "n_seeds",
    "dice_mean_mean", "dice_mean_std", "dice_organ_mean", "dice_organ_std", "dice_lesion_mean", "dice_lesion_std",
]
PAIRWISE_HEADER = ["setting_a", "setting_b", "n_pairs", "statistic", "p_value", "method"]


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_report(summary: Summary, summary_csv, pairwise_csv, text_path=None) -> None:
    write_csv(summary_csv, SUMMARY_HEADER, [[_fmt(e[h]) for h in SUMMARY_HEADER] for e in summary.per_iteration])
    write_csv(pairwise_csv, PAIRWISE_HEADER, [[_fmt(e[h]) for h in PAIRWISE_HEADER] for e in summary.pairwise])
    if text_path is None:
        return
    lines = [
        "# Active learning summary",
        "",
        f"Note: {MEAN_NOTE}.",
        "",
        "## Final iteration (mean +- std over seeds)",
        "",
        "| setting | iteration | % labeled | dice_mean | dice_organ | dice_lesion |",
        "|---|---|---|---|---|---|",
    ]
    for e in summary.final:
        lines.append(
            f"| {e['setting']} | {e['iteration']} | {e['pct_labeled']:.1f} | "
            f"{e['dice_mean_mean']:.4f} +- {e['dice_mean_std']:.4f} | "
            f"{e['dice_organ_mean']:.4f} +- {e['dice_organ_std']:.4f} | "
            f"{e['dice_lesion_mean']:.4f} +- {e['dice_lesion_std']:.4f} |"
        )
    Path(text_path).write_text("\n".join(lines) + "\n")
