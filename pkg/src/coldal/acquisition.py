"""Ranking of the unlabeled pool and the selection rules built on it."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

from .errors import InvalidArgumentError
from .rng import rng_for
from .uncertainty import VolumeScore

PROVENANCES = ("proxy", "supervised", "semi", "random")
DEFAULT_K = 5


@dataclass(frozen=True)
class RankedPool:
    entries: Tuple[Tuple[str, float], ...]
    provenance: str = "supervised"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise InvalidArgumentError(f"unknown provenance {self.provenance!r}")
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError("ranked pool ids must be unique")

    @property
    def ids(self) -> List[str]:
        return [i for i, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def restricted(self, keep: Iterable[str]) -> "RankedPool":
        keep = set(keep)
        return RankedPool(tuple(e for e in self.entries if e[0] in keep), self.provenance)


def rank(scores: Sequence[VolumeScore], provenance: str = "supervised") -> RankedPool:
    """Descending by score, ties broken by ascending id."""
    ids = [s.id for s in scores]
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError("duplicate volume ids in scores")
    ordered = sorted(scores, key=lambda s: (-s.score, s.id))
    return RankedPool(tuple((s.id, s.score) for s in ordered), provenance)


def select_most_uncertain(pool: RankedPool, k: int = DEFAULT_K) -> List[str]:
    if k < 0 or k > len(pool):
        raise InvalidArgumentError(f"cannot select {k} from a pool of {len(pool)}")
    return pool.ids[:k]


def select_most_certain(pool: RankedPool, count: int) -> List[str]:
    if count < 0 or count > len(pool):
        raise InvalidArgumentError(f"cannot select {count} from a pool of {len(pool)}")
    return pool.ids[len(pool) - count:] if count else []


def random_select(ids: Sequence[str], k: int, seed: int) -> List[str]:
    ids = list(ids)
    if k < 0 or k > len(ids):
        raise InvalidArgumentError(f"cannot select {k} from {len(ids)} ids")
    order = rng_for(seed, "random_select").permutation(len(ids))[:k]
    return [ids[i] for i in order]


def write_ranking_csv(path, pool: RankedPool) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "score", "rank", "provenance"])
        for r, (vid, s) in enumerate(pool.entries, start=1):
            w.writerow([vid, repr(float(s)), r, pool.provenance])


def read_ranking_csv(path) -> RankedPool:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    prov = rows[0]["provenance"] if rows else "proxy"
    rows.sort(key=lambda r: int(r["rank"]))
    return RankedPool(tuple((r["id"], float(r["score"])) for r in rows), prov)
