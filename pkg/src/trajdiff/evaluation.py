"""Recovery metrics and rule-based baselines."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, TextIO, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Dataset, Grid, MaskSet, Trajectory, distance_meters
from .errors import InputError
from .ingest import mask_targets, trajectory_seed

SlotKey = Tuple[str, int, int]


class RecoveryCase(NamedTuple):
    """A current day with ground truth, its mask and the user's prior days."""

    traj: Trajectory
    mask: MaskSet
    history: Sequence[Trajectory]

    @property
    def visible(self) -> Trajectory:
        return self.mask.visible(self.traj)


def cases_from_dataset(ds: Dataset, split: str = "test", ratio: Optional[float] = None,
                       seed: int = 0) -> List[RecoveryCase]:
    """Build cases for ``split``; ``ratio`` re-masks instead of using stored masks."""
    cases = []
    for t in ds.trajectories(split):
        if ratio is not None:
            if t.n_observed == 0:
                continue
            mask = mask_targets(t, ratio, trajectory_seed(seed, t))
        else:
            mask = ds.masks.get((t.user, t.day))
            if mask is None:
                continue
        if mask.target_idx:
            cases.append(RecoveryCase(t, mask, ds.history(t)))
    return cases


def truth_of(cases: Iterable[RecoveryCase]) -> Dict[SlotKey, int]:
    return {(c.traj.user, c.traj.day, n): c.traj.slots[n] for c in cases for n in c.mask.target_idx}


@dataclass
class RecoveryOutput:
    """Ranked candidate locations for every TARGET slot, keyed (user, day, slot)."""

    rankings: Dict[SlotKey, np.ndarray] = field(default_factory=dict)
    scores: Dict[SlotKey, np.ndarray] = field(default_factory=dict)

    def top1(self, key: SlotKey) -> int:
        return int(self.rankings[key][0])

    def __len__(self):
        return len(self.rankings)

    def add(self, key: SlotKey, ranking, scores=None):
        ranking = np.asarray(ranking, dtype=np.int64)
        if len(np.unique(ranking)) != len(ranking):
            raise InputError(f"ranking for {key} repeats a location")
        self.rankings[key] = ranking
        if scores is not None:
            self.scores[key] = np.asarray(scores)


def _check(outputs: RecoveryOutput, truth: Dict[SlotKey, int]):
    if not truth:
        raise InputError("no TARGET slots to score")
    missing = [k for k in truth if k not in outputs.rankings or len(outputs.rankings[k]) == 0]
    if missing:
        raise InputError(f"{len(missing)} TARGET slot(s) lack a prediction, e.g. {missing[0]}")


def recall(outputs: RecoveryOutput, truth: Dict[SlotKey, int], k: int = 1) -> float:
    """Share of TARGET slots whose true location is among the top ``k``."""
    _check(outputs, truth)
    hits = sum(int(loc in outputs.rankings[key][:k]) for key, loc in truth.items())
    return hits / len(truth)


def map_metric(outputs: RecoveryOutput, truth: Dict[SlotKey, int]) -> float:
    """Mean reciprocal rank of the true location (0 when it is not ranked)."""
    if not truth:
        raise InputError("no TARGET slots to score")
    total = 0.0
    for key, loc in truth.items():
        ranking = outputs.rankings.get(key, np.empty(0, dtype=np.int64))
        pos = np.flatnonzero(ranking == loc)
        if len(pos):
            total += 1.0 / (pos[0] + 1)
    return total / len(truth)


def distance_metric(outputs: RecoveryOutput, truth: Dict[SlotKey, int], grid: Grid) -> float:
    _check(outputs, truth)
    return float(np.mean([distance_meters(outputs.top1(k), loc, grid) for k, loc in truth.items()]))


@dataclass
class Report:
    recall: float
    map: float
    distance_m: float
    n_targets: int
    by_ratio: Dict[float, "Report"] = field(default_factory=dict)

    def lines(self) -> List[str]:
        out = [
            f"recall = {self.recall:.6f}",
            f"map = {self.map:.6f}",
            f"distance_m = {self.distance_m:.3f}",
            f"n_targets = {self.n_targets}",
        ]
        if self.by_ratio:
            out.append("[missing_ratio]")
            out.append("ratio\trecall\tmap\tdistance_m\tn_targets")
            for r in sorted(self.by_ratio):
                s = self.by_ratio[r]
                out.append(f"{r:g}\t{s.recall:.6f}\t{s.map:.6f}\t{s.distance_m:.3f}\t{s.n_targets}")
        return out

    def write(self, stream: TextIO, header: Optional[Dict[str, object]] = None) -> None:
        if header:
            stream.write("# config " + " ".join(f"{k}={header[k]}" for k in sorted(header)) + "\n")
        stream.write("\n".join(self.lines()) + "\n")


def make_report(outputs: RecoveryOutput, truth: Dict[SlotKey, int], grid: Grid) -> Report:
    return Report(recall(outputs, truth), map_metric(outputs, truth), distance_metric(outputs, truth, grid), len(truth))


def read_report(stream) -> Dict[str, float]:
    text = stream if isinstance(stream, str) else stream.read()
    out = {}
    for line in text.splitlines():
        if line.startswith("[") or line.startswith("#"):
            if line.startswith("["):
                break
            continue
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = float(v)
    return out


# -- baselines ------------------------------------------------------------------

def _distance_ranking(first: int, grid: Grid) -> np.ndarray:
    fr, fc = grid.row_col(first)
    ids = np.arange(grid.n_cells)
    rows, cols = np.divmod(ids, grid.cols)
    d2 = (rows - fr) ** 2 + (cols - fc) ** 2
    order = np.lexsort((ids, d2))
    return order


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


class LinearBaseline(BaseEstimator):
    """Interpolate grid row/col linearly between neighbouring observations."""

    def __init__(self, grid: Optional[Grid] = None):
        self.grid = grid

    def fit(self, X=None, y=None):
        if self.grid is None:
            if not isinstance(X, Dataset):
                raise InputError("LinearBaseline needs a grid or a Dataset to take it from")
            self.grid_ = X.grid
        else:
            self.grid_ = self.grid
        return self

    def predict_slot(self, visible: Trajectory, n: int) -> int:
        obs = visible.observed_idx
        if not obs:
            raise InputError(f"trajectory {visible.user}/{visible.day} has no observed slot")
        before = [k for k in obs if k < n]
        after = [k for k in obs if k > n]
        if not before:
            return visible.slots[after[0]]
        if not after:
            return visible.slots[before[-1]]
        k0, k1 = before[-1], after[0]
        r0, c0 = self.grid_.row_col(visible.slots[k0])
        r1, c1 = self.grid_.row_col(visible.slots[k1])
        f = (n - k0) / (k1 - k0)
        r = _round_half_up(r0 + f * (r1 - r0))
        c = _round_half_up(c0 + f * (c1 - c0))
        return r * self.grid_.cols + c

    def predict(self, X: Sequence[RecoveryCase]) -> RecoveryOutput:
        check_is_fitted(self, "grid_")
        out = RecoveryOutput()
        for case in X:
            visible = case.visible
            for n in case.mask.target_idx:
                out.add((case.traj.user, case.traj.day, n), _distance_ranking(self.predict_slot(visible, n), self.grid_))
        return out


def _ranked(counts: Dict[int, int], recency: Dict[int, int]) -> List[int]:
    return sorted(counts, key=lambda l: (-counts[l], -recency.get(l, 0), l))


class HistoryBaseline(BaseEstimator):
    """Most frequent historical location of the user at the same slot.

    Ties go to the location seen on the most recent day. A slot with no
    history falls back to the user's overall most frequent location. Ranks
    continue with the user's other locations by overall frequency.
    """

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def rank_slot(self, history: Sequence[Trajectory], n: int) -> List[int]:
        if not history:
            raise InputError("HistoryBaseline needs at least one historical day")
        slot_counts, slot_recent = Counter(), {}
        all_counts, all_recent = Counter(), {}
        for t in history:
            for k, s in enumerate(t.slots):
                if s is None:
                    continue
                all_counts[s] += 1
                all_recent[s] = max(all_recent.get(s, -1), t.day)
                if k == n:
                    slot_counts[s] += 1
                    slot_recent[s] = max(slot_recent.get(s, -1), t.day)
        if not all_counts:
            raise InputError("user history contains no observed slot")
        head = _ranked(slot_counts, slot_recent)
        rest = [l for l in _ranked(all_counts, all_recent) if l not in slot_counts]
        return head + rest

    def predict(self, X: Sequence[RecoveryCase]) -> RecoveryOutput:
        check_is_fitted(self, "fitted_")
        out = RecoveryOutput()
        for case in X:
            for n in case.mask.target_idx:
                out.add((case.traj.user, case.traj.day, n), self.rank_slot(case.history, n))
        return out


class TopBaseline(BaseEstimator):
    """The user's most frequent training-set location, for every slot.

    Users absent from training fall back to the global ranking; frequency
    ties go to the smaller location id.
    """

    def fit(self, X, y=None):
        trajs = X.trajectories("train") if isinstance(X, Dataset) else list(X)
        if not trajs:
            raise InputError("TopBaseline needs a non-empty training set")
        self.user_counts_: Dict[str, Counter] = {}
        self.global_counts_ = Counter()
        for t in trajs:
            c = self.user_counts_.setdefault(t.user, Counter())
            for s in t.slots:
                if s is not None:
                    c[s] += 1
                    self.global_counts_[s] += 1
        return self

    def ranking_for(self, user: str) -> List[int]:
        check_is_fitted(self, "global_counts_")
        counts = self.user_counts_.get(user)
        if not counts:
            counts = self.global_counts_
        return sorted(counts, key=lambda l: (-counts[l], l))

    def predict(self, X: Sequence[RecoveryCase]) -> RecoveryOutput:
        out = RecoveryOutput()
        for case in X:
            ranking = self.ranking_for(case.traj.user)
            for n in case.mask.target_idx:
                out.add((case.traj.user, case.traj.day, n), ranking)
        return out


BASELINES = {"linear": LinearBaseline, "history": HistoryBaseline, "top": TopBaseline}


def mean_displacement(trajs: Iterable[Trajectory], grid: Grid) -> float:
    """Mean distance in meters between consecutive non-null slots."""
    dists = []
    for t in trajs:
        for a, b in zip(t.slots, t.slots[1:]):
            if a is not None and b is not None:
                dists.append(distance_meters(a, b, grid))
    return float(np.mean(dists)) if dists else 0.0
