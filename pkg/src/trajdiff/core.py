"""Shared domain types: spatial grid, time slots, trajectories and masks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError

EARTH_RADIUS_M = 6371008.8
SECONDS_PER_DAY = 86400

OBSERVED = "O"
TARGET = "T"
MISSING = "M"


def slots_per_day(slot_minutes: int) -> int:
    if slot_minutes <= 0 or 1440 % slot_minutes:
        raise InputError(f"slot_minutes must divide 1440, got {slot_minutes}")
    return 1440 // slot_minutes


def slot_index(timestamp: float, slot_minutes: int = 30) -> int:
    """Map seconds-of-day to its slot index in ``[0, N)``."""
    slots_per_day(slot_minutes)
    if not 0 <= timestamp < SECONDS_PER_DAY:
        raise InputError(f"timestamp {timestamp} outside [0, 86400)")
    return int(timestamp // (60 * slot_minutes))


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid laid over a local equirectangular frame.

    Row 0 is the southernmost row and column 0 the westernmost column; the
    origin is the south-west corner. Location ids are ``row * cols + col``
    and ``null_loc == rows * cols`` is reserved for "missing".
    """

    rows: int
    cols: int
    origin_lat: float = 0.0
    origin_lon: float = 0.0
    cell_side_m: float = 515.0

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise InputError("grid dimensions must be positive")
        if not self.cell_side_m > 0:
            raise InputError("cell_side_m must be > 0")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def null_loc(self) -> int:
        return self.rows * self.cols

    def _lon_scale(self) -> float:
        return math.cos(math.radians(self.origin_lat)) * EARTH_RADIUS_M * math.pi / 180.0

    def to_metric(self, lat: float, lon: float) -> Tuple[float, float]:
        """Return (east, north) offsets in meters from the grid origin."""
        east = (lon - self.origin_lon) * self._lon_scale()
        north = (lat - self.origin_lat) * EARTH_RADIUS_M * math.pi / 180.0
        return east, north

    def to_latlon(self, east: float, north: float) -> Tuple[float, float]:
        lat = self.origin_lat + north / (EARTH_RADIUS_M * math.pi / 180.0)
        lon = self.origin_lon + east / self._lon_scale()
        return lat, lon

    def row_col(self, loc: int) -> Tuple[int, int]:
        self.check_loc(loc)
        return divmod(int(loc), self.cols)

    def check_loc(self, loc: int) -> None:
        if not 0 <= loc < self.n_cells:
            raise InputError(f"location id {loc} is not a cell of a {self.rows}x{self.cols} grid")

    def centroid_metric(self, loc: int) -> Tuple[float, float]:
        row, col = self.row_col(loc)
        return (col + 0.5) * self.cell_side_m, (row + 0.5) * self.cell_side_m

    def centroid(self, loc: int) -> Tuple[float, float]:
        """Cell centre as (lat, lon)."""
        return self.to_latlon(*self.centroid_metric(loc))

    def centroids(self) -> np.ndarray:
        """(n_cells, 2) array of (east, north) centres in meters."""
        ids = np.arange(self.n_cells)
        rows, cols = np.divmod(ids, self.cols)
        return np.stack([(cols + 0.5), (rows + 0.5)], axis=1) * self.cell_side_m

    def as_dict(self) -> Dict[str, float]:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "origin_lat": self.origin_lat,
            "origin_lon": self.origin_lon,
            "cell_side_m": self.cell_side_m,
        }


def cell_of(lat: float, lon: float, grid: Grid) -> int:
    east, north = grid.to_metric(lat, lon)
    col = math.floor(east / grid.cell_side_m)
    row = math.floor(north / grid.cell_side_m)
    if not (0 <= row < grid.rows and 0 <= col < grid.cols):
        raise InputError(f"point ({lat}, {lon}) lies outside the grid")
    return row * grid.cols + col


def distance_meters(a: int, b: int, grid: Grid) -> float:
    """Euclidean distance between the centres of cells ``a`` and ``b``."""
    if a == grid.null_loc or b == grid.null_loc:
        raise InputError("distance to the null location is undefined")
    ra, ca = grid.row_col(a)
    rb, cb = grid.row_col(b)
    return grid.cell_side_m * math.hypot(ra - rb, ca - cb)


@dataclass(frozen=True)
class Trajectory:
    """One user-day: a location id or ``None`` per time slot."""

    user: str
    day: int
    slots: Tuple[Optional[int], ...]

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(None if s is None else int(s) for s in self.slots))
        if self.day < 0:
            raise InputError("day must be non-negative")

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    @property
    def observed_idx(self) -> List[int]:
        return [n for n, s in enumerate(self.slots) if s is not None]

    @property
    def n_observed(self) -> int:
        return sum(s is not None for s in self.slots)

    def to_array(self, null: int) -> np.ndarray:
        return np.array([null if s is None else s for s in self.slots], dtype=np.int64)


@dataclass(frozen=True)
class MaskSet:
    """Per-slot labels drawn from ``OBSERVED``, ``TARGET`` and ``MISSING``.

    ``MISSING`` slots are null in the source trajectory; ``TARGET`` slots were
    observed but are hidden from the model and scored against ground truth.
    """

    labels: str

    def __post_init__(self):
        bad = set(self.labels) - {OBSERVED, TARGET, MISSING}
        if bad:
            raise InputError(f"unknown mask labels {sorted(bad)}")

    @classmethod
    def from_trajectory(cls, traj: Trajectory, targets: Iterable[int] = ()) -> "MaskSet":
        targets = set(targets)
        labels = []
        for n, s in enumerate(traj.slots):
            if s is None:
                if n in targets:
                    raise InputError(f"slot {n} is null and cannot be a target")
                labels.append(MISSING)
            else:
                labels.append(TARGET if n in targets else OBSERVED)
        return cls("".join(labels))

    def __len__(self):
        return len(self.labels)

    def indices(self, label: str) -> List[int]:
        return [n for n, c in enumerate(self.labels) if c == label]

    @property
    def target_idx(self) -> List[int]:
        return self.indices(TARGET)

    @property
    def observed(self) -> np.ndarray:
        return np.array([c == OBSERVED for c in self.labels])

    def check(self, traj: Trajectory) -> None:
        if len(self.labels) != traj.n_slots:
            raise InputError("mask length differs from trajectory length")
        for c, s in zip(self.labels, traj.slots):
            if (c == MISSING) != (s is None):
                raise InputError("mask labels disagree with the trajectory's null slots")

    def visible(self, traj: Trajectory) -> Trajectory:
        """The trajectory as the model sees it: TARGET slots blanked."""
        slots = tuple(s if c == OBSERVED else None for c, s in zip(self.labels, traj.slots))
        return Trajectory(traj.user, traj.day, slots)


SPLITS = ("train", "valid", "test")


@dataclass
class Dataset:
    """Per-user, day-ordered trajectories plus optional split tags and masks."""

    grid: Grid
    slot_minutes: int = 30
    users: Dict[str, List[Trajectory]] = field(default_factory=dict)
    splits: Dict[Tuple[str, int], str] = field(default_factory=dict)
    masks: Dict[Tuple[str, int], MaskSet] = field(default_factory=dict)

    def __post_init__(self):
        n = self.n_slots
        for user, trajs in self.users.items():
            trajs.sort(key=lambda t: t.day)
            for t in trajs:
                if t.n_slots != n:
                    raise InputError(f"trajectory {user}/{t.day} has {t.n_slots} slots, expected {n}")
            days = [t.day for t in trajs]
            if len(set(days)) != len(days):
                raise InputError(f"user {user} has duplicate days")

    @property
    def n_slots(self) -> int:
        return slots_per_day(self.slot_minutes)

    def trajectories(self, split: Optional[str] = None) -> List[Trajectory]:
        out = []
        for user in sorted(self.users):
            for t in self.users[user]:
                if split is None or self.splits.get((t.user, t.day)) == split:
                    out.append(t)
        return out

    def history(self, traj: Trajectory) -> List[Trajectory]:
        """All of the user's days strictly before ``traj.day``."""
        return [t for t in self.users.get(traj.user, []) if t.day < traj.day]

    def mask_for(self, traj: Trajectory) -> MaskSet:
        key = (traj.user, traj.day)
        if key in self.masks:
            return self.masks[key]
        return MaskSet.from_trajectory(traj)

    def copy(self, **changes) -> "Dataset":
        kw = dict(
            grid=self.grid,
            slot_minutes=self.slot_minutes,
            users={u: list(ts) for u, ts in self.users.items()},
            splits=dict(self.splits),
            masks=dict(self.masks),
        )
        kw.update(changes)
        return Dataset(**kw)

    @property
    def n_observed(self) -> int:
        return sum(t.n_observed for ts in self.users.values() for t in ts)


def modal_location(values: Sequence[Tuple[int, float]]) -> Optional[int]:
    """Most frequent location among ``(location, recency)`` pairs.

    Count ties go to the candidate with the largest recency key, then to the
    smaller location id.
    """
    if not values:
        return None
    counts: Dict[int, int] = {}
    latest: Dict[int, float] = {}
    for loc, when in values:
        counts[loc] = counts.get(loc, 0) + 1
        latest[loc] = max(latest.get(loc, -math.inf), when)
    return max(counts, key=lambda l: (counts[l], latest[l], -l))
