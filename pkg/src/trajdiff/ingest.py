"""Raw point parsing, slot discretization, filtering, splitting and masking."""
from __future__ import annotations

import io
import logging
import math
import zlib
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import (
    MISSING,
    OBSERVED,
    SECONDS_PER_DAY,
    TARGET,
    Dataset,
    Grid,
    MaskSet,
    Trajectory,
    cell_of,
    modal_location,
    slot_index,
    slots_per_day,
)
from .errors import FormatError, InputError

log = logging.getLogger(__name__)

PLT_HEADER_LINES = 6


@dataclass(frozen=True)
class RawPoint:
    user: str
    timestamp: float
    lat: float
    lon: float


def _read_text(stream) -> str:
    if isinstance(stream, (bytes, bytearray)):
        data = bytes(stream)
    elif isinstance(stream, str):
        return stream
    else:
        data = stream.read()
        if isinstance(data, str):
            return data
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"stream is not UTF-8: {exc}") from exc


def _parse_csv_line(line: str) -> RawPoint:
    user, ts, lat, lon = line.split(",")
    if not user:
        raise ValueError("empty user")
    return RawPoint(user.strip(), float(ts), float(lat), float(lon))


def _parse_plt_line(line: str, user: str) -> RawPoint:
    fields = line.split(",")
    if len(fields) != 7:
        raise ValueError("plt rows have 7 fields")
    lat, lon = float(fields[0]), float(fields[1])
    stamp = datetime.strptime(f"{fields[5].strip()} {fields[6].strip()}", "%Y-%m-%d %H:%M:%S")
    return RawPoint(user, stamp.replace(tzinfo=timezone.utc).timestamp(), lat, lon)


def parse_points(stream, fmt: str = "csv", user: str = "0") -> Tuple[List[RawPoint], int]:
    """Parse a point stream; returns ``(points, n_malformed)``.

    ``fmt`` is ``"csv"`` (``user,epoch_seconds,lat,lon`` per line) or
    ``"plt"`` (Geolife trajectory files, whose user id comes from ``user``).
    Blank lines are ignored. A stream where more than half of the
    non-blank lines are malformed raises :class:`FormatError`.
    """
    if fmt not in ("csv", "plt"):
        raise InputError(f"unknown format tag {fmt!r}")
    lines = _read_text(stream).splitlines()
    if fmt == "plt":
        lines = lines[PLT_HEADER_LINES:]
    points, bad, total = [], 0, 0
    for line in lines:
        if not line.strip():
            continue
        total += 1
        try:
            p = _parse_csv_line(line) if fmt == "csv" else _parse_plt_line(line, user)
        except ValueError:
            bad += 1
            continue
        if not (math.isfinite(p.lat) and math.isfinite(p.lon) and math.isfinite(p.timestamp)):
            bad += 1
            continue
        points.append(p)
    if bad:
        log.warning("skipped %d malformed line(s) of %d", bad, total)
    if total and bad * 2 > total:
        raise FormatError(f"{bad} of {total} lines are malformed")
    return points, bad


def discretize(
    points: Sequence[RawPoint],
    grid: Grid,
    slot_minutes: int = 30,
    tz_offset_s: int = 0,
) -> Tuple[Dataset, int]:
    """Collapse points into per-user-day slotted trajectories.

    Each slot keeps its modal cell; count ties go to the cell seen latest in
    the slot. Points outside the grid are dropped and counted; returns
    ``(dataset, n_outside)``.
    """
    n_slots = slots_per_day(slot_minutes)
    buckets: Dict[Tuple[str, int], Dict[int, List[Tuple[int, float]]]] = defaultdict(lambda: defaultdict(list))
    outside = 0
    for p in points:
        try:
            loc = cell_of(p.lat, p.lon, grid)
        except InputError:
            outside += 1
            continue
        local = p.timestamp + tz_offset_s
        day = int(local // SECONDS_PER_DAY)
        if day < 0:
            outside += 1
            continue
        n = slot_index(local - day * SECONDS_PER_DAY, slot_minutes)
        buckets[(p.user, day)][n].append((loc, local))
    if outside:
        log.warning("dropped %d point(s) outside the grid", outside)
    users: Dict[str, List[Trajectory]] = defaultdict(list)
    for (user, day), per_slot in buckets.items():
        slots = [None] * n_slots
        for n, values in per_slot.items():
            slots[n] = modal_location(values)
        users[user].append(Trajectory(user, day, tuple(slots)))
    return Dataset(grid=grid, slot_minutes=slot_minutes, users=dict(users)), outside


def filter_dataset(ds: Dataset, min_slots: int = 34, min_days: int = 5) -> Dataset:
    """Drop sparse trajectories, then users left with too few days."""
    if min_slots > ds.n_slots:
        raise InputError(f"min_slots {min_slots} exceeds {ds.n_slots} slots per day")
    users = {}
    for user, trajs in ds.users.items():
        kept = [t for t in trajs if t.n_observed >= min_slots]
        if len(kept) >= min_days:
            users[user] = kept
    keep = {(t.user, t.day) for ts in users.values() for t in ts}
    return ds.copy(
        users=users,
        splits={k: v for k, v in ds.splits.items() if k in keep},
        masks={k: v for k, v in ds.masks.items() if k in keep},
    )


def _ceil(x: float) -> int:
    return math.ceil(x - 1e-9)


def split_counts(k: int, fractions: Sequence[float] = (0.7, 0.1, 0.2)) -> Tuple[int, int, int]:
    n_train = min(k, _ceil(fractions[0] * k))
    n_valid = min(k - n_train, _ceil(fractions[1] * k))
    return n_train, n_valid, k - n_train - n_valid


def split_chronological(ds: Dataset, fractions: Sequence[float] = (0.7, 0.1, 0.2)) -> Dataset:
    """Tag each user's days train/valid/test in chronological order.

    Users whose valid or test share would be empty are kept train-only.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise InputError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    splits = {}
    for user in sorted(ds.users):
        trajs = ds.users[user]
        n_train, n_valid, n_test = split_counts(len(trajs), fractions)
        if n_valid == 0 or n_test == 0:
            log.warning("user %s has %d day(s); kept for training only", user, len(trajs))
            n_train, n_valid, n_test = len(trajs), 0, 0
        tags = ["train"] * n_train + ["valid"] * n_valid + ["test"] * n_test
        for t, tag in zip(trajs, tags):
            splits[(user, t.day)] = tag
    return ds.copy(splits=splits)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def mask_targets(traj: Trajectory, ratio: float, seed=0) -> MaskSet:
    """Hide ``ceil(ratio * n_observed)`` observed slots as scoring targets.

    Targets are a prefix of one seeded permutation, so for a fixed seed a
    higher ratio hides a superset of the slots a lower ratio hides.
    """
    if not 0 < ratio < 1:
        raise InputError(f"mask ratio must lie in (0, 1), got {ratio}")
    observed = traj.observed_idx
    if not observed:
        raise InputError(f"trajectory {traj.user}/{traj.day} has no observed slots")
    k = _ceil(ratio * len(observed))
    chosen = _rng(seed).permutation(len(observed))[:k]
    return MaskSet.from_trajectory(traj, [observed[i] for i in chosen])


def trajectory_seed(seed: int, traj: Trajectory) -> List[int]:
    """Stable per-trajectory seed material (independent of iteration order)."""
    return [int(seed), zlib.crc32(traj.user.encode("utf-8")), int(traj.day)]


def mask_dataset(ds: Dataset, ratio: float, seed: int = 0, splits: Iterable[str] = ("valid", "test")) -> Dataset:
    """Attach target masks to every trajectory of the given splits."""
    splits = set(splits)
    masks = dict(ds.masks)
    for t in ds.trajectories():
        if ds.splits.get((t.user, t.day), "train") in splits and t.n_observed:
            masks[(t.user, t.day)] = mask_targets(t, ratio, trajectory_seed(seed, t))
    return ds.copy(masks=masks)


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic home/work mobility generator settings.

    ``sparsity`` is the probability that a slot goes unobserved. Each day
    independently becomes a day off (home all day) with ``off_day_prob``;
    otherwise departure and return slots jitter by up to ``shift_jitter``
    slots around the user's base times.
    """

    n_users: int = 20
    n_days: int = 10
    rows: int = 4
    cols: int = 4
    n_anchors: int = 2
    noise: float = 0.05
    sparsity: float = 0.3
    off_day_prob: float = 0.2
    shift_jitter: int = 2
    seed: int = 0
    cell_side_m: float = 515.0
    slot_minutes: int = 30
    origin_lat: float = 39.9
    origin_lon: float = 116.3

    def __post_init__(self):
        for name in ("noise", "sparsity", "off_day_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise InputError(f"{name} must lie in [0, 1], got {p}")
        if self.n_users <= 0 or self.n_days <= 0:
            raise InputError("n_users and n_days must be positive")
        if self.n_anchors < 2:
            raise InputError("need at least home and work anchors")
        if self.rows * self.cols < self.n_anchors:
            raise InputError("grid too small for distinct anchors")
        if self.shift_jitter < 0:
            raise InputError("shift_jitter must be non-negative")

    @property
    def grid(self) -> Grid:
        return Grid(self.rows, self.cols, self.origin_lat, self.origin_lon, self.cell_side_m)


def _neighbors(loc: int, grid: Grid) -> List[int]:
    r, c = grid.row_col(loc)
    out = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if (dr or dc) and 0 <= r + dr < grid.rows and 0 <= c + dc < grid.cols:
                out.append((r + dr) * grid.cols + c + dc)
    return out


def generate_synthetic_with_truth(cfg: SynthConfig) -> Tuple[Dataset, Dict[Tuple[str, int], Tuple[int, ...]]]:
    """Synthetic dataset plus the noise-free anchor schedule of every user-day."""
    grid = cfg.grid
    n_slots = slots_per_day(cfg.slot_minutes)
    per_hour = 60 // cfg.slot_minutes if cfg.slot_minutes <= 60 else 1
    users, schedules = {}, {}
    for ui in range(cfg.n_users):
        user = f"u{ui:03d}"
        rng = np.random.default_rng([cfg.seed, ui])
        anchors = rng.choice(grid.n_cells, size=cfg.n_anchors, replace=False)
        home, work = int(anchors[0]), int(anchors[1])
        depart = int(rng.integers(7 * per_hour, 9 * per_hour + 1))
        back = int(rng.integers(17 * per_hour, 19 * per_hour + 1))
        trajs = []
        for day in range(cfg.n_days):
            off = rng.random() < cfg.off_day_prob
            j = cfg.shift_jitter
            d0 = depart + int(rng.integers(-j, j + 1))
            r0 = back + int(rng.integers(-j, j + 1))
            if off:
                plan = [home] * n_slots
            else:
                plan = [work if d0 <= n < r0 else home for n in range(n_slots)]
            flips = rng.random(n_slots) < cfg.noise
            picks = rng.random(n_slots)
            keep = rng.random(n_slots) >= cfg.sparsity
            slots = []
            for n in range(n_slots):
                loc = plan[n]
                if flips[n]:
                    nb = _neighbors(loc, grid)
                    loc = nb[int(picks[n] * len(nb))]
                slots.append(loc if keep[n] else None)
            trajs.append(Trajectory(user, day, tuple(slots)))
            schedules[(user, day)] = tuple(plan)
        users[user] = trajs
    return Dataset(grid=grid, slot_minutes=cfg.slot_minutes, users=users), schedules


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    return generate_synthetic_with_truth(cfg)[0]


# -- canonical text format -------------------------------------------------

def format_header(values: Dict[str, object], prefix: str = "config") -> str:
    body = " ".join(f"{k}={values[k]}" for k in sorted(values))
    return f"# {prefix} {body}\n"


def _parse_header(line: str) -> Tuple[str, Dict[str, str]]:
    parts = line[1:].split()
    if not parts:
        return "", {}
    out = {}
    for item in parts[1:]:
        if "=" in item:
            k, v = item.split("=", 1)
            out[k] = v
    return parts[0], out


def write_dataset(ds: Dataset, stream: TextIO, config: Optional[Dict[str, object]] = None, with_masks: bool = True) -> None:
    """Write ``user<TAB>day<TAB>s0,...`` lines, plus a mask column if present."""
    grid = dict(ds.grid.as_dict(), slot_minutes=ds.slot_minutes)
    stream.write(format_header(grid, "grid"))
    if config:
        stream.write(format_header(config))
    for t in ds.trajectories():
        cells = ",".join("-" if s is None else str(s) for s in t.slots)
        line = f"{t.user}\t{t.day}\t{cells}"
        key = (t.user, t.day)
        if with_masks and key in ds.masks:
            line += "\t" + ds.masks[key].labels
        stream.write(line + "\n")


def read_dataset(stream, grid: Optional[Grid] = None, slot_minutes: Optional[int] = None) -> Dataset:
    """Inverse of :func:`write_dataset`. The ``# grid`` header supplies the grid."""
    text = _read_text(stream)
    users: Dict[str, List[Trajectory]] = defaultdict(list)
    masks = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            kind, values = _parse_header(line)
            if kind == "grid" and grid is None:
                try:
                    grid = Grid(
                        int(values["rows"]),
                        int(values["cols"]),
                        float(values.get("origin_lat", 0.0)),
                        float(values.get("origin_lon", 0.0)),
                        float(values.get("cell_side_m", 515.0)),
                    )
                    if slot_minutes is None and "slot_minutes" in values:
                        slot_minutes = int(values["slot_minutes"])
                except (KeyError, ValueError) as exc:
                    raise FormatError(f"line {lineno}: bad grid header") from exc
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) not in (3, 4):
            raise FormatError(f"line {lineno}: expected 3 or 4 tab-separated fields")
        try:
            day = int(fields[1])
            slots = tuple(None if s == "-" else int(s) for s in fields[2].split(","))
            traj = Trajectory(fields[0], day, slots)
        except (ValueError, InputError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
        users[traj.user].append(traj)
        if len(fields) == 4:
            try:
                mask = MaskSet(fields[3])
                mask.check(traj)
            except InputError as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
            masks[(traj.user, traj.day)] = mask
    if grid is None:
        raise FormatError("dataset has no grid header and no grid was given")
    slot_minutes = slot_minutes or 30
    try:
        ds = Dataset(grid=grid, slot_minutes=slot_minutes, users=dict(users), masks=masks)
    except InputError as exc:
        raise FormatError(str(exc)) from exc
    for t in ds.trajectories():
        for s in t.slots:
            if s is not None and not 0 <= s < grid.n_cells:
                raise FormatError(f"location {s} outside the {grid.rows}x{grid.cols} grid")
    return ds


def dumps_dataset(ds: Dataset, config=None) -> str:
    buf = io.StringIO()
    write_dataset(ds, buf, config)
    return buf.getvalue()


class TrajectoryDiscretizer(TransformerMixin, BaseEstimator):
    """Turn raw points into a slotted :class:`Dataset`.

    Grid geometry left as ``None`` is fitted from the points: the origin
    becomes the south-west corner of their bounding box and rows/cols are
    sized to cover it.

    Attributes
    ----------
    grid_ : Grid
    n_outside_ : int
        Points dropped by the last ``transform`` because they fell off-grid.
    """

    def __init__(self, rows=None, cols=None, origin_lat=None, origin_lon=None,
                 cell_side_m=515.0, slot_minutes=30, tz_offset_s=0):
        self.rows = rows
        self.cols = cols
        self.origin_lat = origin_lat
        self.origin_lon = origin_lon
        self.cell_side_m = cell_side_m
        self.slot_minutes = slot_minutes
        self.tz_offset_s = tz_offset_s

    def fit(self, X: Sequence[RawPoint], y=None):
        slots_per_day(self.slot_minutes)
        if not X and (self.origin_lat is None or self.rows is None):
            raise InputError("cannot fit grid geometry from zero points")
        lat0 = self.origin_lat if self.origin_lat is not None else min(p.lat for p in X)
        lon0 = self.origin_lon if self.origin_lon is not None else min(p.lon for p in X)
        probe = Grid(1, 1, lat0, lon0, self.cell_side_m)
        rows, cols = self.rows, self.cols
        if rows is None or cols is None:
            east = max(probe.to_metric(p.lat, p.lon)[0] for p in X)
            north = max(probe.to_metric(p.lat, p.lon)[1] for p in X)
            cols = cols or int(east // self.cell_side_m) + 1
            rows = rows or int(north // self.cell_side_m) + 1
        self.grid_ = Grid(int(rows), int(cols), lat0, lon0, self.cell_side_m)
        return self

    def transform(self, X: Sequence[RawPoint]) -> Dataset:
        check_is_fitted(self, "grid_")
        ds, self.n_outside_ = discretize(X, self.grid_, self.slot_minutes, self.tz_offset_s)
        return ds
