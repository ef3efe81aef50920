"""Group tendency graph over locations and weighted edge sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, TextIO, Tuple

import numpy as np

from .core import Trajectory
from .errors import FormatError, InputError


class AliasTable:
    """Vose alias sampler: O(n) build, O(1) draws from a discrete distribution."""

    def __init__(self, weights: Sequence[float]):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0 or np.any(w < 0) or not np.isfinite(w).all() or w.sum() <= 0:
            raise InputError("alias weights must be a non-empty, non-negative, finite vector")
        n = len(w)
        scaled = w * n / w.sum()
        prob = np.zeros(n)
        alias = np.zeros(n, dtype=np.int64)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s, l = small.pop(), large.pop()
            prob[s] = scaled[s]
            alias[s] = l
            scaled[l] = scaled[l] + scaled[s] - 1.0
            (small if scaled[l] < 1.0 else large).append(l)
        for i in large + small:
            prob[i] = 1.0
            alias[i] = i
        self.prob = prob
        self.alias = alias

    def __len__(self):
        return len(self.prob)

    def draw(self, rng: np.random.Generator, size=None):
        n = len(self.prob)
        idx = rng.integers(0, n, size=size)
        coin = rng.random(size=size)
        return np.where(coin < self.prob[idx], idx, self.alias[idx])


@dataclass
class GroupTendencyGraph:
    """Undirected location graph weighted by observed transition counts."""

    weights: Dict[Tuple[int, int], int] = field(default_factory=dict)
    vertices: frozenset = frozenset()

    def __post_init__(self):
        for (u, v), w in self.weights.items():
            if not u < v:
                raise InputError(f"edge keys must be ordered pairs u < v, got {(u, v)}")
            if w <= 0:
                raise InputError(f"edge weights must be positive, got {w}")
        self.vertices = frozenset(self.vertices) | {x for e in self.weights for x in e}
        self._alias = None

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return sorted(self.weights)

    @property
    def total_weight(self) -> int:
        return sum(self.weights.values())

    def weight(self, u: int, v: int) -> int:
        if u == v:
            return 0
        return self.weights.get((min(u, v), max(u, v)), 0)

    def degree(self, u: int) -> int:
        return sum(w for e, w in self.weights.items() if u in e)

    def degrees(self) -> Dict[int, int]:
        deg = {v: 0 for v in self.vertices}
        for (u, v), w in self.weights.items():
            deg[u] += w
            deg[v] += w
        return deg

    def neighborhood(self, u: int) -> np.ndarray:
        """Adjacency row ``p_u`` over the sorted vertex list."""
        order = sorted(self.vertices)
        return np.array([self.weight(u, v) for v in order], dtype=np.float64)

    def edge_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        edges = self.edges
        src = np.array([e[0] for e in edges], dtype=np.int64)
        dst = np.array([e[1] for e in edges], dtype=np.int64)
        w = np.array([self.weights[e] for e in edges], dtype=np.float64)
        return src, dst, w

    def sample_edge(self, rng: np.random.Generator, size=None):
        """Draw edges with probability proportional to weight.

        Returns an ``(u, v)`` tuple, or two arrays when ``size`` is given.
        """
        if not self.weights:
            raise InputError("cannot sample from an edgeless graph")
        if self._alias is None:
            src, dst, w = self.edge_arrays()
            self._alias = (AliasTable(w), src, dst)
        table, src, dst = self._alias
        idx = table.draw(rng, size)
        if size is None:
            return int(src[idx]), int(dst[idx])
        return src[idx], dst[idx]


def build_group_graph(trajectories: Iterable[Trajectory]) -> GroupTendencyGraph:
    """Count transitions between distinct locations in adjacent observed slots."""
    trajectories = list(trajectories)
    if not trajectories:
        raise InputError("no trajectories to build a graph from")
    weights: Dict[Tuple[int, int], int] = {}
    vertices = set()
    usable = False
    for traj in trajectories:
        slots = traj.slots
        vertices.update(s for s in slots if s is not None)
        for a, b in zip(slots, slots[1:]):
            if a is None or b is None:
                continue
            usable = True
            if a != b:
                key = (min(a, b), max(a, b))
                weights[key] = weights.get(key, 0) + 1
    if not usable:
        raise InputError("no trajectory has two adjacent observed slots")
    return GroupTendencyGraph(weights, frozenset(vertices))


def first_order_proximity(graph: GroupTendencyGraph, u: int, v: int) -> int:
    for x in (u, v):
        if x not in graph.vertices:
            raise InputError(f"unknown vertex {x}")
    return graph.weight(u, v)


def write_graph(graph: GroupTendencyGraph, stream: TextIO) -> None:
    for u, v in graph.edges:
        stream.write(f"{u}\t{v}\t{graph.weights[(u, v)]}\n")


def read_graph(stream) -> GroupTendencyGraph:
    text = stream if isinstance(stream, str) else stream.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    weights = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            u, v, w = (int(x) for x in line.split("\t"))
        except ValueError as exc:
            raise FormatError(f"line {lineno}: expected u<TAB>v<TAB>w") from exc
        if not u < v or w <= 0 or (u, v) in weights:
            raise FormatError(f"line {lineno}: edge must satisfy u < v, w > 0 and be unique")
        weights[(u, v)] = w
    return GroupTendencyGraph(weights)
