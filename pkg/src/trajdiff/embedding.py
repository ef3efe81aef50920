"""Location embeddings from first- and second-order graph proximity.

Both halves are trained with negative sampling on weight-proportional edge
draws; the final row of a location is the first-order vector followed by
the second-order vertex vector. The last table row is the null token and is
always zero.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass
from typing import BinaryIO, Iterable, Optional, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import Trajectory
from .errors import FormatError, InputError, TrainingDiverged
from .graph import AliasTable, GroupTendencyGraph, build_group_graph

log = logging.getLogger(__name__)

EMBED_MAGIC = b"TREM"
EMBED_VERSION = 1


@dataclass(frozen=True)
class EmbedTrainConfig:
    dim: int = 64
    epochs: int = 500
    lr: float = 0.025
    negative: int = 5
    samples_per_epoch: Optional[int] = None
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2:
            raise InputError(f"embedding dim must be a positive even number, got {self.dim}")
        if self.negative < 1:
            raise InputError("need at least one negative sample")
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise InputError("epochs >= 0, lr > 0 and batch_size >= 1 required")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


class _NegativeSampler:
    def __init__(self, graph: GroupTendencyGraph):
        deg = graph.degrees()
        self.vertices = np.array(sorted(deg), dtype=np.int64)
        self.p = np.array([deg[v] for v in self.vertices], dtype=np.float64) ** 0.75
        self.p /= self.p.sum()
        self.table = AliasTable(self.p)

    def draw(self, rng, size):
        return self.vertices[self.table.draw(rng, size)]


def _sgd_batch(src, dst, neg, emb, ctx, lr):
    """One negative-sampling step; ``ctx is emb`` gives the first-order form.

    Negatives that coincide with either endpoint of their edge are ignored.
    """
    xu = emb[src]
    targets = np.concatenate([dst[:, None], neg], axis=1)
    labels = np.zeros(targets.shape)
    labels[:, 0] = 1.0
    valid = np.ones(targets.shape)
    valid[:, 1:] = (neg != src[:, None]) & (neg != dst[:, None])
    ct = ctx[targets]
    score = np.einsum("bd,bkd->bk", xu, ct)
    g = (labels - _sigmoid(score)) * valid * lr
    grad_u = np.einsum("bk,bkd->bd", g, ct)
    grad_t = g[:, :, None] * xu[:, None, :]
    np.add.at(ctx, targets.ravel(), grad_t.reshape(-1, xu.shape[1]))
    np.add.at(emb, src, grad_u)


def line_objective(graph: GroupTendencyGraph, emb: np.ndarray, ctx: Optional[np.ndarray] = None,
                   negative: int = 5) -> float:
    """Expected negative-sampling loss over the full, weight-normalized edge set.

    Both edge directions count; with ``ctx=None`` this is the first-order
    objective.
    """
    ctx = emb if ctx is None else ctx
    sampler = _NegativeSampler(graph)
    src, dst, w = graph.edge_arrays()
    src, dst, w = np.concatenate([src, dst]), np.concatenate([dst, src]), np.concatenate([w, w])
    w = w / w.sum()
    pos = _log_sigmoid(np.einsum("ed,ed->e", emb[src], ctx[dst]))
    neg_scores = _log_sigmoid(-emb[src] @ ctx[sampler.vertices].T)
    excluded = (sampler.vertices[None, :] == src[:, None]) | (sampler.vertices[None, :] == dst[:, None])
    neg = negative * np.sum(np.where(excluded, 0.0, neg_scores) * sampler.p[None, :], axis=1)
    return float(-np.sum(w * (pos + neg)))


def init_table(n_locations: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    table = rng.uniform(-0.5 / dim, 0.5 / dim, size=(n_locations + 1, dim))
    table[-1] = 0.0
    return table


def train_line(graph: GroupTendencyGraph, cfg: EmbedTrainConfig = EmbedTrainConfig(),
               n_locations: Optional[int] = None, history: Optional[list] = None) -> np.ndarray:
    """Train a ``(n_locations + 1, dim)`` embedding table on ``graph``.

    ``n_locations`` defaults to one past the largest vertex id. When
    ``history`` is a list, the pair of full-edge-set objectives
    ``(first, second)`` is appended after every epoch.
    """
    if len(graph.vertices) < 2 or not graph.weights:
        raise InputError("graph needs at least two vertices and one edge")
    n = max(graph.vertices) + 1 if n_locations is None else n_locations
    if max(graph.vertices) >= n:
        raise InputError(f"vertex {max(graph.vertices)} exceeds n_locations={n}")
    half = cfg.dim // 2
    table = init_table(n, cfg.dim, cfg.seed)
    first = table[:, :half].copy()
    second = table[:, half:].copy()
    context = np.zeros_like(second)
    rng = np.random.default_rng([cfg.seed, 1])
    sampler = _NegativeSampler(graph)
    per_epoch = cfg.samples_per_epoch or max(len(graph.weights), 100)
    total = cfg.epochs * per_epoch
    done = 0
    for epoch in range(cfg.epochs):
        left = per_epoch
        while left > 0:
            b = min(cfg.batch_size, left)
            lr = cfg.lr * max(1e-4, 1.0 - done / max(total, 1))
            src, dst = graph.sample_edge(rng, size=b)
            flip = rng.random(b) < 0.5
            src, dst = np.where(flip, dst, src), np.where(flip, src, dst)
            _sgd_batch(src, dst, sampler.draw(rng, (b, cfg.negative)), first, first, lr)
            _sgd_batch(src, dst, sampler.draw(rng, (b, cfg.negative)), second, context, lr)
            left -= b
            done += b
        if not (np.isfinite(first).all() and np.isfinite(second).all() and np.isfinite(context).all()):
            raise TrainingDiverged(f"non-finite embedding values after epoch {epoch + 1}; lower lr={cfg.lr}")
        if history is not None:
            history.append((
                line_objective(graph, first, None, cfg.negative),
                line_objective(graph, second, context, cfg.negative),
            ))
    table = np.concatenate([first, second], axis=1)
    table[-1] = 0.0
    return table


def write_embedding(table: np.ndarray, stream: BinaryIO) -> None:
    table = np.ascontiguousarray(table, dtype="<f4")
    if table.ndim != 2:
        raise InputError("embedding table must be two-dimensional")
    stream.write(struct.pack("<4sIII", EMBED_MAGIC, EMBED_VERSION, *table.shape))
    stream.write(table.tobytes())


def read_embedding(stream: BinaryIO) -> np.ndarray:
    head = stream.read(16)
    if len(head) < 16:
        raise FormatError("embedding file is truncated")
    magic, version, rows, cols = struct.unpack("<4sIII", head)
    if magic != EMBED_MAGIC:
        raise FormatError(f"bad embedding magic {magic!r}")
    if version != EMBED_VERSION:
        raise FormatError(f"unsupported embedding version {version}")
    body = stream.read(rows * cols * 4)
    if len(body) != rows * cols * 4:
        raise FormatError("embedding file is truncated")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)


class LineEmbedding(TransformerMixin, BaseEstimator):
    """Fit location embeddings on a group tendency graph.

    ``fit`` accepts a :class:`GroupTendencyGraph` or an iterable of training
    trajectories (from which the graph is built). ``transform`` maps an
    integer array of location ids to their embedding rows; the id
    ``n_locations`` selects the zero null row.

    Attributes
    ----------
    embedding_ : ndarray of shape (n_locations + 1, dim), float32
    graph_ : GroupTendencyGraph
    history_ : list of (first_order_loss, second_order_loss) per epoch,
        filled only when ``track_loss`` is set.
    """

    def __init__(self, dim=64, epochs=500, lr=0.025, negative=5, samples_per_epoch=None,
                 batch_size=16, n_locations=None, track_loss=False, seed=0):
        self.dim = dim
        self.epochs = epochs
        self.lr = lr
        self.negative = negative
        self.samples_per_epoch = samples_per_epoch
        self.batch_size = batch_size
        self.n_locations = n_locations
        self.track_loss = track_loss
        self.seed = seed

    def _config(self) -> EmbedTrainConfig:
        return EmbedTrainConfig(self.dim, self.epochs, self.lr, self.negative,
                                self.samples_per_epoch, self.batch_size, self.seed)

    def fit(self, X: Union[GroupTendencyGraph, Iterable[Trajectory]], y=None):
        graph = X if isinstance(X, GroupTendencyGraph) else build_group_graph(X)
        self.history_ = [] if self.track_loss else None
        table = train_line(graph, self._config(), self.n_locations, self.history_)
        self.graph_ = graph
        self.embedding_ = table.astype(np.float32)
        return self

    def transform(self, X):
        check_is_fitted(self, "embedding_")
        ids = np.asarray(X, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.embedding_)):
            raise InputError("location id outside the embedding table")
        return self.embedding_[ids]


def normalize_rows(table: np.ndarray) -> np.ndarray:
    """Scale every non-zero row to unit length; zero rows (null) stay zero."""
    table = np.asarray(table)
    norms = np.linalg.norm(table.astype(np.float64), axis=1, keepdims=True)
    out = np.where(norms > 0, table / np.where(norms > 0, norms, 1.0), 0.0)
    return out.astype(table.dtype)
