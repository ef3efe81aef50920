"""Individual preference encoder: time embeddings, history aggregation and
residual multi-head attention over current and aggregated trajectories."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .core import Trajectory, modal_location
from .errors import InputError

FAMILIES = ("hist", "cur", "cross")


def time_embedding(t: int, d: int) -> np.ndarray:
    """Sinusoidal embedding: sin/cos pairs at frequencies ``10000**(-2i/d)``."""
    if d <= 0 or d % 2:
        raise InputError(f"time embedding width must be positive and even, got {d}")
    i = np.arange(d // 2)
    angle = t / np.power(10000.0, 2 * i / d)
    out = np.empty(d)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def time_embeddings(n_slots: int, d: int) -> np.ndarray:
    return np.stack([time_embedding(t, d) for t in range(n_slots)])


def temporal_aware(traj: Trajectory, table: np.ndarray) -> np.ndarray:
    """Location rows plus time embeddings; null slots take the zero null row."""
    table = np.asarray(table)
    null = len(table) - 1
    ids = traj.to_array(null)
    if ids.max(initial=0) > null:
        raise InputError("trajectory location outside the embedding table")
    return table[ids] + time_embeddings(traj.n_slots, table.shape[1]).astype(table.dtype)


def aggregate_history(historical: Sequence[Trajectory]) -> Trajectory:
    """Per-slot modal location over the history; ties favour the latest day."""
    if not historical:
        raise InputError("history must contain at least one trajectory")
    n = historical[0].n_slots
    if any(t.n_slots != n for t in historical):
        raise InputError("historical trajectories differ in length")
    slots = []
    for k in range(n):
        values = [(t.slots[k], t.day) for t in historical if t.slots[k] is not None]
        slots.append(modal_location(values))
    last = max(historical, key=lambda t: t.day)
    return Trajectory(last.user, last.day, tuple(slots))


def empty_history(user: str, n_slots: int) -> Trajectory:
    return Trajectory(user, 0, (None,) * n_slots)


def attention_layer(query: Tensor, kv: Tensor, params: Dict[str, Tensor], heads: int,
                    return_weights: bool = False):
    """Residual multi-head attention: ``ReLU(concat_h(softmax(QK^T) V) + W q)``.

    ``params`` holds ``wq``, ``wk``, ``wv`` and ``w``, each of shape
    ``(heads * d_head, d)``. Scores are plain inner products. Inputs are
    ``(N, d)`` or ``(B, N, d)``.
    """
    query, kv = ag.as_tensor(query), ag.as_tensor(kv)
    squeeze = query.ndim == 2
    if squeeze:
        query = ag.reshape(query, (1,) + query.shape)
        kv = ag.reshape(kv, (1,) + kv.shape)
    if query.ndim != 3 or query.shape != kv.shape:
        raise InputError(f"query {query.shape} and key/value {kv.shape} shapes differ")
    b, n, d = query.shape
    width = params["wq"].shape[0]
    if width % heads or any(params[k].shape != (width, d) for k in ("wq", "wk", "wv", "w")):
        raise InputError("attention parameter shapes do not match the input width")
    dh = width // heads

    def split(x):
        return ag.transpose(ag.reshape(x, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(ag.linear(query, params["wq"]))
    k = split(ag.linear(kv, params["wk"]))
    v = split(ag.linear(kv, params["wv"]))
    alpha = ag.softmax(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), axis=-1)
    mixed = ag.reshape(ag.transpose(ag.matmul(alpha, v), (0, 2, 1, 3)), (b, n, width))
    out = ag.relu(mixed + ag.linear(query, params["w"]))
    if squeeze:
        out = ag.reshape(out, (n, width))
    if return_weights:
        return out, alpha.data[0] if squeeze else alpha.data
    return out


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    heads: int = 4
    layers: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise InputError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.layers < 1:
            raise InputError("need at least one attention layer per stack")


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> Dict[str, Tensor]:
    params = {}
    scale = 1.0 / np.sqrt(cfg.dim)
    for fam in FAMILIES:
        n_layers = 1 if fam == "cross" else cfg.layers
        for layer in range(n_layers):
            for key in ("wq", "wk", "wv", "w"):
                name = f"enc.{fam}.{layer}.{key}"
                data = rng.normal(0.0, scale, size=(cfg.dim, cfg.dim)).astype(dtype)
                params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _layer(params: Dict[str, Tensor], fam: str, layer: int) -> Dict[str, Tensor]:
    prefix = f"enc.{fam}.{layer}."
    return {k: params[prefix + k] for k in ("wq", "wk", "wv", "w")}


def embed_batch(ids: np.ndarray, table, time_emb: np.ndarray) -> Tensor:
    """Temporal-aware rows for a ``(B, N)`` id batch; ``table`` may be a Tensor."""
    if isinstance(table, Tensor):
        return ag.getitem(table, ids) + time_emb
    return Tensor(np.asarray(table)[ids] + time_emb)


def encode_batch(hist_ids: np.ndarray, cur_ids: np.ndarray, params: Dict[str, Tensor],
                 cfg: EncoderConfig, table) -> Tensor:
    """Final per-slot representation for a batch of (history, current) pairs.

    ``hist_ids`` holds already-aggregated histories; both id arrays use the
    table's last row for null.
    """
    dtype = (table.data if isinstance(table, Tensor) else np.asarray(table)).dtype
    te = time_embeddings(cur_ids.shape[-1], cfg.dim).astype(dtype)
    h = embed_batch(hist_ids, table, te)
    c = embed_batch(cur_ids, table, te)
    for layer in range(cfg.layers):
        h = attention_layer(h, h, _layer(params, "hist", layer), cfg.heads)
    for layer in range(cfg.layers):
        c = attention_layer(c, c, _layer(params, "cur", layer), cfg.heads)
    return attention_layer(c, h, _layer(params, "cross", 0), cfg.heads)


def encode(historical: Sequence[Trajectory], current: Trajectory, params: Dict[str, Tensor],
           cfg: EncoderConfig, table) -> np.ndarray:
    """Encode one current trajectory against its (raw) history."""
    data = table.data if isinstance(table, Tensor) else np.asarray(table)
    null = len(data) - 1
    hist = aggregate_history(historical) if historical else empty_history(current.user, current.n_slots)
    out = encode_batch(hist.to_array(null)[None], current.to_array(null)[None], params, cfg, table)
    return out.data[0]
