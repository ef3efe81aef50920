"""Optimisation of encoder and denoiser, gradient checking and checkpoints."""
from __future__ import annotations

import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from typing import BinaryIO, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .core import OBSERVED, TARGET, Dataset, Grid, MaskSet, Trajectory
from .diffusion import (
    DenoiserConfig,
    composite,
    denoise_batch,
    init_denoiser_params,
    loss_distance,
    loss_simple,
    make_schedule,
    total_loss,
)
from .encoder import EncoderConfig, aggregate_history, empty_history, encode_batch, init_encoder_params
from .embedding import normalize_rows
from .errors import FormatError, InputError, TrainingDiverged
from .ingest import mask_targets, trajectory_seed

log = logging.getLogger(__name__)

CKPT_MAGIC = b"TRCK"
CKPT_VERSION = 1
HISTORY_MODES = ("prior", "others")


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> bool:
    """In-place Adam update with bias correction.

    Returns False (leaving parameters and moments untouched) when any
    gradient is non-finite.
    """
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise InputError(f"gradient shape {g.shape} differs from parameter {name} {params[name].shape}")
        if not np.isfinite(g).all():
            state.skipped += 1
            log.warning("skipping Adam step: non-finite gradient for %s", name)
            return False
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return True


# -- gradient check -----------------------------------------------------------

def finite_diff_check(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor], probes: Optional[int] = None,
                      h: float = 1e-5, seed: int = 0, floor: float = 1e-7) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the graph from ``params`` on each call. With
    ``probes=None`` every coordinate is checked, otherwise that many random
    coordinates. The relative error is ``|a - n| / max(|a| + |n|, floor)``.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in params.items()}
    coords = [(k, i) for k, p in params.items() for i in range(p.data.size)]
    if probes is not None and probes < len(coords):
        rng = np.random.default_rng(seed)
        coords = [coords[j] for j in rng.choice(len(coords), probes, replace=False)]
    worst = 0.0
    for name, i in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn().data)
        flat[i] = orig - h
        down = float(loss_fn().data)
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        a = float(analytic[name].reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
        worst = max(worst, err)
    return worst


# -- model state ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    lambda_d: float = 1.2
    tau: float = 1.0
    seed: int = 0
    steps: int = 50
    beta_1: float = 1e-4
    beta_T: float = 0.02
    dim: int = 64
    heads: int = 4
    layers: int = 4
    hidden: int = 64
    blocks: int = 4
    mask_ratio: float = 0.2
    mask_ratio_max: Optional[float] = None
    freeze_embedding: bool = True
    normalize_embedding: bool = True
    history_mode: str = "others"

    def __post_init__(self):
        if self.history_mode not in HISTORY_MODES:
            raise InputError(f"history_mode must be one of {HISTORY_MODES}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise InputError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.lambda_d < 0 or self.tau <= 0:
            raise InputError("lambda_d >= 0 and tau > 0 required")
        hi = self.mask_ratio if self.mask_ratio_max is None else self.mask_ratio_max
        if not 0 < self.mask_ratio <= hi < 1:
            raise InputError("mask ratios must satisfy 0 < mask_ratio <= mask_ratio_max < 1")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.dim, self.heads, self.layers)

    @property
    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(self.dim, self.hidden, self.blocks)

    @property
    def schedule(self):
        return make_schedule(self.steps, self.beta_1, self.beta_T)

    def to_strings(self) -> Dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_strings(cls, values: Dict[str, str]) -> "TrainConfig":
        import ast
        kw = {}
        for f in fields(cls):
            if f.name in values:
                kw[f.name] = ast.literal_eval(values[f.name])
        return cls(**kw)


@dataclass
class ModelState:
    """Everything needed to encode, denoise and decode."""

    config: TrainConfig
    grid: Grid
    table: np.ndarray
    params: Dict[str, Tensor]
    step: int = 0

    @classmethod
    def initialize(cls, config: TrainConfig, grid: Grid, table: np.ndarray, dtype=np.float32) -> "ModelState":
        table = np.asarray(table)
        if table.shape != (grid.n_cells + 1, config.dim):
            raise InputError(f"embedding table {table.shape} does not match grid cells + 1 by dim {config.dim}")
        if config.normalize_embedding:
            table = normalize_rows(table)
        rng = np.random.default_rng([config.seed, 2])
        params = init_encoder_params(config.encoder, rng, dtype)
        params.update(init_denoiser_params(config.denoiser, rng, dtype))
        if not config.freeze_embedding:
            params["embedding"] = Tensor(table.astype(dtype), requires_grad=True, name="embedding")
        return cls(config, grid, table.astype(dtype), params)

    @property
    def dtype(self):
        return self.table.dtype

    def current_table(self):
        return self.params.get("embedding", Tensor(self.table))

    def table_array(self) -> np.ndarray:
        return self.params["embedding"].data if "embedding" in self.params else self.table

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def copy(self) -> "ModelState":
        params = {k: Tensor(p.data.copy(), requires_grad=True, name=k) for k, p in self.params.items()}
        return ModelState(self.config, self.grid, self.table.copy(), params, self.step)


# -- batches ------------------------------------------------------------------------

@dataclass
class Batch:
    hist_ids: np.ndarray
    cur_ids: np.ndarray
    truth_ids: np.ndarray
    observed: np.ndarray
    target: np.ndarray


def make_batch(items: Sequence[Tuple[Trajectory, MaskSet, Trajectory]], null: int) -> Batch:
    """Stack (trajectory, mask, aggregated history) triples into id arrays."""
    truth = np.stack([t.to_array(null) for t, _, _ in items])
    labels = np.array([list(m.labels) for _, m, _ in items])
    observed = labels == OBSERVED
    target = labels == TARGET
    cur = np.where(observed, truth, null)
    hist = np.stack([h.to_array(null) for _, _, h in items])
    return Batch(hist, cur, truth, observed, target)


def batch_losses(state: ModelState, batch: Batch, t: np.ndarray, noise: np.ndarray):
    """Forward pass to ``(total, simple, distance)`` loss tensors."""
    cfg = state.config
    table = state.current_table()
    clean = ag.getitem(table, batch.truth_ids)
    cond = encode_batch(batch.hist_ids, batch.cur_ids, state.params, cfg.encoder, table)
    ab = cfg.schedule.alpha_bars[np.asarray(t) - 1].reshape(-1, 1, 1)
    keep = batch.observed[..., None]
    scale = np.where(keep, 1.0, np.sqrt(ab)).astype(state.dtype)
    jitter = np.where(keep, 0.0, np.sqrt(1.0 - ab) * noise).astype(state.dtype)
    x_t = clean * scale + jitter
    x0_hat = denoise_batch(x_t, cond, batch.observed, t, state.params, cfg.denoiser)
    simple = loss_simple(x0_hat, clean, batch.target)
    dist = loss_distance(composite(x0_hat, clean, batch.observed), table,
                         state.grid.centroids(), state.grid.cell_side_m, cfg.tau)
    return total_loss(simple, dist, cfg.lambda_d), simple, dist


def history_for(ds: Dataset, traj: Trajectory) -> Trajectory:
    hist = ds.history(traj)
    return aggregate_history(hist) if hist else empty_history(traj.user, traj.n_slots)


# -- training -----------------------------------------------------------------------

@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    valid_loss: List[float] = field(default_factory=list)
    seconds: float = 0.0


def _train_items(ds: Dataset, splits=("train",), mode: str = "prior") -> List[Tuple[Trajectory, Trajectory]]:
    items = []
    for t in ds.trajectories():
        if ds.splits.get((t.user, t.day), "train") not in splits or t.n_observed < 2:
            continue
        if mode == "others":
            # every other training day of the user, so training sees histories as
            # long as the ones available at test time
            others = [h for h in ds.users[t.user] if h.day != t.day
                      and ds.splits.get((h.user, h.day), "train") in splits]
            hist = aggregate_history(others) if others else empty_history(t.user, t.n_slots)
        else:
            hist = history_for(ds, t)
        items.append((t, hist))
    return items


def _valid_items(ds: Dataset) -> List[Tuple[Trajectory, MaskSet, Trajectory]]:
    out = []
    for t in ds.trajectories("valid"):
        mask = ds.masks.get((t.user, t.day))
        if mask is not None and mask.target_idx:
            out.append((t, mask, history_for(ds, t)))
    return out


def evaluate_loss(state: ModelState, items, seed: int = 12345) -> float:
    """Mean total loss over ``items`` with fixed step and noise draws."""
    if not items:
        return float("nan")
    rng = np.random.default_rng(seed)
    null = state.grid.null_loc
    total, count = 0.0, 0
    bs = state.config.batch_size
    for lo in range(0, len(items), bs):
        chunk = items[lo:lo + bs]
        batch = make_batch(chunk, null)
        t = rng.integers(1, state.config.steps + 1, size=len(chunk))
        noise = rng.standard_normal(batch.truth_ids.shape + (state.config.dim,))
        loss, _, _ = batch_losses(state, batch, t, noise)
        total += float(loss.data) * len(chunk)
        count += len(chunk)
    return total / count


def train_model(dataset: Dataset, table: np.ndarray, cfg: TrainConfig = TrainConfig(),
                state: Optional[ModelState] = None, report: Optional[TrainReport] = None,
                time_budget_s: Optional[float] = None) -> ModelState:
    """Fit encoder and denoiser on the train split of ``dataset``.

    Each epoch re-draws TARGET masks for the training trajectories (ratio
    in ``[mask_ratio, mask_ratio_max]``), so every observed slot is used
    as a target over time. Validation uses the stored masks of the valid
    split. Returns the trained :class:`ModelState`.
    """
    report = report if report is not None else TrainReport()
    state = state or ModelState.initialize(cfg, dataset.grid, table)
    items = _train_items(dataset, mode=cfg.history_mode)
    if not items and cfg.epochs:
        raise InputError("dataset has no usable training trajectories")
    valid = _valid_items(dataset)
    null = dataset.grid.null_loc
    rng = np.random.default_rng([cfg.seed, 3])
    adam = AdamState()
    hi = cfg.mask_ratio if cfg.mask_ratio_max is None else cfg.mask_ratio_max
    start = time.perf_counter()
    last_good = state.copy()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        epoch_loss, seen = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = []
            for j in order[lo:lo + cfg.batch_size]:
                traj, hist = items[j]
                ratio = cfg.mask_ratio if hi == cfg.mask_ratio else float(rng.uniform(cfg.mask_ratio, hi))
                chunk.append((traj, mask_targets(traj, ratio, rng), hist))
            batch = make_batch(chunk, null)
            t = rng.integers(1, cfg.steps + 1, size=len(chunk))
            noise = rng.standard_normal(batch.truth_ids.shape + (cfg.dim,))
            for p in state.params.values():
                p.grad = None
            loss, _, _ = batch_losses(state, batch, t, noise)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch + 1}", checkpoint=last_good)
            loss.backward()
            grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in state.params.items()}
            adam_step(state.arrays(), grads, adam, cfg.lr, cfg.b1, cfg.b2, cfg.eps)
            state.step += 1
            epoch_loss += value * len(chunk)
            seen += len(chunk)
        report.train_loss.append(epoch_loss / max(seen, 1))
        if valid:
            report.valid_loss.append(evaluate_loss(state, valid))
        if not all(np.isfinite(p.data).all() for p in state.params.values()):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch + 1}", checkpoint=last_good)
        last_good = state.copy()
        log.info("epoch %d train %.5f valid %s", epoch + 1, report.train_loss[-1],
                 f"{report.valid_loss[-1]:.5f}" if valid else "-")
        if time_budget_s is not None and time.perf_counter() - start > time_budget_s:
            log.warning("time budget reached after %d epoch(s)", epoch + 1)
            break
    report.seconds = time.perf_counter() - start
    return state


# -- checkpoints ----------------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    tensors: Dict[str, np.ndarray]
    config: Dict[str, str]
    step: int = 0


def state_to_checkpoint(state: ModelState) -> ModelCheckpoint:
    tensors = {"embedding": state.table_array()}
    for name, p in state.params.items():
        if name != "embedding":
            tensors[name] = p.data
    config = state.config.to_strings()
    config.update({f"grid.{k}": repr(v) for k, v in state.grid.as_dict().items()})
    return ModelCheckpoint(tensors, config, state.step)


def checkpoint_to_state(ckpt: ModelCheckpoint) -> ModelState:
    import ast
    cfg = TrainConfig.from_strings(ckpt.config)
    g = {k[5:]: ast.literal_eval(v) for k, v in ckpt.config.items() if k.startswith("grid.")}
    grid = Grid(**g)
    table = ckpt.tensors["embedding"]
    state = ModelState.initialize(cfg, grid, table, dtype=table.dtype)
    state.table = table.copy()  # stored already normalized
    for name, p in state.params.items():
        if name not in ckpt.tensors:
            raise FormatError(f"checkpoint lacks tensor {name}")
        src = ckpt.tensors[name]
        if src.size != p.data.size:
            raise FormatError(f"tensor {name} has {src.size} values, expected {p.data.size}")
        p.data = src.reshape(p.data.shape).astype(p.data.dtype)
    state.step = ckpt.step
    return state


def save_checkpoint(ckpt: ModelCheckpoint, stream: BinaryIO) -> None:
    """Write the binary checkpoint (``TRCK`` magic, named f32 tensors, config)."""
    out = [struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        mat = arr.reshape(1, -1) if arr.ndim == 1 else arr.reshape(arr.shape[0], -1)
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", *mat.shape))
        out.append(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    cfg = dict(ckpt.config, step=str(ckpt.step))
    text = "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg)).encode("utf-8")
    out.append(struct.pack("<I", len(text)) + text)
    stream.write(b"".join(out))


def _take(buf: bytes, pos: int, n: int) -> Tuple[bytes, int]:
    if pos + n > len(buf):
        raise FormatError("checkpoint is truncated")
    return buf[pos:pos + n], pos + n


def load_checkpoint(stream: BinaryIO) -> ModelCheckpoint:
    buf = stream.read()
    head, pos = _take(buf, 0, 12)
    magic, version, count = struct.unpack("<4sII", head)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        raw, pos = _take(buf, pos, 2)
        (n,) = struct.unpack("<H", raw)
        name, pos = _take(buf, pos, n)
        dims, pos = _take(buf, pos, 8)
        rows, cols = struct.unpack("<II", dims)
        body, pos = _take(buf, pos, 4 * rows * cols)
        try:
            key = name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8") from exc
        tensors[key] = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)
    raw, pos = _take(buf, pos, 4)
    (n,) = struct.unpack("<I", raw)
    text, pos = _take(buf, pos, n)
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint config")
    config = {}
    for line in text.decode("utf-8").splitlines():
        if "=" not in line:
            raise FormatError(f"bad config line {line!r}")
        k, v = line.split("=", 1)
        config[k] = v
    step = int(config.pop("step", "0"))
    return ModelCheckpoint(tensors, config, step)
