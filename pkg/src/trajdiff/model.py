"""Estimator front-end: fit on a dataset, recover TARGET slots of new days."""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autograd import Tensor
from .core import Dataset, Trajectory
from .diffusion import cosine_scores, model_denoiser, sample
from .embedding import LineEmbedding
from .encoder import aggregate_history, empty_history, encode_batch
from .errors import InputError
from .evaluation import RecoveryCase, RecoveryOutput
from .train import (
    ModelState,
    TrainConfig,
    TrainReport,
    checkpoint_to_state,
    make_batch,
    state_to_checkpoint,
    train_model,
)


class TrajectoryRecoverer(BaseEstimator):
    """Diffusion-based recovery of missing trajectory slots.

    ``fit`` takes a :class:`Dataset` with split tags. Unless ``embedding``
    is given, location embeddings are first trained on the group tendency
    graph of the train split and then frozen. ``predict`` takes a sequence
    of :class:`RecoveryCase` and ranks candidate locations for every TARGET
    slot; ``recover`` fills every non-observed slot with its top choice.

    Attributes
    ----------
    state_ : ModelState
    embedding_ : ndarray of shape (n_cells + 1, dim)
    report_ : TrainReport
    """

    def __init__(self, embedding=None, dim=64, heads=4, layers=4, hidden=64, blocks=4,
                 steps=50, beta_1=1e-4, beta_T=0.02, lambda_d=1.2, tau=1.0,
                 epochs=100, batch_size=16, lr=1e-3, mask_ratio=0.2, mask_ratio_max=None,
                 freeze_embedding=True, normalize_embedding=True, history_mode="others", n_samples=1, aggregate="mean", line_epochs=500, line_negative=5,
                 time_budget_s=None, seed=0):
        self.embedding = embedding
        self.dim = dim
        self.heads = heads
        self.layers = layers
        self.hidden = hidden
        self.blocks = blocks
        self.steps = steps
        self.beta_1 = beta_1
        self.beta_T = beta_T
        self.lambda_d = lambda_d
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.mask_ratio = mask_ratio
        self.mask_ratio_max = mask_ratio_max
        self.freeze_embedding = freeze_embedding
        self.normalize_embedding = normalize_embedding
        self.history_mode = history_mode
        self.n_samples = n_samples
        self.aggregate = aggregate
        self.line_epochs = line_epochs
        self.line_negative = line_negative
        self.time_budget_s = time_budget_s
        self.seed = seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, lambda_d=self.lambda_d,
            tau=self.tau, seed=self.seed, steps=self.steps, beta_1=self.beta_1, beta_T=self.beta_T,
            dim=self.dim, heads=self.heads, layers=self.layers, hidden=self.hidden, blocks=self.blocks,
            mask_ratio=self.mask_ratio, mask_ratio_max=self.mask_ratio_max,
            freeze_embedding=self.freeze_embedding, normalize_embedding=self.normalize_embedding,
            history_mode=self.history_mode,
        )

    def fit(self, X: Dataset, y=None):
        if not isinstance(X, Dataset):
            raise InputError("fit expects a Dataset")
        cfg = self.train_config()
        table = self.embedding
        if table is None:
            line = LineEmbedding(dim=self.dim, epochs=self.line_epochs, negative=self.line_negative,
                                 n_locations=X.grid.n_cells, seed=self.seed)
            table = line.fit(X.trajectories("train")).embedding_
        table = np.asarray(table, dtype=np.float32)
        self.embedding_ = table.copy()
        self.report_ = TrainReport()
        self.state_ = train_model(X, table, cfg, report=self.report_, time_budget_s=self.time_budget_s)
        return self

    @classmethod
    def from_state(cls, state: ModelState, **kwargs) -> "TrajectoryRecoverer":
        c = state.config
        est = cls(dim=c.dim, heads=c.heads, layers=c.layers, hidden=c.hidden, blocks=c.blocks,
                  steps=c.steps, beta_1=c.beta_1, beta_T=c.beta_T, lambda_d=c.lambda_d, tau=c.tau,
                  epochs=c.epochs, batch_size=c.batch_size, lr=c.lr, mask_ratio=c.mask_ratio,
                  mask_ratio_max=c.mask_ratio_max, freeze_embedding=c.freeze_embedding,
                  normalize_embedding=c.normalize_embedding, history_mode=c.history_mode, seed=c.seed, **kwargs)
        est.state_ = state
        est.embedding_ = state.table
        est.report_ = TrainReport()
        return est

    @classmethod
    def from_checkpoint(cls, ckpt, **kwargs) -> "TrajectoryRecoverer":
        return cls.from_state(checkpoint_to_state(ckpt), **kwargs)

    def to_checkpoint(self):
        check_is_fitted(self, "state_")
        return state_to_checkpoint(self.state_)

    # -- inference --------------------------------------------------------

    def _sample_chunk(self, cases: Sequence[RecoveryCase], rng) -> np.ndarray:
        state = self.state_
        null = state.grid.null_loc
        items = []
        for c in cases:
            c.mask.check(c.traj)
            hist = aggregate_history(c.history) if c.history else empty_history(c.traj.user, c.traj.n_slots)
            items.append((c.traj, c.mask, hist))
        batch = make_batch(items, null)
        table = state.table_array()
        cond = encode_batch(batch.hist_ids, batch.cur_ids, state.params, state.config.encoder, Tensor(table)).data
        clean = np.where(batch.observed[..., None], table[batch.truth_ids], 0.0).astype(table.dtype)
        denoiser = model_denoiser(cond, batch.observed, state.params, state.config.denoiser)
        n = max(1, self.n_samples)
        cos, votes = 0.0, 0.0
        for _ in range(n):
            x0 = sample(cond, batch.observed, clean, state.config.schedule, denoiser, rng)
            s = cosine_scores(x0, table)
            cos = cos + s / n
            votes = votes + (np.arange(s.shape[-1]) == s.argmax(-1)[..., None]) / n
        if self.aggregate == "mean":
            return cos
        # vote share first; mean cosine only reorders locations with equal votes
        return votes + cos * (0.49 / n)

    def predict_scores(self, X: Sequence[RecoveryCase]) -> List[np.ndarray]:
        """Per case, an ``(N, n_cells)`` array of cosine scores for every slot."""
        check_is_fitted(self, "state_")
        rng = np.random.default_rng([self.seed, 4])
        out = []
        bs = self.state_.config.batch_size
        for lo in range(0, len(X), bs):
            out.extend(self._sample_chunk(X[lo:lo + bs], rng))
        return out

    def predict(self, X: Sequence[RecoveryCase]) -> RecoveryOutput:
        out = RecoveryOutput()
        for case, scores in zip(X, self.predict_scores(X)):
            for n in case.mask.target_idx:
                s = scores[n]
                ranking = np.lexsort((np.arange(len(s)), -s))
                out.add((case.traj.user, case.traj.day, n), ranking, s)
        return out

    def recover(self, X: Sequence[RecoveryCase]) -> List[Trajectory]:
        """Trajectories with every TARGET and MISSING slot set to its top-1 location."""
        filled = []
        for case, scores in zip(X, self.predict_scores(X)):
            slots = []
            for n, label in enumerate(case.mask.labels):
                if label == "O":
                    slots.append(case.traj.slots[n])
                else:
                    s = scores[n]
                    slots.append(int(np.lexsort((np.arange(len(s)), -s))[0]))
            filled.append(Trajectory(case.traj.user, case.traj.day, tuple(slots)))
        return filled
