"""Conditional denoising diffusion over per-slot representations.

The denoiser predicts the clean representation directly. Observed slots are
never noised: they carry their clean value in the noisy channel and are
flagged by the mask channel, while the encoder output conditions every slot.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import time_embedding
from .errors import InputError

SCHEDULE_PRESETS = {
    "default": (50, 1e-4, 0.02),
    "long": (200, 1e-4, 0.02),
}


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_var: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to step ``t``; ``alpha_bar(0) == 1``."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])


def make_schedule(T: int = 50, beta_1: float = 1e-4, beta_T: float = 0.02) -> DiffusionSchedule:
    """Linearly spaced betas with derived alpha, alpha-bar and posterior variance."""
    if T < 1 or not 0 < beta_1 <= beta_T < 1:
        raise InputError(f"need T >= 1 and 0 < beta_1 <= beta_T < 1, got {(T, beta_1, beta_T)}")
    betas = np.linspace(beta_1, beta_T, T) if T > 1 else np.array([beta_1])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior = betas * (1.0 - prev) / (1.0 - alpha_bars)
    posterior[0] = betas[0]
    return DiffusionSchedule(betas, alphas, alpha_bars, posterior)


def schedule_preset(name: str) -> DiffusionSchedule:
    if name not in SCHEDULE_PRESETS:
        raise InputError(f"unknown schedule preset {name!r}; choose from {sorted(SCHEDULE_PRESETS)}")
    return make_schedule(*SCHEDULE_PRESETS[name])


def forward_sample(x0: np.ndarray, t, eps: np.ndarray, sched: DiffusionSchedule,
                   noise_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Closed-form ``q(x_t | x_0)``; only slots where ``noise_mask`` is true change.

    ``t`` is a step in ``[1, T]`` or an array of per-batch steps for ``x0``
    shaped ``(B, N, d)``.
    """
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise InputError(f"diffusion step must lie in [1, {sched.T}]")
    ab = sched.alpha_bars[t - 1]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    if noise_mask is None:
        return xt.astype(np.result_type(x0), copy=False)
    keep = np.asarray(noise_mask, dtype=bool)
    if keep.ndim < np.ndim(x0):
        keep = keep[..., None]
    return np.where(keep, xt, x0).astype(np.result_type(x0), copy=False)


def posterior_coefficients(t: int, sched: DiffusionSchedule):
    ab_t, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t - 1)
    beta = sched.beta(t)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = np.sqrt(sched.alphas[t - 1]) * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0, ct


def posterior_step(x_t: np.ndarray, x0_hat: np.ndarray, t: int, sched: DiffusionSchedule,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Draw ``x_{t-1}`` from the Gaussian posterior given a clean estimate."""
    if not 1 <= t <= sched.T:
        raise InputError(f"diffusion step must lie in [1, {sched.T}]")
    c0, ct = posterior_coefficients(t, sched)
    mu = c0 * x0_hat + ct * x_t
    if t == 1:
        return mu
    if rng is None:
        raise InputError("posterior_step needs an rng for t > 1")
    z = rng.standard_normal(np.shape(mu))
    return (mu + np.sqrt(sched.posterior_var[t - 1]) * z).astype(np.result_type(x_t), copy=False)


# -- denoising network ----------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    dim: int = 64
    hidden: int = 64
    blocks: int = 4

    def __post_init__(self):
        if self.blocks < 1 or self.hidden < 2 or self.hidden % 2:
            raise InputError("denoiser needs blocks >= 1 and an even hidden width")


def init_denoiser_params(cfg: DenoiserConfig, rng: np.random.Generator, dtype=np.float32) -> Dict[str, Tensor]:
    d, c = cfg.dim, cfg.hidden
    shapes = {
        "den.in.w": (c, 2 * d + 1),
        "den.in.b": (c,),
        "den.step1.w": (c, c),
        "den.step1.b": (c,),
        "den.step2.w": (c, c),
        "den.step2.b": (c,),
        "den.skip.w": (c, c),
        "den.skip.b": (c,),
        "den.out.w": (d, c),
        "den.out.b": (d,),
    }
    for r in range(cfg.blocks):
        p = f"den.block{r}."
        shapes.update({
            p + "step": (c, c),
            p + "wq": (c, c),
            p + "wk": (c, c),
            p + "wv": (c, c),
            p + "mid.w": (2 * c, c),
            p + "mid.b": (2 * c,),
            p + "cond": (2 * c, d),
            p + "out.w": (2 * c, c),
            p + "out.b": (2 * c,),
        })
    params = {}
    for name, shape in shapes.items():
        if len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def step_embeddings(t: np.ndarray, width: int) -> np.ndarray:
    return np.stack([time_embedding(int(s), width) for s in np.atleast_1d(t)])


def denoise_batch(x_t, cond, observed: np.ndarray, t: np.ndarray, params: Dict[str, Tensor],
                  cfg: DenoiserConfig) -> Tensor:
    """Clean-representation estimate for a ``(B, N, d)`` batch at steps ``t`` (B,)."""
    x_t, cond = ag.as_tensor(x_t), ag.as_tensor(cond)
    if x_t.shape != cond.shape or x_t.ndim != 3 or x_t.shape[-1] != cfg.dim:
        raise InputError(f"noisy {x_t.shape} and conditioner {cond.shape} must both be (B, N, {cfg.dim})")
    b, n, d = x_t.shape
    if observed.shape != (b, n):
        raise InputError("observed mask must be (B, N)")
    dtype = x_t.dtype
    c = cfg.hidden
    flag = observed.astype(dtype)[..., None]
    h = ag.relu(ag.linear(ag.concat([x_t, cond, Tensor(flag)], axis=-1), params["den.in.w"], params["den.in.b"]))
    temb = Tensor(step_embeddings(np.broadcast_to(t, (b,)), c).astype(dtype))
    temb = ag.silu(ag.linear(temb, params["den.step1.w"], params["den.step1.b"]))
    temb = ag.silu(ag.linear(temb, params["den.step2.w"], params["den.step2.b"]))
    temb = ag.reshape(temb, (b, 1, c))
    skips = []
    scale = 1.0 / np.sqrt(c)
    for r in range(cfg.blocks):
        p = f"den.block{r}."
        y = h + ag.linear(temb, params[p + "step"])
        q = ag.linear(y, params[p + "wq"])
        k = ag.linear(y, params[p + "wk"])
        v = ag.linear(y, params[p + "wv"])
        att = ag.softmax(ag.matmul(q, ag.transpose(k, (0, 2, 1))) * scale, axis=-1)
        y = y + ag.matmul(att, v)
        z = ag.linear(y, params[p + "mid.w"], params[p + "mid.b"]) + ag.linear(cond, params[p + "cond"])
        gated = ag.sigmoid(z[..., :c]) * ag.tanh(z[..., c:])
        o = ag.linear(gated, params[p + "out.w"], params[p + "out.b"])
        h = (h + o[..., :c]) * np.sqrt(0.5)
        skips.append(o[..., c:])
    s = skips[0]
    for extra in skips[1:]:
        s = s + extra
    s = ag.relu(ag.linear(s * (1.0 / np.sqrt(cfg.blocks)), params["den.skip.w"], params["den.skip.b"]))
    return ag.linear(s, params["den.out.w"], params["den.out.b"])


def composite(x0_hat, clean, observed: np.ndarray):
    """Observed slots keep their clean value; the rest come from the estimate."""
    keep = observed.astype(clean.dtype)[..., None]
    return x0_hat * (1.0 - keep) + clean * keep


Denoiser = Callable[[np.ndarray, int], np.ndarray]


def sample(cond: np.ndarray, observed: np.ndarray, clean: np.ndarray, sched: DiffusionSchedule,
           denoiser: Denoiser, rng: np.random.Generator) -> np.ndarray:
    """Run the reverse chain from ``x_T ~ N(0, I)`` down to ``x_0``.

    ``denoiser(x_t, t)`` returns the clean estimate for the whole batch;
    observed slots are clamped to ``clean`` at every step.
    """
    keep = observed.astype(bool)[..., None]
    x = np.where(keep, clean, rng.standard_normal(clean.shape)).astype(clean.dtype)
    for t in range(sched.T, 0, -1):
        x0_hat = denoiser(x, t)
        x = np.where(keep, clean, posterior_step(x, x0_hat, t, sched, rng)).astype(clean.dtype)
    return x


def model_denoiser(cond: np.ndarray, observed: np.ndarray, params: Dict[str, Tensor],
                   cfg: DenoiserConfig) -> Denoiser:
    def run(x, t):
        steps = np.full(x.shape[0], t)
        return denoise_batch(Tensor(x), Tensor(cond), observed, steps, params, cfg).data
    return run


# -- decoding and losses ----------------------------------------------------

class Decoded(NamedTuple):
    ranking: np.ndarray
    scores: np.ndarray
    degenerate: bool


def cosine_scores(x: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Cosine similarity of ``x (..., d)`` to every non-null table row."""
    rows = np.asarray(table, dtype=np.float64)[:-1]
    x = np.asarray(x, dtype=np.float64)
    rn = np.linalg.norm(rows, axis=1)
    xn = np.linalg.norm(x, axis=-1, keepdims=True)
    dots = x @ rows.T
    denom = xn * rn
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return out


def decode_location(x0_slot: np.ndarray, table: np.ndarray) -> Decoded:
    """Rank all real locations by cosine similarity; ties go to smaller ids."""
    x0_slot = np.asarray(x0_slot)
    if not np.isfinite(x0_slot).all():
        raise InputError("cannot decode a non-finite vector")
    scores = cosine_scores(x0_slot, table)
    degenerate = not np.any(x0_slot)
    ranking = np.lexsort((np.arange(len(scores)), -scores))
    return Decoded(ranking, scores, degenerate)


def loss_simple(x0_hat: Tensor, x0, target: np.ndarray) -> Tensor:
    """Mean squared error over TARGET slots and all dimensions."""
    x0 = ag.as_tensor(x0)
    target = np.asarray(target, dtype=bool)
    count = int(target.sum())
    if count == 0:
        raise InputError("batch has no TARGET slots")
    w = target.astype(x0.dtype)[..., None] / (count * x0.shape[-1])
    diff = ag.sub(x0_hat, x0)
    return ag.tensor_sum(ag.square(diff) * w)


def loss_distance(x0_hat, table, centroids: np.ndarray, cell_side_m: float, tau: float = 1.0) -> Tensor:
    """Mean squared displacement between consecutive soft-decoded slots.

    Soft coordinates are softmax(cosine / tau)-weighted cell centres, in
    units of the cell side. ``x0_hat`` is ``(B, N, d)``; ``table`` may be a
    Tensor when the embedding is trained jointly.
    """
    x0_hat = ag.as_tensor(x0_hat)
    if x0_hat.shape[-2] < 2:
        raise InputError("distance loss needs at least two slots")
    if tau <= 0:
        raise InputError("tau must be positive")
    dtype = x0_hat.dtype
    eps = np.asarray(1e-12, dtype=dtype)
    tbl = ag.as_tensor(table, dtype)
    rows = tbl[:-1]
    rows_n = rows / ag.sqrt(ag.tensor_sum(ag.square(rows), axis=-1, keepdims=True) + eps)
    xn = x0_hat / ag.sqrt(ag.tensor_sum(ag.square(x0_hat), axis=-1, keepdims=True) + eps)
    scores = ag.matmul(xn, ag.transpose(rows_n)) * (1.0 / tau)
    probs = ag.softmax(scores, axis=-1)
    coords = ag.matmul(probs, (np.asarray(centroids) / cell_side_m).astype(dtype))
    step = coords[..., 1:, :] - coords[..., :-1, :]
    per_traj = ag.tensor_sum(ag.square(step), axis=(-2, -1)) * (1.0 / (x0_hat.shape[-2] - 1))
    return ag.mean(per_traj)


def total_loss(simple: Tensor, distance: Tensor, lambda_d: float = 1.2) -> Tensor:
    if lambda_d < 0:
        raise InputError("lambda_d must be non-negative")
    if lambda_d == 0:
        return simple
    return simple + distance * lambda_d
