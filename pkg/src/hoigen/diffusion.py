"""Gaussian diffusion with clean-signal (x0) prediction.

Timesteps are 1-based: ``t = 1`` is the least noisy step and ``t = T`` the
noisiest. Schedules are kept in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


@dataclass
class DiffusionSchedule:
    betas: np.ndarray
    timesteps: np.ndarray  # original 1-based step of every entry

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("schedule needs at least one beta")
        if not np.all((b > 0) & (b < 1)):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.betas = b
        self.alphas = 1.0 - b
        self.alphas_cumprod = np.cumprod(self.alphas)
        prev = np.concatenate([[1.0], self.alphas_cumprod[:-1]])
        self.alphas_cumprod_prev = prev
        self.posterior_variance = b * (1.0 - prev) / (1.0 - self.alphas_cumprod)
        self.coef_x0 = b * np.sqrt(prev) / (1.0 - self.alphas_cumprod)
        self.coef_xt = (1.0 - prev) * np.sqrt(self.alphas) / (1.0 - self.alphas_cumprod)

    @property
    def T(self) -> int:
        return len(self.betas)

    def _index(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"timestep out of range [1, {self.T}]: {t}")
        return t.astype(np.int64) - 1


def build_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2) -> DiffusionSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0 < beta_min < 1 and 0 < beta_max < 1):
        raise ValueError(f"betas must lie in (0, 1): {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64) if T > 1 else np.array([beta_min])
    return DiffusionSchedule(betas, np.arange(1, T + 1))


def respace(sched: DiffusionSchedule, steps: int) -> DiffusionSchedule:
    """Evenly strided sub-schedule with betas recomputed from the kept ``alpha_bar``.

    ``timesteps`` records the original step each entry corresponds to, which
    is what the denoiser must be told.
    """
    if steps >= sched.T:
        return sched
    if steps < 1:
        raise ValueError("steps must be >= 1")
    keep = np.unique(np.round(np.linspace(0, sched.T - 1, steps)).astype(np.int64))
    ac = sched.alphas_cumprod[keep]
    prev = np.concatenate([[1.0], ac[:-1]])
    return DiffusionSchedule(1.0 - ac / prev, sched.timesteps[keep])


def _bcast(vals: np.ndarray, x: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(vals, dtype=x.dtype)
    return v.reshape(-1, *([1] * (x.dim() - 1))) if v.dim() else v


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` scalar or per-batch."""
    if eps.shape != x0.shape:
        raise ValueError(f"q_sample: noise shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    i = sched._index(t.cpu().numpy() if isinstance(t, torch.Tensor) else t)
    ac = sched.alphas_cumprod[i]
    return _bcast(np.sqrt(ac), x0) * x0 + _bcast(np.sqrt(1.0 - ac), x0) * eps


def posterior_mean_variance(x0_hat: torch.Tensor, x_t: torch.Tensor, index: int, sched: DiffusionSchedule):
    """Mean and variance of ``q(x_{t-1} | x_t, x0)`` at schedule entry ``index`` (0-based)."""
    mean = sched.coef_x0[index] * x0_hat + sched.coef_xt[index] * x_t
    return mean, float(sched.posterior_variance[index])


@dataclass
class GuidanceConfig:
    scale: float = 2.0
    cond_dropout: float = 0.1

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if not 0 <= self.cond_dropout < 1:
            raise ValueError("cond_dropout must be in [0, 1)")


def guided(x0_cond: torch.Tensor, x0_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """``u + s (c - u)``, written so that s = 0 and s = 1 are exact."""
    return (1.0 - scale) * x0_uncond + scale * x0_cond


def drop_condition(batch: int, p: float, generator: torch.Generator) -> torch.Tensor:
    """Boolean mask of rows whose condition is replaced by the null prompt."""
    if p <= 0:
        return torch.zeros(batch, dtype=torch.bool)
    return torch.rand(batch, generator=generator) < p


Denoiser = Callable[[torch.Tensor, torch.Tensor, bool], torch.Tensor]


@torch.no_grad()
def p_sample_loop(
    model: Denoiser,
    shape: tuple,
    sched: DiffusionSchedule,
    guidance_scale: float = 2.0,
    seed: int = 0,
    steps: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Ancestral sampling with an x0-predicting ``model(x_t, t, conditional)``.

    ``t`` passed to the model is the (original-schedule) 1-based timestep per
    batch row. With ``steps`` below ``T`` the schedule is respaced.
    """
    if guidance_scale < 0:
        raise ValueError("guidance scale must be >= 0")
    sp = respace(sched, steps) if steps else sched
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(shape, generator=gen, dtype=dtype)
    for i in range(sp.T - 1, -1, -1):
        t = torch.full((shape[0],), int(sp.timesteps[i]), dtype=torch.long)
        if guidance_scale == 1.0:
            x0 = model(x, t, True)
        elif guidance_scale == 0.0:
            x0 = model(x, t, False)
        else:
            x0 = guided(model(x, t, True), model(x, t, False), guidance_scale)
        if not torch.isfinite(x0).all():
            raise FloatingPointError(f"p_sample_loop: non-finite prediction at step t={int(sp.timesteps[i])}")
        mean, var = posterior_mean_variance(x0, x, i, sp)
        if i > 0:
            x = mean + np.sqrt(var) * torch.randn(shape, generator=gen, dtype=dtype)
        else:
            x = mean
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"p_sample_loop: non-finite sample at step t={int(sp.timesteps[i])}")
    return x
