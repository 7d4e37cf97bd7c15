"""Variance schedule, coupled forward noising, posterior statistics, and the training loss.

Timesteps run over 1..T. Schedule arrays carry a padding entry at index 0
with alpha_bar[0] = 1, so ``schedule.alpha_bar[t]`` reads naturally and the
t = 1 posterior variance is exactly zero.

Everything here works in the model range [-1, 1]; :func:`to_model_range`
and :func:`from_model_range` convert from and to [0, 1] images.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np
import torch

from .morph_engine import ContractError

Steps = Union[int, torch.Tensor]
Denoiser = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

PAIR_CHANNELS = 6
COND_CHANNELS = 3


def to_model_range(x):
    return x * 2.0 - 1.0


def from_model_range(x):
    return (x + 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class VarianceSchedule:
    """Precomputed schedule sequences, float64, each of length T + 1."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    def digest(self) -> str:
        """Stable hash of the schedule, used to pair checkpoints with samplers."""
        h = hashlib.sha256()
        h.update(str(self.T).encode())
        h.update(np.ascontiguousarray(self.beta, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def check_step(self, t: Steps) -> None:
        tt = torch.as_tensor(t)
        if tt.numel() == 0:
            raise ContractError("empty timestep tensor")
        if int(tt.min()) < 1 or int(tt.max()) > self.T:
            raise ContractError(f"timestep outside 1..{self.T}: {tt.tolist()}")

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "beta", "alpha", "alpha_bar", "beta_tilde"])
            for t in range(1, self.T + 1):
                w.writerow([t, repr(float(self.beta[t])), repr(float(self.alpha[t])),
                            repr(float(self.alpha_bar[t])), repr(float(self.beta_tilde[t]))])


def schedule_from_betas(betas) -> VarianceSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) < 1:
        raise ContractError("need at least one beta")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ContractError("every beta must lie in (0, 1)")
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    beta_tilde = np.zeros_like(beta)
    beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    for arr in (beta, alpha, alpha_bar, beta_tilde):
        arr.setflags(write=False)
    return VarianceSchedule(beta, alpha, alpha_bar, beta_tilde)


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> VarianceSchedule:
    """Betas spaced linearly from ``beta_start`` (t = 1) to ``beta_end`` (t = T)."""
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _coef(values: np.ndarray, t: Steps, like: torch.Tensor) -> torch.Tensor:
    """Gather ``values[t]`` shaped to broadcast against ``like``."""
    tt = torch.as_tensor(t, dtype=torch.long)
    out = torch.as_tensor(np.asarray(values), dtype=torch.float64)[tt]
    if out.ndim == 0:
        return out.to(like.dtype)
    return out.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(i0: torch.Tensor, t: Steps, eps: torch.Tensor, schedule: VarianceSchedule) -> torch.Tensor:
    """Noise the coupled sample: sqrt(abar_t) * i0 + sqrt(1 - abar_t) * eps, channel-wise."""
    schedule.check_step(t)
    if i0.shape != eps.shape:
        raise ContractError(f"noise shape {tuple(eps.shape)} != sample shape {tuple(i0.shape)}")
    abar = schedule.alpha_bar
    return _coef(np.sqrt(abar), t, i0) * i0 + _coef(np.sqrt(1.0 - abar), t, i0) * eps


def posterior_coefficients(schedule: VarianceSchedule, t: int, s: int | None = None):
    """Coefficients of q(x_s | x_t, x_0) for s < t (default s = t - 1).

    Returns (coef_x0, coef_xt, variance). For s < t - 1 the single-step terms
    are replaced by their ratios over the skipped span, which is what strided
    sampling needs.
    """
    s = t - 1 if s is None else s
    if not 0 <= s < t <= schedule.T:
        raise ContractError(f"need 0 <= s < t <= {schedule.T}, got s={s}, t={t}")
    abar_t = float(schedule.alpha_bar[t])
    abar_s = float(schedule.alpha_bar[s])
    alpha_ts = abar_t / abar_s
    beta_ts = 1.0 - alpha_ts
    denom = 1.0 - abar_t
    coef_x0 = np.sqrt(abar_s) * beta_ts / denom
    coef_xt = np.sqrt(alpha_ts) * (1.0 - abar_s) / denom
    variance = (1.0 - abar_s) / denom * beta_ts
    return coef_x0, coef_xt, variance


def posterior_mean_variance(i_t: torch.Tensor, i0: torch.Tensor, t: int, schedule: VarianceSchedule):
    """Mean and variance of q(i_{t-1} | i_t, i0)."""
    schedule.check_step(t)
    t = int(t)
    coef_x0, coef_xt, _ = posterior_coefficients(schedule, t)
    mean = coef_x0 * i0 + coef_xt * i_t
    return mean, float(schedule.beta_tilde[t])


def predict_x0_from_eps(i_t: torch.Tensor, eps_pred: torch.Tensor, t: Steps,
                        schedule: VarianceSchedule, clip: bool = False) -> torch.Tensor:
    """Invert the forward marginal for a given noise estimate."""
    schedule.check_step(t)
    abar = schedule.alpha_bar
    x0 = (i_t - _coef(np.sqrt(1.0 - abar), t, i_t) * eps_pred) / _coef(np.sqrt(abar), t, i_t)
    if clip:
        x0 = x0.clamp(-1.0, 1.0)
    return x0


def training_loss(denoiser: Denoiser, i0: torch.Tensor, morph: torch.Tensor, t: Steps,
                  eps: torch.Tensor, schedule: VarianceSchedule) -> torch.Tensor:
    """Mean squared error between ``eps`` and the denoiser's estimate.

    ``i0`` is the (B, 6, H, W) coupled pair and ``morph`` the (B, 3, H, W)
    condition, both in model range. The denoiser sees the 9-channel stack
    (noisy pair, morph).
    """
    if i0.ndim != 4 or i0.shape[1] != PAIR_CHANNELS:
        raise ContractError(f"coupled sample must be (B, 6, H, W), got {tuple(i0.shape)}")
    if morph.ndim != 4 or morph.shape[1] != COND_CHANNELS or morph.shape[0] != i0.shape[0] \
            or morph.shape[2:] != i0.shape[2:]:
        raise ContractError(f"morph must be (B, 3, H, W) matching the pair, got {tuple(morph.shape)}")
    tt = torch.as_tensor(t, dtype=torch.long)
    if tt.ndim == 0:
        tt = tt.expand(i0.shape[0])
    i_t = q_sample(i0, tt, eps, schedule)
    pred = denoiser(torch.cat([i_t, morph], dim=1), tt)
    if pred.shape != eps.shape:
        raise ContractError(f"denoiser returned {tuple(pred.shape)}, expected {tuple(eps.shape)}")
    return torch.mean((eps - pred) ** 2)
