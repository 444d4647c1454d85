"""Noise schedules, respacing and the forward (noising) process.

Schedules are kept in float64 numpy; conversion to torch happens at the call
site so respacing can preserve retained marginals to ~1e-15.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Discrete schedule.

    ``alpha_bar[k]`` is the cumulative signal coefficient after step ``k``
    (so ``alpha_bar[0] = 1 - beta[0]``), and ``timesteps[k]`` is the index of
    that step in the training schedule the network was trained on.
    """

    alpha_bar: np.ndarray
    beta: np.ndarray
    timesteps: np.ndarray
    train_steps: int
    kind: str = "cosine"

    @property
    def n_steps(self) -> int:
        return len(self.alpha_bar)

    @property
    def alpha_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        """Fixed-small variance beta_tilde of q(x_{k-1} | x_k, x_0)."""
        return self.beta * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    @property
    def posterior_mean_coefs(self) -> tuple[np.ndarray, np.ndarray]:
        ab, ab_prev = self.alpha_bar, self.alpha_bar_prev
        coef_x0 = self.beta * np.sqrt(ab_prev) / (1.0 - ab)
        coef_xt = (1.0 - ab_prev) * np.sqrt(1.0 - self.beta) / (1.0 - ab)
        return coef_x0, coef_xt

    def network_time(self, k) -> torch.Tensor:
        """Continuous time in [0, 1) fed to the network for respaced step(s) ``k``."""
        k = torch.as_tensor(k, dtype=torch.long)
        return torch.as_tensor(self.timesteps, dtype=torch.float64)[k].float() / self.train_steps

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.train_steps == other.train_steps
            and np.array_equal(self.alpha_bar, other.alpha_bar)
            and np.array_equal(self.beta, other.beta)
            and np.array_equal(self.timesteps, other.timesteps)
        )


def cosine_alpha_bar(t, n_steps: int, s: float = COSINE_OFFSET):
    """Closed form f(t)/f(0) with f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)."""

    def f(u):
        return np.cos((u + s) / (1 + s) * math.pi / 2) ** 2

    return f(np.asarray(t, dtype=np.float64) / n_steps) / f(0.0)


def make_cosine_schedule(n_steps: int, s: float = COSINE_OFFSET) -> NoiseSchedule:
    if n_steps < 1:
        raise ScheduleError(f"n_steps must be >= 1, got {n_steps}")
    ab = cosine_alpha_bar(np.arange(n_steps + 1), n_steps, s)
    beta = np.minimum(1.0 - ab[1:] / ab[:-1], MAX_BETA)
    return NoiseSchedule(
        alpha_bar=np.cumprod(1.0 - beta),
        beta=beta,
        timesteps=np.arange(n_steps),
        train_steps=n_steps,
    )


def respace_schedule(sched: NoiseSchedule, n_inference: int) -> NoiseSchedule:
    """Keep ``n_inference`` evenly spaced steps (first and last included)."""
    if not 1 <= n_inference <= sched.n_steps:
        raise ScheduleError(f"n_inference must be in [1, {sched.n_steps}], got {n_inference}")
    if n_inference == sched.n_steps:
        return sched
    if n_inference == 1:
        keep = np.array([sched.n_steps - 1])
    else:
        stride = (sched.n_steps - 1) / (n_inference - 1)
        keep = np.unique(np.round(np.arange(n_inference) * stride).astype(np.int64))
    ab = sched.alpha_bar[keep]
    beta = 1.0 - ab / np.concatenate([[1.0], ab[:-1]])
    return NoiseSchedule(
        alpha_bar=ab,
        beta=beta,
        timesteps=sched.timesteps[keep],
        train_steps=sched.train_steps,
        kind=sched.kind,
    )


def _broadcast(values: np.ndarray, k: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = torch.as_tensor(values, dtype=torch.float64)[k.long()].to(like.dtype)
    return out.reshape(-1, *([1] * (like.dim() - 1)))


def q_sample(x0: torch.Tensor, k, noise: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_k = sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) noise (batched over dim 0)."""
    if noise.shape != x0.shape:
        raise ScheduleError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    k = torch.as_tensor(k, dtype=torch.long)
    if k.dim() == 0:
        k = k.expand(x0.shape[0]) if x0.dim() > 0 else k.reshape(1)
    if int(k.min()) < 0 or int(k.max()) >= sched.n_steps:
        raise ScheduleError(f"step index out of range [0, {sched.n_steps})")
    a = _broadcast(np.sqrt(sched.alpha_bar), k, x0)
    b = _broadcast(np.sqrt(1.0 - sched.alpha_bar), k, x0)
    return a * x0 + b * noise


def predict_x0_from_eps(x_t, k, eps, sched: NoiseSchedule):
    a = _broadcast(np.sqrt(1.0 / sched.alpha_bar), k, x_t)
    b = _broadcast(np.sqrt(1.0 / sched.alpha_bar - 1.0), k, x_t)
    return a * x_t - b * eps


def posterior_mean(x0, x_t, k, sched: NoiseSchedule):
    c0, ct = sched.posterior_mean_coefs
    return _broadcast(c0, k, x_t) * x0 + _broadcast(ct, k, x_t) * x_t


def posterior_std(k, sched: NoiseSchedule, like: torch.Tensor):
    return _broadcast(np.sqrt(sched.posterior_variance), k, like)
