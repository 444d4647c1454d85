"""Conditional mel diffusion: loss with conditioning dropout, guidance, sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .schedule import (
    NoiseSchedule,
    posterior_mean,
    posterior_std,
    predict_x0_from_eps,
    q_sample,
)
from .unet import DenoiserConfig, build_denoiser

log = logging.getLogger(__name__)


class ConditioningError(ValueError):
    pass


class SamplingError(RuntimeError):
    def __init__(self, step: int, max_abs: float):
        super().__init__(f"non-finite sampler state at step {step} (max |x| = {max_abs})")
        self.step = step
        self.max_abs = max_abs


class ConditionalDiffusion(nn.Module):
    """Noise predictor eps(x_t, t, c) plus the learnable null conditioning vector."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.net = build_denoiser(cfg)
        self.null_embedding = nn.Parameter(torch.randn(cfg.cond_dim) / cfg.cond_dim**0.5)

    def forward(self, x_t, t, cond):
        return self.net(x_t, t, cond)

    def check_cond(self, cond: torch.Tensor) -> None:
        if cond.shape[-1] != self.cfg.cond_dim:
            raise ConditioningError(f"embedding dimension {cond.shape[-1]} != cond_dim {self.cfg.cond_dim}")

    def null_batch(self, n: int) -> torch.Tensor:
        return self.null_embedding[None].expand(n, -1)


def training_loss(
    model: ConditionalDiffusion,
    x0: torch.Tensor,
    cond: torch.Tensor,
    sched: NoiseSchedule,
    cond_dropout: float = 0.1,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """MSE between predicted and injected noise, with random null-conditioning dropout.

    All randomness (timesteps, noise, dropout mask) is drawn from ``generator``
    so reseeding it makes the loss a deterministic function of the parameters.
    """
    if not 0.0 <= cond_dropout <= 1.0:
        raise ValueError(f"cond_dropout must be in [0, 1], got {cond_dropout}")
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    model.check_cond(cond)
    b = x0.shape[0]
    k = torch.randint(0, sched.n_steps, (b,), generator=generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    drop = torch.rand(b, generator=generator) < cond_dropout
    cond = torch.where(drop[:, None], model.null_batch(b).to(cond.dtype), cond)
    x_t = q_sample(x0, k, noise, sched)
    pred = model(x_t, sched.network_time(k), cond)
    return torch.mean((pred - noise) ** 2)


def guided_eps(model: ConditionalDiffusion, x_t, t, cond: torch.Tensor | None, w: float) -> torch.Tensor:
    """eps_uncond + w * (eps_cond - eps_uncond).

    w = 0 and w = 1 return the single corresponding forward pass unchanged.
    """
    if w < 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    b = x_t.shape[0]
    if cond is None or w == 0:
        return model(x_t, t, model.null_batch(b))
    model.check_cond(cond)
    if w == 1:
        return model(x_t, t, cond)
    both = model(torch.cat([x_t, x_t]), torch.cat([t, t]), torch.cat([model.null_batch(b), cond]))
    uncond, c = both.chunk(2)
    return uncond + w * (c - uncond)


@torch.no_grad()
def sample(
    model: ConditionalDiffusion,
    cond: torch.Tensor | None,
    w: float,
    sched: NoiseSchedule,
    seed: int | list[int] = 0,
    n: int | None = None,
    norm_range: tuple[float, float] = (-1.0, 1.0),
    clip_denoised: bool = True,
) -> torch.Tensor:
    """Ancestral sampling from pure noise; returns (B, H, W) clamped to ``norm_range``.

    Each batch item has its own generator (``seed + i`` or an explicit list),
    so a sample does not depend on what else shares its batch.
    """
    if cond is not None:
        n = cond.shape[0]
    elif n is None:
        raise ValueError("n is required for unconditional sampling")
    seeds = list(seed) if isinstance(seed, (list, tuple)) else [seed + i for i in range(n)]
    if len(seeds) != n:
        raise ValueError("one seed per sample is required")
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    shape = model.cfg.input_shape

    def draw():
        return torch.stack([torch.randn(shape, generator=g) for g in gens])

    lo, hi = norm_range
    x = draw()
    for k in reversed(range(sched.n_steps)):
        kk = torch.full((n,), k, dtype=torch.long)
        eps = guided_eps(model, x, sched.network_time(kk), cond, w)
        x0 = predict_x0_from_eps(x, kk, eps, sched)
        if clip_denoised:
            x0 = x0.clamp(lo, hi)
        x = posterior_mean(x0, x, kk, sched)
        if k > 0:
            x = x + posterior_std(kk, sched, x) * draw()
        if not torch.isfinite(x).all():
            raise SamplingError(k, float(x.abs().nan_to_num(posinf=np.inf).max()))
    return x.clamp(lo, hi)


@dataclass
class DiffusionTrainer:
    """Parameters, AdamW state, step counter and the training RNG."""

    model: ConditionalDiffusion
    lr: float = 1e-4
    weight_decay: float = 0.0
    cond_dropout: float = 0.1
    seed: int = 0
    step: int = 0
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        self.generator = torch.Generator().manual_seed(self.seed)

    def train_step(self, x0: torch.Tensor, cond: torch.Tensor, sched: NoiseSchedule) -> float:
        self.model.train()
        loss = training_loss(self.model, x0, cond, sched, self.cond_dropout, self.generator)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        value = float(loss.detach())
        self.losses.append(value)
        return value

    def fit(self, mels: torch.Tensor, conds: torch.Tensor, sched: NoiseSchedule, steps: int, batch_size: int = 32,
            log_every: int = 0) -> list[float]:
        """Train on in-memory tensors, drawing batch indices from the trainer's generator."""
        if conds.shape[0] != mels.shape[0]:
            raise ConditioningError("mels and embeddings must be paired")
        self.model.check_cond(conds)
        for _ in range(steps):
            idx = torch.randint(0, mels.shape[0], (min(batch_size, mels.shape[0]),), generator=self.generator)
            loss = self.train_step(mels[idx], conds[idx], sched)
            if log_every and self.step % log_every == 0:
                log.info("diffusion step %d loss %.4f", self.step, loss)
        return self.losses
