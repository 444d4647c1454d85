"""Diffusion prior mapping text embeddings (plus tokens) to image embeddings.

A causal transformer reads the sequence

    [text tokens..., text embedding, step embedding, noised image embedding, final query]

and the output at the final query slot is the predicted clean image embedding.
"""

from __future__ import annotations

import copy
import logging
import re
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion.schedule import (
    NoiseSchedule,
    make_cosine_schedule,
    posterior_mean,
    posterior_std,
    q_sample,
    respace_schedule,
)
from .diffusion.model import SamplingError
from .diffusion.unet import timestep_embedding

log = logging.getLogger(__name__)

PAD_ID = 0
BOS_ID = 1
UNK_ID = 2


@dataclass(frozen=True)
class PriorConfig:
    n_layers: int = 12
    model_dim: int = 128
    n_heads: int = 4
    token_seq_len: int = 16
    embed_dim: int = 32
    vocab_size: int = 64
    ff_mult: int = 4
    train_steps: int = 1000
    inference_steps: int = 64
    cfg_dropout: float = 0.1
    ema_decay: float = 0.9999
    lr: float = 1e-4
    weight_decay: float = 0.06
    batch: int = 32
    renormalize_output: bool = False

    def __post_init__(self):
        if not 1 <= self.inference_steps <= self.train_steps:
            raise ValueError("inference_steps must be in [1, train_steps]")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ValueError("cfg_dropout must be in [0, 1]")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must be in [0, 1]")
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if self.lr <= 0 or self.weight_decay < 0 or self.batch < 1:
            raise ValueError("invalid optimizer settings")

    @property
    def seq_len(self) -> int:
        return self.token_seq_len + 4


class WordTokenizer:
    """Whitespace word tokenizer over a fixed vocabulary; id 0 pads, 1 starts."""

    def __init__(self, words, seq_len: int):
        self.seq_len = seq_len
        self.vocab = {w: i + 3 for i, w in enumerate(sorted(set(words)))}

    @classmethod
    def from_texts(cls, texts, seq_len: int) -> "WordTokenizer":
        return cls((w for t in texts for w in cls.split(t)), seq_len)

    @staticmethod
    def split(text: str) -> list[str]:
        return re.findall(r"[a-z0-9]+", text.lower())

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 3

    def __call__(self, texts) -> tuple[torch.Tensor, torch.Tensor]:
        """Token ids (B, seq_len) and a validity mask (True = real token)."""
        if isinstance(texts, str):
            texts = [texts]
        ids = torch.full((len(texts), self.seq_len), PAD_ID, dtype=torch.long)
        for row, text in enumerate(texts):
            toks = [BOS_ID] + [self.vocab.get(w, UNK_ID) for w in self.split(text)]
            toks = toks[: self.seq_len]
            ids[row, : len(toks)] = torch.tensor(toks)
        return ids, ids != PAD_ID


@dataclass
class PriorInputSequence:
    """Projected model inputs (B, token_seq_len + 4, model_dim) and key validity mask."""

    values: torch.Tensor
    valid: torch.Tensor

    @property
    def length(self) -> int:
        return self.values.shape[1]


class PriorTransformer(nn.Module):
    def __init__(self, cfg: PriorConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.token_embed = nn.Embedding(cfg.vocab_size, d)
        self.pos_embed = nn.Parameter(torch.randn(cfg.seq_len, d) * 0.02)
        self.text_proj = nn.Linear(cfg.embed_dim, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU())
        self.image_proj = nn.Linear(cfg.embed_dim, d)
        self.final_query = nn.Parameter(torch.randn(d) * 0.02)
        self.token_placeholder = nn.Parameter(torch.randn(cfg.token_seq_len, d) * 0.02)
        self.text_placeholder = nn.Parameter(torch.randn(d) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d, cfg.n_heads, dim_feedforward=cfg.ff_mult * d, dropout=0.0, batch_first=True, norm_first=True
        )
        self.transformer = nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)
        self.out_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.embed_dim)
        mask = torch.triu(torch.ones(cfg.seq_len, cfg.seq_len, dtype=torch.bool), diagonal=1)
        self.register_buffer("causal_mask", mask, persistent=False)

    def build_input_sequence(
        self,
        *,
        tokens: torch.Tensor,
        text_embedding: torch.Tensor,
        t: torch.Tensor,
        noised_image: torch.Tensor,
        token_mask: torch.Tensor | None = None,
        drop: torch.Tensor | None = None,
    ) -> PriorInputSequence:
        """Assemble the fixed-order input sequence.

        ``t`` is continuous time in [0, 1). ``drop`` (B,) swaps the token and
        text-embedding slots for the learnable placeholders.
        """
        cfg = self.cfg
        b = tokens.shape[0]
        if tokens.shape[1] != cfg.token_seq_len:
            raise ValueError(f"expected {cfg.token_seq_len} tokens, got {tokens.shape[1]}")
        for name, emb in (("text_embedding", text_embedding), ("noised_image", noised_image)):
            if emb.shape != (b, cfg.embed_dim):
                raise ValueError(f"{name} must have shape ({b}, {cfg.embed_dim}), got {tuple(emb.shape)}")
        if token_mask is None:
            token_mask = tokens != PAD_ID
        dtype = self.pos_embed.dtype
        tok = self.token_embed(tokens)
        txt = self.text_proj(text_embedding.to(dtype))
        if drop is not None and bool(drop.any()):
            tok = torch.where(drop[:, None, None], self.token_placeholder[None].expand(b, -1, -1), tok)
            txt = torch.where(drop[:, None], self.text_placeholder[None].expand(b, -1), txt)
            token_mask = token_mask | drop[:, None]
        temb = self.time_mlp(timestep_embedding(t, cfg.model_dim).to(dtype))
        img = self.image_proj(noised_image.to(dtype))
        query = self.final_query[None].expand(b, -1)
        values = torch.cat([tok, txt[:, None], temb[:, None], img[:, None], query[:, None]], dim=1)
        valid = torch.cat([token_mask, torch.ones(b, 4, dtype=torch.bool)], dim=1)
        return PriorInputSequence(values + self.pos_embed, valid)

    def predict(self, seq: PriorInputSequence) -> torch.Tensor:
        h = self.transformer(seq.values, mask=self.causal_mask, src_key_padding_mask=~seq.valid, is_causal=False)
        return self.out_proj(self.out_norm(h[:, -1]))

    def forward(self, tokens, text_embedding, t, noised_image, token_mask=None, drop=None):
        seq = self.build_input_sequence(
            tokens=tokens,
            text_embedding=text_embedding,
            t=t,
            noised_image=noised_image,
            token_mask=token_mask,
            drop=drop,
        )
        return self.predict(seq)


def prior_training_loss(
    model: PriorTransformer,
    tokens: torch.Tensor,
    text_embedding: torch.Tensor,
    image_embedding: torch.Tensor,
    sched: NoiseSchedule,
    cfg_dropout: float | None = None,
    generator: torch.Generator | None = None,
    token_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """MSE between the predicted and the clean image embedding."""
    if not (tokens.shape[0] == text_embedding.shape[0] == image_embedding.shape[0]):
        raise ValueError("tokens, text and image embeddings must be paired")
    p = model.cfg.cfg_dropout if cfg_dropout is None else cfg_dropout
    b = tokens.shape[0]
    dtype = model.pos_embed.dtype
    k = torch.randint(0, sched.n_steps, (b,), generator=generator)
    noise = torch.randn(image_embedding.shape, generator=generator, dtype=dtype)
    drop = torch.rand(b, generator=generator) < p
    target = image_embedding.to(dtype)
    x_t = q_sample(target, k, noise, sched)
    pred = model(tokens, text_embedding, sched.network_time(k), x_t, token_mask=token_mask, drop=drop)
    return torch.mean((pred - target) ** 2)


def ema_update(shadow: nn.Module, model: nn.Module, decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    with torch.no_grad():
        for s, p in zip(shadow.parameters(), model.parameters()):
            s.mul_(decay).add_(p.detach(), alpha=1.0 - decay)


@dataclass
class PriorTrainer:
    model: PriorTransformer
    seed: int = 0
    step: int = 0
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        cfg = self.model.cfg
        self.ema = copy.deepcopy(self.model).requires_grad_(False)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.generator = torch.Generator().manual_seed(self.seed)
        self.schedule = make_cosine_schedule(cfg.train_steps)

    def train_step(self, tokens, text_embedding, image_embedding, token_mask=None) -> float:
        self.model.train()
        loss = prior_training_loss(
            self.model, tokens, text_embedding, image_embedding, self.schedule,
            generator=self.generator, token_mask=token_mask,
        )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        ema_update(self.ema, self.model, self.model.cfg.ema_decay)
        self.step += 1
        value = float(loss.detach())
        self.losses.append(value)
        return value

    def fit(self, tokens, text_embedding, image_embedding, steps: int, log_every: int = 0) -> list[float]:
        n = tokens.shape[0]
        for _ in range(steps):
            idx = torch.randint(0, n, (min(self.model.cfg.batch, n),), generator=self.generator)
            loss = self.train_step(tokens[idx], text_embedding[idx], image_embedding[idx])
            if log_every and self.step % log_every == 0:
                log.info("prior step %d loss %.5f", self.step, loss)
        return self.losses


@torch.no_grad()
def prior_sample(
    model: PriorTransformer,
    tokens: torch.Tensor,
    text_embedding: torch.Tensor,
    guidance: float = 1.0,
    seed: int | list[int] = 0,
    sched: NoiseSchedule | None = None,
    token_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Ancestral sampling of image embeddings with the x0-form posterior mean.

    Pass the EMA copy as ``model`` to sample with averaged weights. At
    ``guidance == 1`` only the conditional branch is evaluated.
    """
    cfg = model.cfg
    if sched is None:
        sched = respace_schedule(make_cosine_schedule(cfg.train_steps), cfg.inference_steps)
    model.eval()
    b = tokens.shape[0]
    seeds = list(seed) if isinstance(seed, (list, tuple)) else [seed + i for i in range(b)]
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    dtype = model.pos_embed.dtype

    def draw():
        return torch.stack([torch.randn(cfg.embed_dim, generator=g, dtype=dtype) for g in gens])

    text_embedding = text_embedding.to(dtype)
    x = draw()
    keep = torch.zeros(b, dtype=torch.bool)
    dropped = torch.ones(b, dtype=torch.bool)
    for k in reversed(range(sched.n_steps)):
        kk = torch.full((b,), k, dtype=torch.long)
        t = sched.network_time(kk)
        x0 = model(tokens, text_embedding, t, x, token_mask=token_mask, drop=keep)
        if guidance != 1.0:
            uncond = model(tokens, text_embedding, t, x, token_mask=token_mask, drop=dropped)
            x0 = uncond + guidance * (x0 - uncond)
        x = posterior_mean(x0, x, kk, sched)
        if k > 0:
            x = x + posterior_std(kk, sched, x) * draw()
        if not torch.isfinite(x).all():
            raise SamplingError(k, float(x.abs().nan_to_num(posinf=np.inf).max()))
    if cfg.renormalize_output:
        x = F.normalize(x, dim=-1)
    return x


@torch.no_grad()
def sample_best_of_two(
    model: PriorTransformer,
    tokens: torch.Tensor,
    text_embedding: torch.Tensor,
    seeds: tuple[int, int] = (0, 1),
    guidance: float = 1.0,
    sched: NoiseSchedule | None = None,
) -> torch.Tensor:
    """Draw two candidates per query and keep the one closer (cosine) to the text embedding."""
    b = tokens.shape[0]
    first = prior_sample(model, tokens, text_embedding, guidance, [seeds[0] + 2 * i for i in range(b)], sched)
    second = prior_sample(model, tokens, text_embedding, guidance, [seeds[1] + 2 * i for i in range(b)], sched)
    text = text_embedding.to(first.dtype)
    pick_second = F.cosine_similarity(second, text, dim=-1) > F.cosine_similarity(first, text, dim=-1)
    return torch.where(pick_second[:, None], second, first)
