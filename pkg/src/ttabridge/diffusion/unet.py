"""Noise-prediction networks for mel spectrograms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DenoiserConfig:
    input_shape: tuple[int, int] = (64, 64)
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    # downsampling factors at which attention blocks are inserted
    attention_resolutions: tuple[int, ...] = (4,)
    cond_dim: int = 32
    time_embed_dim: int = 128
    num_res_blocks: int = 1
    num_heads: int = 4
    context_tokens: int = 4
    cross_attention: bool = True
    renormalize_cond: bool = False
    dropout: float = 0.0
    kind: str = "unet"

    def __post_init__(self):
        div = 2 ** (len(self.channel_multipliers) - 1)
        h, w = self.input_shape
        if self.kind == "unet" and (h % div or w % div):
            raise ValueError(f"input_shape {self.input_shape} must be divisible by {div}")
        if self.cond_dim < 1:
            raise ValueError("cond_dim must be positive")


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of continuous time ``t`` in [0, 1), scaled to [0, 1000)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = (t.double()[:, None] * 1000.0) * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    groups = math.gcd(channels, 8)
    return nn.GroupNorm(groups, channels)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, dropout: float):
        super().__init__()
        self.in_layers = nn.Sequential(_norm(in_ch), nn.SiLU(), nn.Conv2d(in_ch, out_ch, 3, padding=1))
        self.emb_proj = nn.Sequential(nn.SiLU(), nn.Linear(emb_dim, 2 * out_ch))
        self.out_norm = _norm(out_ch)
        self.out_layers = nn.Sequential(
            nn.SiLU(), nn.Dropout(dropout), zero_module(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        )
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x, emb):
        h = self.in_layers(x)
        scale, shift = self.emb_proj(emb)[..., None, None].chunk(2, dim=1)
        h = self.out_norm(h) * (1 + scale) + shift
        return self.skip(x) + self.out_layers(h)


class AttentionBlock(nn.Module):
    """Self-attention over spatial positions, then cross-attention to conditioning tokens."""

    def __init__(self, channels: int, num_heads: int, context_dim: int | None):
        super().__init__()
        heads = math.gcd(num_heads, channels)
        self.norm = _norm(channels)
        self.self_attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.self_out = zero_module(nn.Linear(channels, channels))
        self.cross_attn = None
        if context_dim is not None:
            self.cross_norm = nn.LayerNorm(channels)
            self.cross_attn = nn.MultiheadAttention(
                channels, heads, kdim=context_dim, vdim=context_dim, batch_first=True
            )
            self.cross_out = zero_module(nn.Linear(channels, channels))

    def forward(self, x, context=None):
        b, c, h, w = x.shape
        seq = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        attn, _ = self.self_attn(seq, seq, seq, need_weights=False)
        seq = x.reshape(b, c, h * w).transpose(1, 2) + self.self_out(attn)
        if self.cross_attn is not None and context is not None:
            q = self.cross_norm(seq)
            attn, _ = self.cross_attn(q, context, context, need_weights=False)
            seq = seq + self.cross_out(attn)
        return seq.transpose(1, 2).reshape(b, c, h, w)


class UNetDenoiser(nn.Module):
    """U-shaped encoder/decoder predicting the injected noise.

    The conditioning vector is added to the timestep embedding and, when
    ``cross_attention`` is set, also exposed as ``context_tokens`` key/value
    tokens to the attention blocks.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.base_channels
        emb_dim = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.cond_mlp = nn.Sequential(nn.Linear(cfg.cond_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        ctx_dim = None
        if cfg.cross_attention:
            ctx_dim = emb_dim
            self.context_proj = nn.Linear(cfg.cond_dim, cfg.context_tokens * ctx_dim)

        self.input_conv = nn.Conv2d(1, ch, 3, padding=1)
        self.down = nn.ModuleList()
        skip_channels = [ch]
        cur = ch
        ds = 1
        for level, mult in enumerate(cfg.channel_multipliers):
            for _ in range(cfg.num_res_blocks):
                out = cfg.base_channels * mult
                block = nn.ModuleList([ResBlock(cur, out, emb_dim, cfg.dropout)])
                if ds in cfg.attention_resolutions:
                    block.append(AttentionBlock(out, cfg.num_heads, ctx_dim))
                self.down.append(block)
                cur = out
                skip_channels.append(cur)
            if level != len(cfg.channel_multipliers) - 1:
                self.down.append(nn.ModuleList([nn.Conv2d(cur, cur, 3, stride=2, padding=1)]))
                skip_channels.append(cur)
                ds *= 2

        self.mid = nn.ModuleList(
            [
                ResBlock(cur, cur, emb_dim, cfg.dropout),
                AttentionBlock(cur, cfg.num_heads, ctx_dim),
                ResBlock(cur, cur, emb_dim, cfg.dropout),
            ]
        )

        self.up = nn.ModuleList()
        for level, mult in reversed(list(enumerate(cfg.channel_multipliers))):
            for i in range(cfg.num_res_blocks + 1):
                out = cfg.base_channels * mult
                block = nn.ModuleList([ResBlock(cur + skip_channels.pop(), out, emb_dim, cfg.dropout)])
                if ds in cfg.attention_resolutions:
                    block.append(AttentionBlock(out, cfg.num_heads, ctx_dim))
                cur = out
                if level and i == cfg.num_res_blocks:
                    block.append(nn.Upsample(scale_factor=2, mode="nearest"))
                    block.append(nn.Conv2d(cur, cur, 3, padding=1))
                    ds //= 2
                self.up.append(block)

        self.out = nn.Sequential(_norm(cur), nn.SiLU(), zero_module(nn.Conv2d(cur, 1, 3, padding=1)))

    def _apply(self, block, h, emb, context):
        for layer in block:
            if isinstance(layer, ResBlock):
                h = layer(h, emb)
            elif isinstance(layer, AttentionBlock):
                h = layer(h, context)
            else:
                h = layer(h)
        return h

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """x: (B, H, W) noisy mel; t: (B,) continuous time; cond: (B, cond_dim)."""
        if self.cfg.renormalize_cond:
            cond = F.normalize(cond, dim=-1)
        temb = timestep_embedding(t, self.cfg.time_embed_dim).to(x.dtype)
        emb = self.time_mlp(temb) + self.cond_mlp(cond)
        context = None
        if self.cfg.cross_attention:
            context = self.context_proj(cond).reshape(x.shape[0], self.cfg.context_tokens, -1)

        h = self.input_conv(x[:, None])
        skips = [h]
        for block in self.down:
            h = self._apply(block, h, emb, context)
            skips.append(h)
        h = self._apply(self.mid, h, emb, context)
        for block in self.up:
            h = torch.cat([h, skips.pop()], dim=1)
            h = self._apply(block, h, emb, context)
        return self.out(h)[:, 0]


class TinyDenoiser(nn.Module):
    """Small MLP denoiser over flattened inputs (for gradient checks and tests)."""

    def __init__(self, cfg: DenoiserConfig, hidden: int = 16):
        super().__init__()
        self.cfg = cfg
        n = cfg.input_shape[0] * cfg.input_shape[1]
        self.inp = nn.Linear(n + 2 + cfg.cond_dim, hidden)
        self.out = nn.Linear(hidden, n)

    def forward(self, x, t, cond):
        if self.cfg.renormalize_cond:
            cond = F.normalize(cond, dim=-1)
        b = x.shape[0]
        t = t.to(x.dtype)[:, None]
        feats = torch.cat([x.reshape(b, -1), torch.sin(t * math.pi), torch.cos(t * math.pi), cond], dim=-1)
        return self.out(torch.tanh(self.inp(feats))).reshape(x.shape)


def build_denoiser(cfg: DenoiserConfig) -> nn.Module:
    if cfg.kind == "unet":
        return UNetDenoiser(cfg)
    if cfg.kind == "tiny":
        return TinyDenoiser(cfg)
    raise ValueError(f"unknown denoiser kind {cfg.kind!r}")
