"""Multi-head attention shared by the motion encoder and the denoiser."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange


def attention_weights(q: torch.Tensor, k: torch.Tensor, scale: bool = True) -> torch.Tensor:
    """Row-stochastic weights softmax(q k^T [/ sqrt(d)]) over the key axis."""
    logits = q @ k.transpose(-1, -2)
    if scale:
        logits = logits / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1)


class TokenAttention(nn.Module):
    """Pre-norm multi-head attention with a residual connection.

    Self-attention when ``context`` is omitted, cross-attention otherwise
    (queries from ``x``, keys and values from ``context``). The output
    projection starts at zero when ``zero_init`` is set, making the block an
    exact identity at initialisation.
    """

    def __init__(self, dim: int, heads: int = 4, context_dim: int | None = None, zero_init: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        context_dim = context_dim or dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        if zero_init:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm(x)
        ctx = h if context is None else context
        q = rearrange(self.to_q(h), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.to_k(ctx), "b m (h d) -> b h m d", h=self.heads)
        v = rearrange(self.to_v(ctx), "b m (h d) -> b h m d", h=self.heads)
        out = F.scaled_dot_product_attention(q, k, v)
        return x + self.to_out(rearrange(out, "b h n d -> b n (h d)"))


class SpatialAttention(TokenAttention):
    """Self-attention among the pixels of each frame of a (B, C, T, H, W) video."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, t, hh, ww = x.shape
        tokens = rearrange(x, "b c t h w -> (b t) (h w) c")
        out = super().forward(tokens)
        return rearrange(out, "(b t) (h w) c -> b c t h w", b=b, t=t, h=hh)


class TemporalAttention(TokenAttention):
    """Self-attention among the frames at each pixel of a (B, C, T, H, W) video."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, t, hh, ww = x.shape
        tokens = rearrange(x, "b c t h w -> (b h w) t c")
        out = super().forward(tokens)
        return rearrange(out, "(b h w) t c -> b c t h w", b=b, h=hh, w=ww)


class FrameCrossAttention(TokenAttention):
    """Per-frame cross-attention from latent pixels onto conditioning pixels."""

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, c, t, hh, ww = x.shape
        if cond.shape[0] != b or cond.shape[2] != t:
            raise ValueError(f"conditioning frames {tuple(cond.shape[:3])} do not match latent {tuple(x.shape[:3])}")
        tokens = rearrange(x, "b c t h w -> (b t) (h w) c")
        ctx = rearrange(cond, "b c t h w -> (b t) (h w) c")
        out = super().forward(tokens, ctx)
        return rearrange(out, "(b t) (h w) c -> b c t h w", b=b, t=t, h=hh)


def resize_frames(x: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Resize each frame of a (B, C, T, H, W) tensor.

    Integer-factor shrinking uses area averaging, anything else bilinear
    interpolation. A no-op when the size already matches.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError("target size must be at least 1x1")
    b, c, t, hh, ww = x.shape
    if (hh, ww) == (target_h, target_w):
        return x
    frames = rearrange(x, "b c t h w -> (b t) c h w")
    if target_h <= hh and target_w <= ww and hh % target_h == 0 and ww % target_w == 0:
        out = F.avg_pool2d(frames, kernel_size=(hh // target_h, ww // target_w))
    elif target_h <= hh and target_w <= ww:
        out = F.adaptive_avg_pool2d(frames, (target_h, target_w))
    else:
        out = F.interpolate(frames, size=(target_h, target_w), mode="bilinear", align_corners=False)
    return rearrange(out, "(b t) c h w -> b c t h w", b=b, t=t)
