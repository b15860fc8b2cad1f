"""Spatio-temporal motion encoder.

Two strided 3D convolutions with ReLU, then self-attention among the pixels
of each frame and self-attention among the frames at each pixel. The output
``F`` keeps one feature frame per motion frame and is used as key/value by
the denoiser's cross-attention.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
from einops import rearrange

from .attention import SpatialAttention, TemporalAttention, resize_frames


@dataclass
class STMEConfig:
    hidden_channels: int = 32
    out_channels: int = 64
    kernel_size: int = 3
    spatial_strides: tuple[int, int] = (2, 2)
    heads: int = 4
    # displacements are divided by this before the first convolution
    input_scale: float = 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spatial_strides"] = list(self.spatial_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "STMEConfig":
        d = dict(d)
        if "spatial_strides" in d:
            d["spatial_strides"] = tuple(d["spatial_strides"])
        return cls(**d)


class MotionEncoder(nn.Module):
    def __init__(self, config: STMEConfig = STMEConfig()):
        super().__init__()
        self.config = config
        k = config.kernel_size
        s1, s2 = config.spatial_strides
        self.conv1 = nn.Conv3d(2, config.hidden_channels, k, stride=(1, s1, s1), padding=k // 2)
        self.conv2 = nn.Conv3d(config.hidden_channels, config.out_channels, k, stride=(1, s2, s2), padding=k // 2)
        self.act = nn.ReLU()
        self.spatial = SpatialAttention(config.out_channels, config.heads)
        self.temporal = TemporalAttention(config.out_channels, config.heads)

    @property
    def factor(self) -> int:
        s1, s2 = self.config.spatial_strides
        return s1 * s2

    def forward(self, u: torch.Tensor, return_taps: bool = False):
        """``u`` (B, T, H, W, 2) -> F as (B, C_f, T, H_f, W_f)."""
        h, w = u.shape[2:4]
        if h % self.factor or w % self.factor:
            raise ValueError(f"motion grid {h}x{w} is not divisible by the encoder stride {self.factor}")
        x = rearrange(u, "b t h w c -> b c t h w") / self.config.input_scale
        x = self.act(self.conv1(x))
        tap = self.act(self.conv2(x))
        feats = self.temporal(self.spatial(tap))
        return (feats, [tap]) if return_taps else feats


def stme_forward(u: torch.Tensor, encoder: MotionEncoder, return_taps: bool = False):
    """Motion features F (B, T, H_f, W_f, C_f) for displacements (B, T, H, W, 2).

    An unbatched (T, H, W, 2) input gives an unbatched output. With
    ``return_taps`` the post-Conv_2 activations are returned alongside.
    """
    single = u.ndim == 4
    if single:
        u = u.unsqueeze(0)
    out = encoder(u, return_taps=return_taps)
    feats, taps = out if return_taps else (out, [])
    feats = rearrange(feats, "b c t h w -> b t h w c")
    taps = [rearrange(t, "b c t h w -> b t h w c") for t in taps]
    if single:
        feats = feats[0]
        taps = [t[0] for t in taps]
    return (feats, taps) if return_taps else feats


def resize_features_for_level(F: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Resize channels-last features (..., T, H, W, C) to a decoder level's grid."""
    single = F.ndim == 4
    x = F.unsqueeze(0) if single else F
    x = rearrange(x, "b t h w c -> b c t h w")
    out = rearrange(resize_frames(x, target_h, target_w), "b c t h w -> b t h w c")
    return out[0] if single else out
