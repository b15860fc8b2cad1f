"""Motion-conditioned 3D U-Net noise predictor, its training loop and the sampler.

The denoiser factorises over (time, height, width): 3D convolutions, with
spatial then temporal self-attention at the configured levels. When
conditioning is on, every decoder level also cross-attends to motion
features resized to that level's grid.

Conditioning modes:

* ``"stme"``: features come from the spatio-temporal motion encoder.
* ``"raw"``: the displacement field itself, resized, is the condition.
* ``"none"``: unconditional; cross-attention blocks are not built.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .attention import FrameCrossAttention, SpatialAttention, TemporalAttention, resize_frames
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import NoiseSchedule, ddpm_reverse_step, epsilon_loss, forward_marginal_sample
from .stme import MotionEncoder, STMEConfig

log = logging.getLogger(__name__)

COND_MODES = ("stme", "raw", "none")


def timestep_embedding(t, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding ``[sin(t f_0..f_{n-1}), cos(t f_0..f_{n-1})]``, f_i = base^(-i/n), n = dim/2."""
    if dim % 2:
        raise ValueError(f"embedding dimension must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64)
    if (t < 0).any():
        raise ValueError("timesteps must be non-negative")
    half = dim // 2
    freqs = base ** (-torch.arange(half, dtype=torch.float64) / half)
    args = t.reshape(-1, 1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb[0] if t.ndim == 0 else emb


@dataclass
class DenoiserConfig:
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 4)
    # level indices (0 = finest) that get spatial + temporal self-attention
    attention_levels: tuple[int, ...] = (1, 2)
    heads: int = 4
    temb_dim: int = 64
    cond_mode: str = "stme"
    cond_channels: int = 64
    kernel_size: int = 3
    groups: int = 8

    def __post_init__(self):
        if len(self.channel_mult) < 2:
            raise ValueError("denoiser needs at least two levels")
        if self.temb_dim % 2:
            raise ValueError("timestep embedding dimension must be even")
        if self.cond_mode not in COND_MODES:
            raise ValueError(f"cond_mode must be one of {COND_MODES}")

    @property
    def conditioned(self) -> bool:
        return self.cond_mode != "none"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        for k in ("channel_mult", "attention_levels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _norm(ch: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, ch), ch)


class ResBlock3D(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int, k: int = 3, groups: int = 8):
        super().__init__()
        self.norm1 = _norm(c_in, groups)
        self.conv1 = nn.Conv3d(c_in, c_out, k, padding=k // 2)
        self.temb = nn.Linear(temb_dim, c_out)
        self.norm2 = _norm(c_out, groups)
        self.conv2 = nn.Conv3d(c_out, c_out, k, padding=k // 2)
        self.skip = nn.Conv3d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class DenoiserLevel(nn.Module):
    def __init__(self, c_in, c_out, cfg: DenoiserConfig, attend: bool, cross: bool):
        super().__init__()
        self.res = ResBlock3D(c_in, c_out, cfg.temb_dim * 4, cfg.kernel_size, cfg.groups)
        self.spatial = SpatialAttention(c_out, cfg.heads) if attend else None
        self.temporal = TemporalAttention(c_out, cfg.heads) if attend else None
        self.cross = FrameCrossAttention(c_out, cfg.heads, context_dim=cfg.cond_channels, zero_init=True) if cross else None

    def forward(self, x, temb, cond=None):
        x = self.res(x, temb)
        if self.spatial is not None:
            x = self.temporal(self.spatial(x))
        if self.cross is not None:
            if cond is None:
                raise ValueError("conditioning enabled but no motion features given")
            x = self.cross(x, resize_frames(cond, *x.shape[-2:]))
        return x


class VideoDenoiser(nn.Module):
    """eps_theta(x_t, t, F) on (B, C, T, H, W) tensors."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * m for m in cfg.channel_mult]
        n = len(chans)
        self.temb = nn.Sequential(nn.Linear(cfg.temb_dim, cfg.temb_dim * 4), nn.SiLU(), nn.Linear(cfg.temb_dim * 4, cfg.temb_dim * 4))
        k = cfg.kernel_size
        self.conv_in = nn.Conv3d(1, cfg.base_channels, k, padding=k // 2)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = cfg.base_channels
        for i, c in enumerate(chans):
            self.down.append(DenoiserLevel(prev, c, cfg, i in cfg.attention_levels, cross=False))
            if i < n - 1:
                self.downsample.append(nn.Conv3d(c, c, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)))
            prev = c
        self.mid = DenoiserLevel(prev, prev, cfg, attend=True, cross=False)
        self.up = nn.ModuleList()
        self.upconv = nn.ModuleList()
        for i in reversed(range(n)):
            c = chans[i]
            self.up.append(DenoiserLevel(prev + c, c, cfg, i in cfg.attention_levels, cross=cfg.conditioned))
            if i > 0:
                self.upconv.append(nn.Conv3d(c, c, (1, 3, 3), padding=(0, 1, 1)))
            prev = c
        self.norm_out = _norm(prev, cfg.groups)
        self.conv_out = nn.Conv3d(prev, 1, k, padding=k // 2)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @property
    def factor(self) -> int:
        return 2 ** (len(self.cfg.channel_mult) - 1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        h_, w_ = x.shape[-2:]
        if h_ % self.factor or w_ % self.factor:
            raise ValueError(f"spatial size {h_}x{w_} not divisible by {self.factor}")
        if self.cfg.conditioned and cond is None:
            raise ValueError("conditioning enabled but no motion features given")
        temb = self.temb(timestep_embedding(t, self.cfg.temb_dim).to(x.dtype).reshape(x.shape[0], -1))
        h = self.conv_in(x)
        skips = []
        for i, level in enumerate(self.down):
            h = level(h, temb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, temb)
        for j, level in enumerate(self.up):
            h = level(torch.cat([h, skips.pop()], dim=1), temb, cond)
            if j < len(self.upconv):
                h = F.interpolate(h, scale_factor=(1, 2, 2), mode="nearest")
                h = self.upconv[j](h)
        return self.conv_out(F.silu(self.norm_out(h)))


def denoise(x_t: torch.Tensor, t, F_cond: torch.Tensor | None, net: VideoDenoiser) -> torch.Tensor:
    """Predicted noise for channels-last videos (B, T, H, W, 1) or (T, H, W, 1).

    ``F_cond`` is channels-last (B, T, h, w, C) motion features, or None.
    """
    single = x_t.ndim == 4
    x = x_t.unsqueeze(0) if single else x_t
    b = x.shape[0]
    t = torch.as_tensor(t).reshape(-1).expand(b) if torch.as_tensor(t).numel() == 1 else torch.as_tensor(t)
    cond = None
    if F_cond is not None:
        c = F_cond.unsqueeze(0) if F_cond.ndim == 4 else F_cond
        cond = rearrange(c, "b t h w c -> b c t h w")
    out = net(rearrange(x, "b t h w c -> b c t h w"), t, cond)
    out = rearrange(out, "b c t h w -> b t h w c")
    return out[0] if single else out


def cross_attention_condition(latent: torch.Tensor, F_level: torch.Tensor, block: FrameCrossAttention) -> torch.Tensor:
    """Residual per-frame cross-attention; channels-last (B, T, H, W, C) tensors."""
    x = rearrange(latent, "b t h w c -> b c t h w")
    cond = rearrange(F_level, "b t h w c -> b c t h w")
    return rearrange(block(x, cond), "b c t h w -> b t h w c")


# --------------------------------------------------------------------------
# Motion-conditioned model: STME (or raw motion) feeding the denoiser


@dataclass
class DiffusionConfig:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    stme: STMEConfig = field(default_factory=STMEConfig)
    lr: float = 1e-5
    batch_size: int = 20
    steps: int = 25_000
    seed: int = 0
    variance: str = "beta"
    log_every: int = 100

    def to_dict(self) -> dict:
        return {
            "denoiser": self.denoiser.to_dict(),
            "stme": self.stme.to_dict(),
            **{k: getattr(self, k) for k in ("lr", "batch_size", "steps", "seed", "variance", "log_every")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        d = dict(d)
        den = DenoiserConfig.from_dict(d.pop("denoiser", {}))
        stme = STMEConfig.from_dict(d.pop("stme", {}))
        return cls(denoiser=den, stme=stme, **d)


class MotionGuidedDiffusion(nn.Module):
    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        den_cfg = cfg.denoiser
        if den_cfg.cond_mode == "stme" and den_cfg.cond_channels != cfg.stme.out_channels:
            den_cfg = DenoiserConfig.from_dict({**den_cfg.to_dict(), "cond_channels": cfg.stme.out_channels})
        if den_cfg.cond_mode == "raw" and den_cfg.cond_channels != 2:
            den_cfg = DenoiserConfig.from_dict({**den_cfg.to_dict(), "cond_channels": 2})
        cfg = DiffusionConfig.from_dict({**cfg.to_dict(), "denoiser": den_cfg.to_dict()})
        self.cfg = cfg
        self.stme = MotionEncoder(cfg.stme) if den_cfg.cond_mode == "stme" else None
        self.denoiser = VideoDenoiser(den_cfg)
        # schedule the weights were trained with, set by training or loading
        self.schedule: NoiseSchedule | None = None

    @property
    def cond_mode(self) -> str:
        return self.cfg.denoiser.cond_mode

    def motion_features(self, motion: torch.Tensor | None) -> torch.Tensor | None:
        """Channels-last conditioning features (B, T, h, w, C) for motion (B, T, H, W, 2)."""
        if self.cond_mode == "none":
            return None
        if motion is None:
            raise ValueError("this model is motion-conditioned; a displacement sequence is required")
        if self.cond_mode == "raw":
            return motion / self.cfg.stme.input_scale
        return rearrange(self.stme(motion), "b c t h w -> b t h w c")

    def forward(self, x_t, t, motion=None, features=None):
        if features is None:
            features = self.motion_features(motion)
        return denoise(x_t, t, features, self.denoiser)


def _item_generators(seed: int, n: int, first: int = 0) -> list[torch.Generator]:
    seeds = [np.random.SeedSequence([seed, first + i]) for i in range(n)]
    return [torch.Generator().manual_seed(int(s.generate_state(1, dtype=np.uint64)[0] >> 1)) for s in seeds]


def _randn_items(gens, shape) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=g) for g in gens])


def smoothed_curve(curve, window: int = 100) -> np.ndarray:
    curve = np.asarray(curve, dtype=np.float64)
    window = max(1, min(window, len(curve)))
    return np.convolve(curve, np.ones(window) / window, mode="valid")


def train_diffusion(videos, motions, sched: NoiseSchedule, cfg: DiffusionConfig, out_path=None, extra_manifest=None):
    """Jointly train the motion encoder and denoiser with the epsilon objective.

    ``videos`` (N, T, H, W, 1) in [-1, 1]; ``motions`` (N, T, H, W, 2) or
    None for an unconditional model. Returns ``(model, loss_per_step)``.
    """
    x_all = torch.as_tensor(np.asarray(videos), dtype=torch.float32)
    if x_all.ndim != 5 or x_all.shape[0] == 0:
        raise ValueError("need a non-empty (N, T, H, W, 1) video set")
    m_all = None if motions is None else torch.as_tensor(np.asarray(motions), dtype=torch.float32)
    if m_all is not None and m_all.shape[:4] != x_all.shape[:4]:
        raise ValueError(f"motion shape {tuple(m_all.shape)} does not match videos {tuple(x_all.shape)}")
    torch.manual_seed(cfg.seed)
    model = MotionGuidedDiffusion(cfg)
    if model.cond_mode != "none" and m_all is None:
        raise ValueError("conditioned model needs training motions")
    model.schedule = sched
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    n = x_all.shape[0]
    history = []
    for step in range(cfg.steps):
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=gen)
        x0 = x_all[idx]
        t = torch.randint(1, sched.total_steps + 1, (len(idx),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = forward_marginal_sample(x0, t, eps, sched)
        motion = None if model.cond_mode == "none" else m_all[idx]
        loss = epsilon_loss(eps, model(x_t, t, motion))
        if not torch.isfinite(loss):
            raise FloatingPointError(f"diffusion loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.info("diffusion step %d loss %.4f", step, history[-1])
    if out_path is not None:
        save_diffusion(out_path, model, sched, history, x_all.shape[1:4], extra_manifest)
    return model, history


def save_diffusion(path, model: MotionGuidedDiffusion, sched: NoiseSchedule, history, video_shape, extra=None) -> Path:
    manifest = {
        "kind": "diffusion",
        "config": model.cfg.to_dict(),
        "seed": model.cfg.seed,
        "epoch": len(history),
        "loss_curve": [float(x) for x in history],
        "schedule": sched.to_json(),
        "video_shape": [int(s) for s in video_shape],
        **(extra or {}),
    }
    weights = {"denoiser": model.denoiser.state_dict()}
    if model.stme is not None:
        weights["stme"] = model.stme.state_dict()
    return save_checkpoint(path, manifest, weights)


def load_diffusion(path) -> tuple[MotionGuidedDiffusion, NoiseSchedule, dict]:
    manifest, weights = load_checkpoint(path)
    if manifest.get("kind") != "diffusion":
        raise ValueError(f"{path} is not a diffusion checkpoint")
    model = MotionGuidedDiffusion(DiffusionConfig.from_dict(manifest["config"]))
    model.denoiser.load_state_dict(weights["denoiser"])
    if model.stme is not None:
        model.stme.load_state_dict(weights["stme"])
    model.eval()
    model.schedule = NoiseSchedule.from_json(manifest["schedule"])
    return model, model.schedule, manifest


@torch.no_grad()
def sample(
    model: MotionGuidedDiffusion,
    sched: NoiseSchedule,
    motion: torch.Tensor | None = None,
    seed: int = 0,
    n: int | None = None,
    shape: tuple[int, int, int] | None = None,
    features: torch.Tensor | None = None,
    variance: str | None = None,
    first_item: int = 0,
) -> torch.Tensor:
    """Ancestral DDPM sampling of (N, T, H, W, 1) videos, clipped to [-1, 1].

    Item ``i`` draws all its noise from a generator derived from
    ``(seed, first_item + i)``, so a sample does not depend on what it is
    batched with.
    """
    model.eval()
    if model.schedule is not None and model.schedule.to_json() != sched.to_json():
        raise ValueError("sampling schedule differs from the one the model was trained with")
    if features is None and motion is not None:
        motion = torch.as_tensor(motion, dtype=torch.float32)
        if motion.ndim == 4:
            motion = motion.unsqueeze(0)
        features = model.motion_features(motion)
    if model.cond_mode != "none" and features is None:
        raise ValueError("this model is motion-conditioned; pass a motion sequence")
    if features is not None:
        n = features.shape[0] if n is None else n
        if features.shape[0] != n:
            raise ValueError("number of motion sequences does not match the requested sample count")
        if shape is None:
            if motion is None:
                raise ValueError("pass shape= when sampling from precomputed features")
            shape = tuple(motion.shape[1:4])
        if features.shape[1] != shape[0]:
            raise ValueError(f"motion has {features.shape[1]} frames but samples need {shape[0]}")
    if shape is None or n is None:
        raise ValueError("unconditional sampling needs n and shape")
    if motion is not None and tuple(motion.shape[1:4]) != tuple(shape):
        raise ValueError(f"motion grid {tuple(motion.shape[1:4])} does not match sample shape {tuple(shape)}")
    variance = variance or model.cfg.variance
    full = (*shape, 1)
    gens = _item_generators(seed, n, first_item)
    x = _randn_items(gens, full)
    for t in range(sched.total_steps, 0, -1):
        eps_hat = model(x, torch.full((n,), t), features=features)
        z = _randn_items(gens, full) if t > 1 else torch.zeros_like(x)
        x = ddpm_reverse_step(x, t, eps_hat, sched, z, variance)
    return x.clamp(-1, 1)
