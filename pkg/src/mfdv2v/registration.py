"""Temporal diffeomorphic registration with latent temporal multi-head attention.

Every frame ``I^t`` (t = 1..T) of a sequence is registered to the reference
``I^0``. A shared 2D U-Net encoder maps each pair (I^0, I^t) to a latent
``z^t``; attention across the T latents (one token per frame) mixes
temporal context; the decoder turns each latent back into a stationary
velocity field that is integrated by scaling and squaring.

Conventions: fields are (..., H, W, 2) with the last axis ordered (x, y) =
(column, row) in pixels. A transform ``phi`` holds absolute sampling
coordinates, so ``warp(I, phi)(p) = I(phi(p))`` and ``u = phi - id``.
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

from .checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Coordinate grids, sampling and integration


def identity_grid(h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
    return torch.stack([xs, ys], dim=-1)


def bilinear_sample(img: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``img`` (..., H, W, C) at pixel ``coords`` (..., H', W', 2).

    Coordinates are clamped to the image border. Integer coordinates return
    the stored values exactly.
    """
    *lead, h, w, c = img.shape
    if tuple(coords.shape[:-3]) != tuple(lead):
        raise ValueError(f"leading dims differ: image {tuple(lead)} vs coords {tuple(coords.shape[:-3])}")
    ho, wo = coords.shape[-3:-1]
    x = coords[..., 0].clamp(0, w - 1)
    y = coords[..., 1].clamp(0, h - 1)
    x0 = x.detach().floor().clamp(0, w - 1)
    y0 = y.detach().floor().clamp(0, h - 1)
    wx = (x - x0).unsqueeze(-1)
    wy = (y - y0).unsqueeze(-1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = img.reshape(-1, h * w, c)
    n = flat.shape[0]

    def gather(yy, xx):
        idx = (yy * w + xx).reshape(n, ho * wo, 1).expand(-1, -1, c)
        return torch.gather(flat, 1, idx).reshape(*lead, ho, wo, c)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def _require_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{what} contains non-finite values")


def warp(image: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Resample ``image`` (..., H, W, C) at the coordinates ``phi`` (..., H, W, 2)."""
    _require_finite(phi, "transform")
    if image.shape[-3:-1] != phi.shape[-3:-1]:
        raise ValueError(f"spatial size mismatch {tuple(image.shape[-3:-1])} vs {tuple(phi.shape[-3:-1])}")
    if image.shape[:-3] != phi.shape[:-3]:
        image = image.expand(*phi.shape[:-3], *image.shape[-3:])
    return bilinear_sample(image, phi)


def displacement_from_transform(phi: torch.Tensor) -> torch.Tensor:
    h, w = phi.shape[-3:-1]
    return phi - identity_grid(h, w, phi.dtype)


def transform_from_displacement(u: torch.Tensor) -> torch.Tensor:
    h, w = u.shape[-3:-1]
    return u + identity_grid(h, w, u.dtype)


def compose_displacements(u_outer: torch.Tensor, u_inner: torch.Tensor) -> torch.Tensor:
    """Displacement of ``phi_outer o phi_inner``: u_inner(p) + u_outer(p + u_inner(p))."""
    return u_inner + bilinear_sample(u_outer, transform_from_displacement(u_inner))


def integrate_velocity(v: torch.Tensor, num_squarings: int = 7) -> torch.Tensor:
    """Exponentiate a stationary velocity field by scaling and squaring.

    Returns the transform ``phi`` (absolute coordinates) for each field in
    ``v`` (..., H, W, 2).
    """
    if num_squarings < 0:
        raise ValueError("num_squarings must be >= 0")
    _require_finite(v, "velocity")
    u = v / (2**num_squarings)
    for _ in range(num_squarings):
        u = compose_displacements(u, u)
    return transform_from_displacement(u)


def jacobian_determinant(phi: torch.Tensor) -> torch.Tensor:
    """Central-difference Jacobian determinant on the interior, (..., H-2, W-2)."""
    dx = (phi[..., 1:-1, 2:, :] - phi[..., 1:-1, :-2, :]) / 2
    dy = (phi[..., 2:, 1:-1, :] - phi[..., :-2, 1:-1, :]) / 2
    return dx[..., 0] * dy[..., 1] - dx[..., 1] * dy[..., 0]


# --------------------------------------------------------------------------
# Networks


@dataclass
class RegistrationConfig:
    channels: tuple[int, ...] = (16, 32)
    heads: int = 4
    use_ltma: bool = True
    attention_scale: bool = True
    activation: str = "leaky_relu"
    lam: float = 10.0
    weight_decay: float = 1e-5
    num_squarings: int = 7
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 4
    velocity_init_std: float = 1e-5
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


def _activation(name: str) -> nn.Module:
    if name == "leaky_relu":
        return nn.LeakyReLU(0.2)
    if name == "relu":
        return nn.ReLU()
    if name == "identity":
        return nn.Identity()
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class LatentMotion:
    """Per-frame latents ``z`` (B, T, H', W', C) plus the encoder skip features."""

    z: torch.Tensor
    skips: list[torch.Tensor] = field(default_factory=list)


class RegistrationEncoder(nn.Module):
    def __init__(self, channels=(16, 32), activation: str = "leaky_relu"):
        super().__init__()
        self.channels = tuple(channels)
        self.stem = nn.Conv2d(2, channels[0], 3, padding=1)
        self.down = nn.ModuleList()
        prev = channels[0]
        for c in channels:
            self.down.append(nn.ModuleList([nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.Conv2d(c, c, 3, padding=1)]))
            prev = c
        self.act = _activation(activation)

    @property
    def factor(self) -> int:
        return 2 ** len(self.channels)

    def forward(self, pairs: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        x = self.act(self.stem(pairs))
        skips = [x]
        for conv_down, conv in self.down:
            x = self.act(conv(self.act(conv_down(x))))
            skips.append(x)
        return skips.pop(), skips


class VelocityDecoder(nn.Module):
    def __init__(self, channels=(16, 32), activation: str = "leaky_relu", init_std: float = 1e-5):
        super().__init__()
        self.channels = tuple(channels)
        skip_channels = [channels[0], *channels[:-1]]
        self.up = nn.ModuleList()
        prev = channels[-1]
        for skip_c in reversed(skip_channels):
            self.up.append(nn.Conv2d(prev + skip_c, skip_c, 3, padding=1))
            prev = skip_c
        self.skip_channels = skip_channels
        self.refine = nn.Conv2d(prev, prev, 3, padding=1)
        self.flow = nn.Conv2d(prev, 2, 3, padding=1)
        nn.init.normal_(self.flow.weight, std=init_std)
        nn.init.zeros_(self.flow.bias)
        self.act = _activation(activation)

    def forward(self, z: torch.Tensor, skips: list[torch.Tensor] | None = None) -> torch.Tensor:
        x = z
        for i, conv in enumerate(self.up):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            c_skip = self.skip_channels[-1 - i]
            if skips:
                s = skips[-1 - i]
            else:
                s = x.new_zeros(x.shape[0], c_skip, *x.shape[-2:])
            x = self.act(conv(torch.cat([x, s], dim=1)))
        return self.flow(self.act(self.refine(x)))


def ltma_attention(
    Z: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    scale: bool = True,
    return_weights: bool = False,
):
    """Multi-head attention over the time axis of ``Z`` (B, T, H', W', C).

    Each frame's latent is flattened to one token of size d = H'W'C. Per-head
    projections ``w_*`` have shape (h, d, d/h); head outputs are
    concatenated back to d.
    """
    b, t = Z.shape[:2]
    tokens = Z.reshape(b, t, -1)
    d = tokens.shape[-1]
    heads, d_in, d_head = w_q.shape
    if d_in != d or heads * d_head != d:
        raise ValueError(f"latent dimension {d} is not split evenly by {heads} heads of size {d_head}")
    q = torch.einsum("btd,hde->bhte", tokens, w_q)
    k = torch.einsum("btd,hde->bhte", tokens, w_k)
    v = torch.einsum("btd,hde->bhte", tokens, w_v)
    logits = q @ k.transpose(-1, -2)
    if scale:
        logits = logits / math.sqrt(d_head)
    weights = torch.softmax(logits, dim=-1)
    out = rearrange(weights @ v, "b h t e -> b t (h e)").reshape(Z.shape)
    return (out, weights) if return_weights else out


class LatentTemporalAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 4, scale: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"latent dimension {dim} not divisible by {heads} heads")
        d_head = dim // heads
        self.scale = scale
        self.w_q = nn.Parameter(torch.randn(heads, dim, d_head) / math.sqrt(dim))
        self.w_k = nn.Parameter(torch.randn(heads, dim, d_head) / math.sqrt(dim))
        # value projections start as the identity split across heads
        eye = torch.eye(dim).reshape(dim, heads, d_head).permute(1, 0, 2).contiguous()
        self.w_v = nn.Parameter(eye)

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        return ltma_attention(Z, self.w_q, self.w_k, self.w_v, self.scale)


class RegistrationNet(nn.Module):
    """Encoder, optional LTMA and velocity decoder for (T+1)-frame sequences."""

    def __init__(self, config: RegistrationConfig, height: int, width: int):
        super().__init__()
        self.config = config
        self.encoder = RegistrationEncoder(config.channels, config.activation)
        f = self.encoder.factor
        if height % f or width % f:
            raise ValueError(f"spatial size {height}x{width} not divisible by the downsampling factor {f}")
        self.height, self.width = height, width
        dim = (height // f) * (width // f) * config.channels[-1]
        self.ltma = LatentTemporalAttention(dim, config.heads, config.attention_scale) if config.use_ltma else None
        self.decoder = VelocityDecoder(config.channels, config.activation, config.velocity_init_std)

    def encode(self, seq: torch.Tensor) -> LatentMotion:
        """``seq`` (B, T+1, H, W, 1) -> latents for frames 1..T."""
        b, tp1, h, w, _ = seq.shape
        if (h, w) != (self.height, self.width):
            raise ValueError(f"network built for {self.height}x{self.width}, got {h}x{w}")
        ref = seq[:, :1].expand(-1, tp1 - 1, -1, -1, -1)
        pairs = torch.cat([ref, seq[:, 1:]], dim=-1)
        z, skips = self.encoder(rearrange(pairs, "b t h w c -> (b t) c h w"))
        z = rearrange(z, "(b t) c h w -> b t h w c", b=b)
        return LatentMotion(z, skips)

    def attend(self, latent: LatentMotion) -> LatentMotion:
        if self.ltma is None:
            return latent
        return LatentMotion(self.ltma(latent.z), latent.skips)

    def decode(self, latent: LatentMotion) -> torch.Tensor:
        b = latent.z.shape[0]
        z = rearrange(latent.z, "b t h w c -> (b t) c h w")
        v = self.decoder(z, latent.skips)
        return rearrange(v, "(b t) c h w -> b t h w c", b=b)

    def forward(self, seq: torch.Tensor) -> dict[str, torch.Tensor]:
        v = self.decode(self.attend(self.encode(seq)))
        phi = integrate_velocity(v, self.config.num_squarings)
        return {"v": v, "phi": phi, "u": displacement_from_transform(phi)}

    @torch.no_grad()
    def predict_displacement(self, seq: torch.Tensor, batch_size: int = 8) -> torch.Tensor:
        out = [self(seq[i : i + batch_size])["u"] for i in range(0, seq.shape[0], batch_size)]
        return torch.cat(out)


def _batched(seq: torch.Tensor) -> torch.Tensor:
    return seq.unsqueeze(0) if seq.ndim == 4 else seq


def encode_sequence(seq: torch.Tensor, net: RegistrationNet) -> LatentMotion:
    """Latent motion for an ImageSequence (T+1, H, W, 1) or a batch of them."""
    return net.encode(_batched(seq))


def decode_velocity(z_hat: LatentMotion | torch.Tensor, net: RegistrationNet) -> torch.Tensor:
    if torch.is_tensor(z_hat):
        z_hat = LatentMotion(z_hat if z_hat.ndim == 5 else z_hat.unsqueeze(0))
    return net.decode(z_hat)


# --------------------------------------------------------------------------
# Loss and training


def smoothness(v: torch.Tensor) -> torch.Tensor:
    """Mean squared forward differences of each field, summed over x and y directions."""
    dx = v[..., :, 1:, :] - v[..., :, :-1, :]
    dy = v[..., 1:, :, :] - v[..., :-1, :, :]
    return (dx**2).sum(-1).mean(dim=(-1, -2)) + (dy**2).sum(-1).mean(dim=(-1, -2))


def registration_loss(
    seq: torch.Tensor,
    v: torch.Tensor,
    phi: torch.Tensor,
    lam: float = 10.0,
    weight_decay: float = 0.0,
    params=None,
) -> torch.Tensor:
    """Sum over moving frames of lam * MSE(I^0 o phi^t, I^t) + smoothness(v^t), plus L2 on params.

    ``seq`` is (B, T+1, H, W, 1) (or unbatched); ``v`` and ``phi`` are
    (B, T, H, W, 2). Batches are averaged.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    seq, v, phi = _batched(seq), _batched(v), _batched(phi)
    b, tp1 = seq.shape[:2]
    if v.shape[:2] != (b, tp1 - 1) or phi.shape != v.shape or v.shape[2:4] != seq.shape[2:4]:
        raise ValueError(f"inconsistent shapes: seq {tuple(seq.shape)}, v {tuple(v.shape)}, phi {tuple(phi.shape)}")
    ref = seq[:, :1].expand(-1, tp1 - 1, -1, -1, -1)
    warped = warp(ref, phi)
    sim = ((warped - seq[:, 1:]) ** 2).mean(dim=(-1, -2, -3))
    per_frame = lam * sim + smoothness(v)
    loss = per_frame.sum(dim=1).mean()
    if weight_decay and params is not None:
        loss = loss + weight_decay * sum((p**2).sum() for p in params)
    return loss


def smoothed(curve, window: int = 5) -> np.ndarray:
    curve = np.asarray(curve, dtype=np.float64)
    window = max(1, min(window, len(curve)))
    return np.convolve(curve, np.ones(window) / window, mode="valid")


def train_registration(sequences, config: RegistrationConfig, out_path=None, extra_manifest: dict | None = None):
    """Fit a RegistrationNet on ``sequences`` (N, T+1, H, W, 1) in [0, 1].

    Returns ``(net, history)`` and writes a checkpoint when ``out_path`` is set.
    """
    seqs = torch.as_tensor(np.asarray(sequences), dtype=torch.float32)
    if seqs.ndim != 5 or seqs.shape[0] == 0:
        raise ValueError("need a non-empty dataset of (T+1, H, W, 1) sequences")
    torch.manual_seed(config.seed)
    net = RegistrationNet(config, seqs.shape[2], seqs.shape[3])
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = torch.randperm(seqs.shape[0], generator=gen)
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = seqs[order[start : start + config.batch_size]]
            try:
                out = net(batch)
            except ValueError as exc:
                raise FloatingPointError(f"registration forward pass failed at epoch {epoch}, batch offset {start}: {exc}") from exc
            loss = registration_loss(batch, out["v"], out["phi"], config.lam, config.weight_decay, net.parameters())
            if not torch.isfinite(loss):
                raise FloatingPointError(f"registration loss became non-finite at epoch {epoch}, batch offset {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * batch.shape[0]
        history.append(total / seqs.shape[0])
        if epoch % 25 == 0 or epoch == config.epochs - 1:
            log.info("registration epoch %d loss %.5f", epoch, history[-1])
    if out_path is not None:
        save_registration(out_path, net, history, extra_manifest)
    return net, history


def save_registration(path, net: RegistrationNet, history, extra: dict | None = None) -> Path:
    manifest = {
        "kind": "registration",
        "config": net.config.to_dict(),
        "seed": net.config.seed,
        "epoch": len(history),
        "loss_curve": [float(x) for x in history],
        "grid": [net.height, net.width],
        **(extra or {}),
    }
    return save_checkpoint(path, manifest, {"registration": net.state_dict()})


def load_registration(path) -> tuple[RegistrationNet, dict]:
    manifest, weights = load_checkpoint(path)
    if manifest.get("kind") != "registration":
        raise ValueError(f"{path} is not a registration checkpoint")
    cfg = RegistrationConfig.from_dict(manifest["config"])
    net = RegistrationNet(cfg, *manifest["grid"])
    net.load_state_dict(weights["registration"])
    net.eval()
    return net, manifest


def endpoint_error(u_pred: torch.Tensor, u_true: torch.Tensor, mask: torch.Tensor | None = None) -> float:
    err = torch.linalg.vector_norm(torch.as_tensor(u_pred) - torch.as_tensor(u_true), dim=-1)
    if mask is None:
        return float(err.mean())
    m = torch.as_tensor(mask).squeeze(-1).to(err.dtype)
    return float((err * m).sum() / m.sum().clamp(min=1))
