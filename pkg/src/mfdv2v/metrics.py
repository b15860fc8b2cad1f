"""Distribution distances between generated and reference video sets.

FID, KID, FID-VID and FVD computed on features from small fixed-seed,
untrained convolutional networks. These are stand-ins for pretrained
backbones: distances are comparable between runs that share an extractor,
not with published numbers. Any callable returning a :class:`FeatureSet`
can be swapped in.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .tensorio import read_tensor, write_tensor

PSD_TOL = 1e-8
CLAMP_TOL = 1e-6


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray
    extractor_id: str

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise ValueError("features must be an (n, d) matrix")
        if not np.all(np.isfinite(f)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", f)

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray


def _check_same_extractor(a: FeatureSet, b: FeatureSet):
    if a.extractor_id != b.extractor_id:
        raise ValueError(f"cannot compare features from {a.extractor_id!r} and {b.extractor_id!r}")
    if a.features.shape[1] != b.features.shape[1]:
        raise ValueError("feature dimensions differ")


# --------------------------------------------------------------------------
# Feature extractors


def _random_init(net: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d)):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                m.bias.copy_(torch.randn(m.bias.shape, generator=gen) * 0.1)
    net.requires_grad_(False)
    return net.eval().double()


class RandomConvExtractor:
    """Fixed random conv stack with global average pooling.

    ``kind="frame"`` works on single frames (2D convolutions), ``"video"`` on
    whole clips (3D convolutions). Output dimension ``dim`` for any input size.
    """

    def __init__(self, kind: str = "frame", dim: int = 64, seed: int = 0, width: int = 16):
        if kind not in ("frame", "video"):
            raise ValueError("kind must be 'frame' or 'video'")
        self.kind, self.dim, self.seed = kind, dim, seed
        conv = nn.Conv2d if kind == "frame" else nn.Conv3d
        stride = 2 if kind == "frame" else (1, 2, 2)
        self.net = _random_init(
            nn.Sequential(
                conv(1, width, 3, padding=1),
                nn.ReLU(),
                conv(width, 2 * width, 3, stride=stride, padding=1),
                nn.ReLU(),
                conv(2 * width, dim, 3, stride=stride, padding=1),
                nn.ReLU(),
            ),
            seed,
        )

    @property
    def extractor_id(self) -> str:
        return f"randconv-{self.kind}-d{self.dim}-s{self.seed}"

    @torch.no_grad()
    def __call__(self, items, batch_size: int = 64) -> FeatureSet:
        x = _as_unit_array(items)
        if self.kind == "frame":
            frames = x.reshape(-1, *x.shape[-3:-1])  # any leading layout -> (N, H, W)
            inp = torch.from_numpy(frames)[:, None]
        else:
            if x.ndim != 5:
                raise ValueError("video features need (N, T, H, W, 1) clips")
            inp = torch.from_numpy(x[..., 0])[:, None]
        feats = [self.net(inp[i : i + batch_size]).flatten(2).mean(-1) for i in range(0, inp.shape[0], batch_size)]
        return FeatureSet(torch.cat(feats).numpy(), self.extractor_id)


def _as_unit_array(items) -> np.ndarray:
    x = np.asarray(items, dtype=np.float64)
    if x.ndim < 3:
        raise ValueError("need at least (N, H, W) input")
    if x.shape[-1] != 1:
        x = x[..., None]
    if not np.all(np.isfinite(x)) or x.min() < -CLAMP_TOL or x.max() > 1 + CLAMP_TOL:
        raise ValueError("metric inputs must be finite and normalised to [0, 1]")
    return np.ascontiguousarray(x)


def extract_features(items, extractor: RandomConvExtractor) -> FeatureSet:
    return extractor(items)


def per_video_features(videos, extractor: RandomConvExtractor) -> FeatureSet:
    """Mean frame feature of each video, (N, d)."""
    x = _as_unit_array(videos)
    if x.ndim != 5:
        raise ValueError("need (N, T, H, W, 1) videos")
    fs = extractor(x)
    feats = fs.features.reshape(x.shape[0], x.shape[1], -1).mean(1)
    return FeatureSet(feats, fs.extractor_id + "-vidmean")


def cached_features(items, extractor, cache_dir, fn=extract_features) -> FeatureSet:
    """``fn(items, extractor)`` memoised on disk by (content hash, extractor id)."""
    x = np.ascontiguousarray(np.asarray(items, dtype=np.float64))
    digest = hashlib.sha256(repr(x.shape).encode() + x.tobytes()).hexdigest()[:16]
    tag = getattr(fn, "__name__", "features")
    fs_id = extractor.extractor_id + ("-vidmean" if fn is per_video_features else "")
    path = Path(cache_dir) / f"{digest}-{fs_id}-{tag}.mvt"
    if path.exists():
        return FeatureSet(read_tensor(path), fs_id)
    fs = fn(x, extractor)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(path, fs.features)
    return fs


# --------------------------------------------------------------------------
# Statistics and distances


def gaussian_stats(fs: FeatureSet) -> GaussianStats:
    if fs.n < 2:
        raise ValueError("need at least two feature vectors for a covariance")
    return GaussianStats(fs.features.mean(0), np.cov(fs.features, rowvar=False, ddof=1).reshape(fs.features.shape[1], -1))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    if w.min() < -PSD_TOL * max(1.0, np.abs(w).max()):
        raise ValueError(f"matrix is not positive semi-definite (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _ordered(a, b, key):
    # evaluate in a canonical order so swapping the arguments is bit-for-bit symmetric
    return (a, b) if key(a) <= key(b) else (b, a)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))."""
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError("dimension mismatch")
    a, b = _ordered(a, b, lambda s: s.mu.tobytes() + s.sigma.tobytes())
    s1 = _psd_sqrt(a.sigma)
    _psd_sqrt(b.sigma)  # validates the second argument
    # Tr (S1 S2)^(1/2) = Tr (S1^(1/2) S2 S1^(1/2))^(1/2), the latter symmetric PSD
    cross = np.trace(_psd_sqrt(s1 @ b.sigma @ s1))
    d = float(np.sum((a.mu - b.mu) ** 2) + np.trace(a.sigma) + np.trace(b.sigma) - 2 * cross)
    if d < -CLAMP_TOL:
        raise ArithmeticError(f"Frechet distance {d} is negative beyond tolerance")
    return max(d, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    return (x @ y.T / d + 1.0) ** 3


def kid(a: FeatureSet, b: FeatureSet) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel."""
    _check_same_extractor(a, b)
    if a.n < 2 or b.n < 2:
        raise ValueError("KID needs at least two items per set")
    a, b = _ordered(a, b, lambda s: s.features.tobytes())
    x, y = a.features, b.features
    m, n = len(x), len(y)
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2 * kxy.mean())


def fd_features(a: FeatureSet, b: FeatureSet) -> float:
    _check_same_extractor(a, b)
    return frechet_distance(gaussian_stats(a), gaussian_stats(b))


# --------------------------------------------------------------------------
# Set-level metrics on videos in [0, 1]


def _check_sets(a, b):
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two videos per set")


def fid(frames_a, frames_b, extractor: RandomConvExtractor | None = None) -> float:
    """Frechet distance on pooled frame features; accepts frames or videos."""
    _check_sets(frames_a, frames_b)
    ext = extractor or RandomConvExtractor("frame")
    return fd_features(ext(frames_a), ext(frames_b))


def kid_frames(frames_a, frames_b, extractor: RandomConvExtractor | None = None) -> float:
    _check_sets(frames_a, frames_b)
    ext = extractor or RandomConvExtractor("frame")
    return kid(ext(frames_a), ext(frames_b))


def fid_vid(videos_a, videos_b, extractor: RandomConvExtractor | None = None) -> float:
    _check_sets(videos_a, videos_b)
    ext = extractor or RandomConvExtractor("frame")
    return fd_features(per_video_features(videos_a, ext), per_video_features(videos_b, ext))


def fvd(videos_a, videos_b, extractor: RandomConvExtractor | None = None) -> float:
    _check_sets(videos_a, videos_b)
    ext = extractor or RandomConvExtractor("video")
    return fd_features(ext(videos_a), ext(videos_b))


METRICS = ("FID", "KID", "FVD", "FID-VID")


def round_sig(x: float, digits: int = 4) -> float:
    if x == 0 or not math.isfinite(x):
        return float(x)
    return float(f"{x:.{digits - 1}e}")


def metric_report(videos_a, videos_b, seed: int = 0) -> dict:
    """All four metrics for two (N, T, H, W, 1) sets in [0, 1], 4 significant figures."""
    frame_ext = RandomConvExtractor("frame", seed=seed)
    video_ext = RandomConvExtractor("video", seed=seed)
    return {
        "FID": round_sig(fid(videos_a, videos_b, frame_ext)),
        "KID": round_sig(kid_frames(videos_a, videos_b, frame_ext)),
        "FVD": round_sig(fvd(videos_a, videos_b, video_ext)),
        "FID-VID": round_sig(fid_vid(videos_a, videos_b, frame_ext)),
    }


def format_table(rows: dict[str, dict]) -> str:
    """Plain-text table, one row per variant; the best value per column is starred."""
    names = list(rows)
    best = {}
    for m in METRICS:
        vals = [rows[n][m] for n in names if m in rows[n]]
        if vals:
            # KID may dip below zero; smaller magnitude is better for all four
            best[m] = min(vals, key=abs)
    width = max([len("variant")] + [len(n) for n in names])
    lines = ["variant".ljust(width) + "".join(f"{m:>14}" for m in METRICS)]
    for n in names:
        cells = []
        for m in METRICS:
            v = rows[n].get(m)
            cell = "-" if v is None else f"{v:.4g}" + ("*" if v == best.get(m) else "")
            cells.append(f"{cell:>14}")
        lines.append(n.ljust(width) + "".join(cells))
    return "\n".join(lines)
