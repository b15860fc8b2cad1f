"""Synthetic beating left-ventricle phantom with known motion.

Each sample is an annulus (myocardium) around a bright blood pool that
contracts radially over the cardiac cycle. The same analytic motion is
rendered twice: a high-contrast, low-noise ``cine_like`` sequence and a
low-contrast, noisy ``dense_like`` magnitude sequence.

Displacements follow the sampling convention used by ``warp``: frame
``t`` is frame 0 resampled at ``p + u_t(p)``. The radial map is
``u_t(p) = a * phase_t * (p - c)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .tensorio import read_tensor, write_tensor

log = logging.getLogger(__name__)

DATASET_FORMAT = "mfdv2v-dataset/1"
SAMPLE_FILES = {"cine": "cine.mvt", "dense": "dense.mvt", "disp": "disp.mvt", "mask": "mask.mvt"}


@dataclass(frozen=True)
class PhantomParams:
    height: int = 32
    width: int = 32
    frames: int = 8
    # None centres the annulus on the grid
    center: tuple[float, float] | None = None
    r_inner: float = 5.0
    r_outer: float = 9.0
    amplitude: float = 0.2
    peak_fraction: float = 0.5
    phase: tuple[float, ...] | None = None
    cine_levels: tuple[float, float, float] = (0.35, 0.9, 0.05)  # myocardium, blood pool, background
    dense_levels: tuple[float, float, float] = (0.45, 0.2, 0.1)
    noise: float = 0.08
    cine_noise: float = 0.01
    edge_width: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.height < 4 or self.width < 4 or self.frames < 2:
            raise ValueError("phantom needs at least a 4x4 grid and 2 frames")
        if not 0 < self.r_inner < self.r_outer < min(self.height, self.width) / 2:
            raise ValueError(
                f"invalid geometry: need 0 < r_inner ({self.r_inner}) < r_outer ({self.r_outer}) "
                f"< min(H, W)/2 ({min(self.height, self.width) / 2})"
            )
        if not 0 <= self.amplitude <= 0.5:
            raise ValueError(f"amplitude {self.amplitude} outside [0, 0.5]")
        cx, cy = self.centre
        if not (0 <= cx <= self.width - 1 and 0 <= cy <= self.height - 1):
            raise ValueError("annulus centre must lie inside the grid")
        if self.phase is not None and len(self.phase) != self.frames:
            raise ValueError("explicit phase profile needs one value per frame")
        if not 0 < self.peak_fraction <= 1:
            raise ValueError("peak_fraction must lie in (0, 1]")
        for lv in (*self.cine_levels, *self.dense_levels):
            if not 0 <= lv <= 1:
                raise ValueError("contrast levels must lie in [0, 1]")
        if self.noise < 0 or self.cine_noise < 0 or self.edge_width <= 0:
            raise ValueError("noise levels must be >= 0 and edge_width > 0")

    @property
    def centre(self) -> tuple[float, float]:
        if self.center is None:
            return ((self.width - 1) / 2, (self.height - 1) / 2)
        return tuple(self.center)

    def phase_profile(self) -> np.ndarray:
        """Contraction phase per frame: 0 at end-diastole, 1 at peak systole."""
        if self.phase is not None:
            return np.asarray(self.phase, dtype=np.float64)
        T = self.frames - 1
        peak = max(1, int(round(self.peak_fraction * T)))
        tau = np.arange(self.frames, dtype=np.float64)
        rise = 0.5 * (1 - np.cos(np.pi * tau / peak))
        if peak < T:
            fall = 0.5 * (1 + np.cos(np.pi * (tau - peak) / (T - peak)))
        else:
            fall = np.ones_like(tau)
        return np.where(tau <= peak, rise, fall)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom parameters: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class PairedSample:
    cine_like: np.ndarray  # (T+1, H, W, 1)
    dense_like: np.ndarray  # (T+1, H, W, 1)
    gt_displacement: np.ndarray  # (T, H, W, 2), (x, y) in pixels
    masks: np.ndarray  # (T+1, H, W, 1) myocardium
    params: PhantomParams = field(default=None)


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return xs, ys


def _smooth_inside(radius: float, r: np.ndarray, width: float) -> np.ndarray:
    return 0.5 * (1 + np.tanh((radius - r) / (2 * width)))


def radial_displacement(params: PhantomParams) -> np.ndarray:
    """Analytic displacement for frames 1..T, shape (T, H, W, 2)."""
    xs, ys = _grid(params.height, params.width)
    cx, cy = params.centre
    scale = params.amplitude * params.phase_profile()[1:]
    dx = scale[:, None, None] * (xs - cx)[None]
    dy = scale[:, None, None] * (ys - cy)[None]
    return np.stack([dx, dy], axis=-1)


def _render(params: PhantomParams, levels) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = _grid(params.height, params.width)
    cx, cy = params.centre
    r = np.hypot(xs - cx, ys - cy)
    myo, blood, bg = levels
    frames, masks = [], []
    for ph in params.phase_profile():
        # radius of the reference-frame point this pixel samples
        r0 = (1 + params.amplitude * ph) * r
        inside_outer = _smooth_inside(params.r_outer, r0, params.edge_width)
        inside_inner = _smooth_inside(params.r_inner, r0, params.edge_width)
        frames.append(bg + (myo - bg) * inside_outer + (blood - myo) * inside_inner)
        masks.append((r0 >= params.r_inner) & (r0 < params.r_outer))
    return np.stack(frames)[..., None], np.stack(masks)[..., None]


def generate_sample(params: PhantomParams) -> PairedSample:
    rng = np.random.default_rng(params.seed)
    cine, masks = _render(params, params.cine_levels)
    dense, _ = _render(params, params.dense_levels)
    if params.cine_noise > 0:
        cine = cine + params.cine_noise * rng.standard_normal(cine.shape)
    if params.noise > 0:
        dense = dense + params.noise * rng.standard_normal(dense.shape)
    return PairedSample(
        cine_like=np.clip(cine, 0, 1).astype(np.float32),
        dense_like=np.clip(dense, 0, 1).astype(np.float32),
        gt_displacement=radial_displacement(params).astype(np.float32),
        masks=masks.astype(np.float32),
        params=params,
    )


def _draw_params(base: PhantomParams, ranges: dict, global_seed: int, index: int) -> PhantomParams:
    rng = np.random.default_rng(np.random.SeedSequence([global_seed, index]))
    overrides = {}
    cx, cy = base.centre
    offset = [0.0, 0.0]
    for name in sorted(ranges):
        spec = ranges[name]
        value = rng.uniform(spec[0], spec[1]) if isinstance(spec, (list, tuple)) else spec
        if name == "center_dx":
            offset[0] = float(value)
        elif name == "center_dy":
            offset[1] = float(value)
        else:
            overrides[name] = float(value)
    if offset != [0.0, 0.0]:
        overrides["center"] = (cx + offset[0], cy + offset[1])
    overrides["seed"] = int(rng.integers(0, 2**31 - 1))
    return replace(base, **overrides)


def _write_sample(args) -> dict:
    params, sample_dir = args
    sample = generate_sample(params)
    sample_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(sample_dir / SAMPLE_FILES["cine"], sample.cine_like)
    write_tensor(sample_dir / SAMPLE_FILES["dense"], sample.dense_like)
    write_tensor(sample_dir / SAMPLE_FILES["disp"], sample.gt_displacement)
    write_tensor(sample_dir / SAMPLE_FILES["mask"], sample.masks)
    hashes = {k: hashlib.sha256((sample_dir / f).read_bytes()).hexdigest() for k, f in SAMPLE_FILES.items()}
    return {"path": sample_dir.name, "files": dict(SAMPLE_FILES), "sha256": hashes, "params": params.to_dict()}


def num_workers() -> int:
    return max(1, int(os.environ.get("MFD_NUM_WORKERS", "1")))


def build_dataset(
    n_samples: int,
    params_ranges: dict,
    out_dir,
    seed: int = 0,
    base: PhantomParams | None = None,
    workers: int | None = None,
) -> dict:
    """Write ``n_samples`` phantoms under ``out_dir`` and return the manifest.

    ``params_ranges`` maps a PhantomParams field (or ``center_dx`` /
    ``center_dy``) to a ``[lo, hi]`` uniform range or a fixed value.
    Sample ``i`` draws from a generator keyed on ``(seed, i)``, so the
    output does not depend on the worker count.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    base = base or PhantomParams()
    for name, spec in params_ranges.items():
        if isinstance(spec, (list, tuple)) and not (len(spec) == 2 and spec[0] <= spec[1]):
            raise ValueError(f"range for {name} must be [lo, hi] with lo <= hi")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"dataset directory {out} is not writable")

    jobs = [(_draw_params(base, params_ranges, seed, i), out / f"sample_{i:03d}") for i in range(n_samples)]
    workers = workers or num_workers()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_write_sample, jobs))
    else:
        entries = [_write_sample(j) for j in jobs]

    manifest = {
        "format": DATASET_FORMAT,
        "global_seed": seed,
        "n_samples": n_samples,
        "base_params": base.to_dict(),
        "param_ranges": {k: list(v) if isinstance(v, tuple) else v for k, v in params_ranges.items()},
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    log.info("wrote %d phantoms to %s", n_samples, out)
    return manifest


def load_sample(dataset_dir, entry: dict) -> PairedSample:
    d = Path(dataset_dir) / entry["path"]
    files = entry.get("files", SAMPLE_FILES)
    return PairedSample(
        cine_like=read_tensor(d / files["cine"]),
        dense_like=read_tensor(d / files["dense"]),
        gt_displacement=read_tensor(d / files["disp"]),
        masks=read_tensor(d / files["mask"]),
        params=PhantomParams.from_dict(entry["params"]),
    )


def load_dataset(dataset_dir) -> list[PairedSample]:
    manifest_path = Path(dataset_dir) / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    return [load_sample(dataset_dir, e) for e in manifest["samples"]]


def window(frames: np.ndarray, length: int | None, offset: int = 0) -> np.ndarray:
    """Select ``length`` consecutive frames starting at ``offset``."""
    if length is None:
        return frames[offset:]
    if offset < 0 or offset + length > frames.shape[0]:
        raise ValueError(f"window [{offset}, {offset + length}) exceeds {frames.shape[0]} frames")
    return frames[offset : offset + length]


def snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    noise_var = float(np.var(noisy - clean))
    return float(np.var(clean)) / noise_var if noise_var > 0 else float("inf")
