"""Noise schedules, the closed-form forward marginal and the DDPM reverse step.

Timesteps are 1-based: ``t = 0`` is clean data and ``t = T`` is the most
noised state. Schedule tables are stored 0-indexed, so the coefficients for
step ``t`` live at index ``t - 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
import torch

ScheduleKind = Literal["linear", "sigmoid_beta"]

SIGMOID_DEFAULTS = {"start": -3.0, "end": 3.0, "tau": 1.0}
LINEAR_DEFAULTS = {"beta_start": 1e-4, "beta_end": 0.02}


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    total_steps: int
    betas: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.total_steps,):
            raise ValueError(f"expected {self.total_steps} betas, got shape {betas.shape}")
        if not np.all(np.isfinite(betas)) or np.any(betas < 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in [0, 1)")
        object.__setattr__(self, "betas", betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def coefficients(self, t: int) -> tuple[float, float, float]:
        """(beta_t, alpha_t, alpha_bar_t) for a 1-based step."""
        _check_step(t, self.total_steps)
        return float(self.betas[t - 1]), float(self.alphas[t - 1]), float(self.alpha_bars[t - 1])

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "T": self.total_steps,
                "params": self.params,
                # repr round-trips float64 exactly
                "betas": [float(b) for b in self.betas],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        doc = json.loads(text)
        return cls(kind=doc["kind"], total_steps=int(doc["T"]), betas=np.array(doc["betas"]), params=doc["params"])


def make_noise_schedule(kind: ScheduleKind, T: int, params: dict | None = None) -> NoiseSchedule:
    """Build a schedule of ``T`` steps.

    ``linear`` interpolates betas between ``beta_start`` and ``beta_end``
    (or takes an explicit ``betas`` list). ``sigmoid_beta`` builds the
    cumulative product from a logistic profile and derives the betas from
    consecutive ratios.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    T = int(T)
    params = dict(params or {})

    if kind == "linear":
        if "betas" in params:
            betas = np.asarray(params.pop("betas"), dtype=np.float64)
            if betas.shape != (T,):
                raise ValueError("explicit betas must have length T")
            return NoiseSchedule("linear", T, betas, {"betas": betas.tolist()})
        p = {**LINEAR_DEFAULTS, **params}
        lo, hi = float(p["beta_start"]), float(p["beta_end"])
        if not (0 < lo < 1 and 0 < hi < 1):
            raise ValueError("linear beta bounds must lie in (0, 1)")
        if T > 1 and not lo < hi:
            raise ValueError("beta_start must be below beta_end")
        betas = np.linspace(lo, hi, T, dtype=np.float64)
        return NoiseSchedule("linear", T, betas, {"beta_start": lo, "beta_end": hi})

    if kind == "sigmoid_beta":
        p = {**SIGMOID_DEFAULTS, **params}
        start, end, tau = float(p["start"]), float(p["end"]), float(p["tau"])
        if tau <= 0:
            raise ValueError("tau must be positive")
        if not start < end:
            raise ValueError("sigmoid start must be below end")
        steps = np.arange(0, T + 1, dtype=np.float64)
        logits = -(steps / T * (end - start) + start) / tau
        profile = _logistic(logits)
        alpha_bars = profile / profile[0]
        betas = 1.0 - alpha_bars[1:] / alpha_bars[:-1]
        betas = np.clip(betas, 0.0, None)
        return NoiseSchedule("sigmoid_beta", T, betas, {"start": start, "end": end, "tau": tau})

    raise ValueError(f"unknown schedule kind {kind!r}")


def _logistic(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_step(t: int, total: int) -> None:
    if int(t) != t or not 1 <= t <= total:
        raise ValueError(f"timestep {t} outside [1, {total}]")


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_marginal_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` is an int, or a 1-D tensor of per-item steps broadcast over the
    leading batch axis of ``x0``.
    """
    _check_shapes(x0, eps, "forward_marginal_sample")
    if torch.is_tensor(t) and t.ndim == 1:
        if t.min() < 1 or t.max() > sched.total_steps:
            raise ValueError("timestep outside [1, T]")
        abar = torch.as_tensor(sched.alpha_bars, dtype=torch.float64)[t.long() - 1]
        abar = abar.to(x0.dtype).view(-1, *([1] * (x0.ndim - 1)))
        return abar.sqrt() * x0 + (1 - abar).sqrt() * eps
    t = int(t)
    _, _, abar = sched.coefficients(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def reverse_sigma(sched: NoiseSchedule, t: int, variance: str = "beta") -> float:
    beta, _, _ = sched.coefficients(t)
    if variance == "beta":
        return math.sqrt(beta)
    if variance == "identity":
        return 1.0
    raise ValueError(f"unknown reverse variance {variance!r}")


def ddpm_reverse_step(
    x_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    sched: NoiseSchedule,
    z: torch.Tensor,
    variance: str = "beta",
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1}; ``z`` is ignored at ``t = 1``."""
    _check_shapes(x_t, eps_hat, "ddpm_reverse_step")
    _check_shapes(x_t, z, "ddpm_reverse_step")
    beta, alpha, abar = sched.coefficients(t)
    if 1.0 - abar > 0:
        mean = (x_t - (beta / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(alpha)
    else:
        mean = x_t / math.sqrt(alpha)
    if t == 1:
        return mean
    return mean + reverse_sigma(sched, t, variance) * z


def ddpm_sample_loop(
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    shape: tuple[int, ...],
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
    variance: str = "beta",
    x_T: torch.Tensor | None = None,
) -> torch.Tensor:
    """Run the full T-step ancestral chain from x_T ~ N(0, I)."""
    x = torch.randn(shape, generator=generator, dtype=dtype) if x_T is None else x_T
    for t in range(sched.total_steps, 0, -1):
        eps_hat = eps_fn(x, t)
        z = torch.randn(shape, generator=generator, dtype=dtype) if t > 1 else torch.zeros(shape, dtype=dtype)
        x = ddpm_reverse_step(x, t, eps_hat, sched, z, variance)
    return x


def epsilon_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    _check_shapes(eps, eps_hat, "epsilon_loss")
    return torch.mean((eps - eps_hat) ** 2)
