"""Discrete variance-preserving noise schedules.

A schedule defines the forward marginal q(x_t | x_0) = N(alpha_t x_0,
sigma_t^2 I) at integer timesteps t = 1..T, with alpha_t^2 + sigma_t^2 = 1.
Convention: t=1 is nearly clean data, t=T is nearly pure noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("linear-beta", "cosine")
WEIGHT_KINDS = ("sigma_sq", "one")

# Floor on the cumulative signal power so alpha stays strictly positive at t=T.
_ALPHA_BAR_FLOOR = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable (alpha_t, sigma_t, weight_t) table for t = 1..T (1-based)."""

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"schedule needs T >= 2, got {self.T}")
        for name in ("alpha", "sigma", "weight"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},)")
            object.__setattr__(self, name, arr)
        if not (np.all(self.alpha > 0.0) and np.all(self.alpha <= 1.0)):
            raise ValueError("alpha entries must lie in (0, 1]")
        if not (np.all(self.sigma >= 0.0) and np.all(self.sigma < 1.0)):
            raise ValueError("sigma entries must lie in [0, 1)")
        if np.any(np.abs(self.alpha**2 + self.sigma**2 - 1.0) > 1e-12):
            raise ValueError("schedule is not variance preserving")
        if np.any(np.diff(self.alpha) > 0) or np.any(np.diff(self.sigma) < 0):
            raise ValueError("alpha must be nonincreasing and sigma nondecreasing")
        if np.any(self.weight < 0.0):
            raise ValueError("weight entries must be nonnegative")
        self.alpha.setflags(write=False)
        self.sigma.setflags(write=False)
        self.weight.setflags(write=False)

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma[self._check_t(t) - 1])

    def weight_at(self, t: int) -> float:
        return float(self.weight[self._check_t(t) - 1])


@dataclass(frozen=True)
class TimestepRange:
    """Fractional truncation (lo, hi) of the schedule, 0 < lo < hi < 1."""

    lo: float = 0.02
    hi: float = 0.98

    def __post_init__(self):
        if not (0.0 < self.lo < self.hi < 1.0):
            raise ValueError(f"need 0 < lo < hi < 1, got ({self.lo}, {self.hi})")

    def bounds(self, T: int) -> tuple[int, int]:
        """Inclusive integer bounds {ceil(lo*T), ..., floor(hi*T)} clamped to [1, T]."""
        # Guard against float noise like 0.02 * 1000 = 20.000000000000004.
        eps = 1e-9 * T
        t_lo = max(1, math.ceil(self.lo * T - eps))
        t_hi = min(T, math.floor(self.hi * T + eps))
        if t_lo > t_hi:
            raise ValueError(f"range ({self.lo}, {self.hi}) admits no timestep for T={T}")
        return t_lo, t_hi


DEFAULT_RANGE = TimestepRange(0.02, 0.98)


def _alpha_bar(kind: str, T: int) -> np.ndarray:
    if kind == "cosine":
        # Squared-cosine cumulative signal, offset 0.008.
        s = 0.008
        u = np.arange(1, T + 1, dtype=np.float64) / T
        ab = np.cos((u + s) / (1.0 + s) * (np.pi / 2.0)) ** 2
        ab0 = math.cos(s / (1.0 + s) * (math.pi / 2.0)) ** 2
        return ab / ab0
    if kind == "linear-beta":
        betas = np.linspace(1e-4, 0.02, T)
        return np.cumprod(1.0 - betas)
    raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")


def build_schedule(kind: str, T: int, weight: str = "sigma_sq") -> NoiseSchedule:
    """Construct a variance-preserving schedule of the given kind.

    weight selects the loss weighting: "sigma_sq" (default) uses sigma_t^2,
    "one" uses a constant 1.
    """
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    ab = np.clip(_alpha_bar(kind, T), _ALPHA_BAR_FLOOR, 1.0 - 1e-15)
    ab = np.minimum.accumulate(ab)
    alpha = np.sqrt(ab)
    sigma = np.sqrt(1.0 - ab)
    if weight == "sigma_sq":
        w = sigma**2
    elif weight == "one":
        w = np.ones(T)
    else:
        raise ValueError(f"unknown weight kind {weight!r}; expected one of {WEIGHT_KINDS}")
    return NoiseSchedule(T=T, alpha=alpha, sigma=sigma, weight=w)


def sample_timestep(rng: np.random.Generator, trange: TimestepRange, T: int) -> int:
    """Uniform integer timestep from the truncated range."""
    t_lo, t_hi = trange.bounds(T)
    return int(rng.integers(t_lo, t_hi + 1))


def add_noise(x: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward-noise x at timestep t: alpha_t * x + sigma_t * eps.

    x and eps may be (d,) vectors or (n, d) batches of matching shape.
    """
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"x and eps shapes differ: {x.shape} vs {eps.shape}")
    i = sched._check_t(t) - 1
    return sched.alpha[i] * x + sched.sigma[i] * eps
