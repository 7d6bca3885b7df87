"""Analytic noise-prediction oracles over isotropic Gaussian mixtures.

A named mixture stands in for the generative prior behind a prompt. Under a
variance-preserving forward process its time-t marginal stays a mixture in
closed form, so scores and epsilon-predictions are exact. Conditioning on a
reference point reweights the components by their Bayes posterior, and a
guidance combinator extrapolates between a conditional and an unconditional
oracle.

All mixture evaluations route through ``sdlab._core`` (compiled kernels when
available) and are log-sum-exp stabilized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._core import mixture_logpdf, mixture_responsibilities, mixture_score
from .render import Camera
from .schedule import NoiseSchedule, TimestepRange, add_noise, sample_timestep

EpsFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class MixturePrior:
    """Isotropic Gaussian mixture with a prompt-like name."""

    name: str
    weights: np.ndarray      # (K,), positive, sums to 1
    means: np.ndarray        # (K, d)
    variances: np.ndarray    # (K,), strictly positive

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.asarray(self.variances, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a nonempty 1-D array")
        if np.any(w <= 0.0):
            raise ValueError("component weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        if m.shape[0] != w.size:
            raise ValueError("means and weights disagree on component count")
        if v.shape != (w.size,):
            raise ValueError("variances must have one entry per component")
        if np.any(v <= 0.0):
            raise ValueError("component variances must be strictly positive")
        if not np.all(np.isfinite(m)):
            raise ValueError("component means must be finite")
        for arr in (w, m, v):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @classmethod
    def from_components(
        cls, name: str, components: Sequence[tuple[float, Sequence[float], float]]
    ) -> "MixturePrior":
        """Build from (weight, mean, variance) triples, normalizing the weights."""
        w = np.array([c[0] for c in components], dtype=np.float64)
        if np.any(w <= 0.0):
            raise ValueError("component weights must be strictly positive")
        w = w / w.sum()
        m = np.array([np.atleast_1d(c[1]) for c in components], dtype=np.float64)
        v = np.array([c[2] for c in components], dtype=np.float64)
        return cls(name=name, weights=w, means=m, variances=v)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size


def standard_prior(dim: int, name: str = "uncond") -> MixturePrior:
    """Unit Gaussian prior; the stand-in for an uninformative prompt."""
    return MixturePrior(
        name=name,
        weights=np.array([1.0]),
        means=np.zeros((1, dim)),
        variances=np.array([1.0]),
    )


def envelope_prior(prior: MixturePrior, name: str | None = None) -> MixturePrior:
    """Moment-matched single-Gaussian envelope of a mixture.

    The default unconditional oracle: it matches the mixture's mean and total
    (isotropized) covariance while erasing the mode structure, so guided
    extrapolation amplifies only the conditioning information, as in the real
    conditional/unconditional pairing.
    """
    mean = prior.weights @ prior.means
    second = prior.weights @ (prior.variances + (prior.means**2).mean(axis=1))
    var = float(second - (mean**2).mean())
    return MixturePrior(
        name=name or f"{prior.name}~envelope",
        weights=np.array([1.0]),
        means=mean[None, :],
        variances=np.array([var]),
    )


def _as_batch(prior: MixturePrior, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.ascontiguousarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != prior.dim:
        raise ValueError(f"points must have trailing dimension {prior.dim}")
    return x, single


def mixture_logpdf_at(prior: MixturePrior, x: np.ndarray) -> np.ndarray | float:
    """Log-density of the mixture as-is (no forward transform)."""
    xb, single = _as_batch(prior, x)
    out = mixture_logpdf(prior.weights, prior.means, prior.variances, xb)
    return float(out[0]) if single else out


def mixture_score_at(prior: MixturePrior, x: np.ndarray) -> np.ndarray:
    """Gradient of the mixture log-density as-is (no forward transform)."""
    xb, single = _as_batch(prior, x)
    out = mixture_score(prior.weights, prior.means, prior.variances, xb)
    return out[0] if single else out


def responsibilities_at(prior: MixturePrior, x: np.ndarray) -> np.ndarray:
    """Posterior component probabilities of the mixture as-is."""
    xb, single = _as_batch(prior, x)
    out = mixture_responsibilities(prior.weights, prior.means, prior.variances, xb)
    return out[0] if single else out


def sample_prior(
    prior: MixturePrior, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw n points from the mixture; returns (points (n, d), component indices (n,))."""
    idx = rng.choice(prior.n_components, size=n, p=prior.weights)
    z = rng.standard_normal((n, prior.dim))
    x = prior.means[idx] + np.sqrt(prior.variances[idx])[:, None] * z
    return x, idx


def marginal_at(prior: MixturePrior, t: int, sched: NoiseSchedule) -> MixturePrior:
    """Closed-form time-t marginal of the mixture under the forward process.

    Means scale by alpha_t; each variance becomes alpha_t^2 s_i^2 + sigma_t^2;
    weights are unchanged.
    """
    a = sched.alpha_at(t)
    s2 = sched.sigma_at(t) ** 2
    return MixturePrior(
        name=prior.name,
        weights=prior.weights,
        means=a * prior.means,
        variances=a * a * prior.variances + s2,
    )


def score(prior: MixturePrior, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Exact spatial score of the time-t marginal at x_t."""
    return mixture_score_at(marginal_at(prior, t, sched), x_t)


def eps_predict(prior: MixturePrior, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Noise prediction -sigma_t * score of the time-t marginal."""
    return -sched.sigma_at(t) * score(prior, x_t, t, sched)


@dataclass(frozen=True)
class ReferencePoint:
    """A reference draw that selects a mode of a prior."""

    x_ref: np.ndarray
    source_component: int | None = None

    def __post_init__(self):
        x = np.asarray(self.x_ref, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise ValueError("reference point must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "x_ref", x)


def sample_reference(prior: MixturePrior, rng: np.random.Generator) -> ReferencePoint:
    """Draw a reference point from the prior, recording its component."""
    x, idx = sample_prior(prior, 1, rng)
    return ReferencePoint(x_ref=x[0], source_component=int(idx[0]))


@dataclass(frozen=True)
class ConditionalOracle:
    """A prior reweighted toward the components that explain a reference point.

    conditioned_weights[i] is proportional to w_i * N(x_ref; mu_i,
    (s_i^2 + tau^2) I), the Bayes posterior over components when the
    reference is observed through Gaussian blur tau^2. ip_scale blends the
    base and reweighted epsilon-predictions.
    """

    base: MixturePrior
    reference: ReferencePoint
    ip_scale: float
    posterior_temperature: float
    conditioned_weights: np.ndarray = field(init=False)
    conditioned: MixturePrior = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.ip_scale <= 1.0:
            raise ValueError(f"ip_scale must be in [0, 1], got {self.ip_scale}")
        if self.posterior_temperature <= 0.0:
            raise ValueError("posterior_temperature must be positive")
        if self.reference.x_ref.shape != (self.base.dim,):
            raise ValueError("reference dimension does not match the prior")
        blur = MixturePrior(
            name=self.base.name,
            weights=self.base.weights,
            means=self.base.means,
            variances=self.base.variances + self.posterior_temperature,
        )
        w = responsibilities_at(blur, self.reference.x_ref)
        w = w / w.sum()
        w.setflags(write=False)
        object.__setattr__(self, "conditioned_weights", w)
        object.__setattr__(
            self,
            "conditioned",
            MixturePrior(
                name=f"{self.base.name}|ref",
                weights=w,
                means=self.base.means,
                variances=self.base.variances,
            ),
        )


def default_temperature(prior: MixturePrior) -> float:
    """Default posterior blur: a tenth of the mean component variance."""
    return 0.1 * float(prior.variances.mean())


def condition(
    prior: MixturePrior,
    ref: ReferencePoint,
    ip_scale: float,
    posterior_temperature: float | None = None,
) -> ConditionalOracle:
    """Condition a prior on a reference point with blend factor ip_scale."""
    tau_sq = default_temperature(prior) if posterior_temperature is None else posterior_temperature
    return ConditionalOracle(
        base=prior, reference=ref, ip_scale=ip_scale, posterior_temperature=tau_sq
    )


def ip_eps_predict(
    oracle: ConditionalOracle, x_t: np.ndarray, t: int, sched: NoiseSchedule
) -> np.ndarray:
    """Reference-blended prediction (1-lam) eps_base + lam eps_conditioned.

    ip_scale 0 short-circuits to the base prediction, keeping the blend an
    exact identity there.
    """
    lam = oracle.ip_scale
    base = eps_predict(oracle.base, x_t, t, sched)
    if lam == 0.0:
        return base
    cond = eps_predict(oracle.conditioned, x_t, t, sched)
    if lam == 1.0:
        return cond
    return (1.0 - lam) * base + lam * cond


@dataclass(frozen=True)
class CfgOracle:
    """Guided extrapolation uncond + s * (cond - uncond) between two eps-oracles."""

    cond: EpsFn
    uncond: EpsFn
    guidance_scale: float

    def __post_init__(self):
        if self.guidance_scale < 0.0:
            raise ValueError("guidance scale must be nonnegative")


def prior_eps_fn(prior: MixturePrior, sched: NoiseSchedule) -> EpsFn:
    return lambda x_t, t: eps_predict(prior, x_t, t, sched)


def conditional_eps_fn(oracle: ConditionalOracle, sched: NoiseSchedule) -> EpsFn:
    return lambda x_t, t: ip_eps_predict(oracle, x_t, t, sched)


def cfg_eps(oracle: CfgOracle, x_t: np.ndarray, t: int) -> np.ndarray:
    """Guided prediction; s=1 returns cond and s=0 returns uncond exactly."""
    s = oracle.guidance_scale
    if s == 1.0:
        return oracle.cond(x_t, t)
    if s == 0.0:
        return oracle.uncond(x_t, t)
    u = oracle.uncond(x_t, t)
    return u + s * (oracle.cond(x_t, t) - u)


@dataclass(frozen=True)
class MultiViewPrior:
    """Per-camera pushforwards of a canonical mixture over asset appearance.

    Cameras must be orthogonal so isotropic components stay isotropic; the
    pushforward rotates the means and keeps weights and variances.
    """

    canonical: MixturePrior
    cameras: tuple[Camera, ...]
    per_view_priors: tuple[MixturePrior, ...] = field(init=False)

    def __post_init__(self):
        cams = tuple(self.cameras)
        if not cams:
            raise ValueError("multi-view prior needs at least one camera")
        d = self.canonical.dim
        views = []
        for c in cams:
            if c.transform.shape != (d, d) or not c.is_orthogonal():
                raise ValueError(f"camera {c.id} is not an orthogonal {d}x{d} transform")
            views.append(
                MixturePrior(
                    name=f"{self.canonical.name}@view{c.id}",
                    weights=self.canonical.weights,
                    means=self.canonical.means @ c.transform.T,
                    variances=self.canonical.variances,
                )
            )
        object.__setattr__(self, "cameras", cams)
        object.__setattr__(self, "per_view_priors", tuple(views))

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def d_view(self) -> int:
        return self.canonical.dim


def multiview_eps(
    mv: MultiViewPrior, stacked: np.ndarray, t: int, sched: NoiseSchedule
) -> np.ndarray:
    """Per-view predictions on a stacked (V * d_view,) observation, concatenated."""
    stacked = np.asarray(stacked, dtype=np.float64)
    V, d = mv.n_views, mv.d_view
    if stacked.shape != (V * d,):
        raise ValueError(f"stacked views must have shape ({V * d},), got {stacked.shape}")
    out = np.empty_like(stacked)
    for v in range(V):
        sl = slice(v * d, (v + 1) * d)
        out[sl] = eps_predict(mv.per_view_priors[v], stacked[sl], t, sched)
    return out


@dataclass(frozen=True)
class Surrogate:
    """Per-timestep-bucket affine noise predictor fitted by ridge regression."""

    edges: np.ndarray        # (B + 1,) float bucket boundaries over t in [1, t_max]
    weight: np.ndarray       # (B, d, d)
    bias: np.ndarray         # (B, d)
    fitted: np.ndarray       # (B,) bool; False means the zero-map fallback
    ridge: float

    @property
    def n_buckets(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def bucket_of(self, t: int) -> int:
        t = int(t)
        if not self.edges[0] <= t < self.edges[-1]:
            raise ValueError(
                f"timestep {t} outside surrogate coverage [{self.edges[0]}, {self.edges[-1]})"
            )
        b = int(np.searchsorted(self.edges, t, side="right") - 1)
        return min(b, self.n_buckets - 1)


def fit_surrogate(
    dataset: Sequence[tuple[np.ndarray, int, np.ndarray]],
    buckets: int = 10,
    ridge: float = 1e-4,
    t_max: int | None = None,
) -> Surrogate:
    """Fit per-bucket affine maps x_t -> eps by ridge regression.

    Each bucket minimizes mean squared error plus ridge * ||W||_F^2 (the
    per-sample normalization makes the fit invariant to duplicating the
    dataset). Buckets with no data fall back to the zero map and are flagged;
    buckets with fewer than d + 1 samples are rejected.
    """
    if ridge < 0.0:
        raise ValueError("ridge must be nonnegative")
    if buckets < 1:
        raise ValueError("need at least one bucket")
    xs = np.asarray([np.atleast_1d(row[0]) for row in dataset], dtype=np.float64)
    ts = np.asarray([row[1] for row in dataset], dtype=np.int64)
    es = np.asarray([np.atleast_1d(row[2]) for row in dataset], dtype=np.float64)
    if xs.ndim != 2 or xs.shape != es.shape:
        raise ValueError("dataset rows must pair same-dimension x_t and eps vectors")
    n, d = xs.shape
    if n == 0:
        raise ValueError("dataset is empty")
    if t_max is None:
        t_max = int(ts.max())
    edges = np.linspace(1.0, t_max + 1.0, buckets + 1)
    which = np.clip(np.searchsorted(edges, ts, side="right") - 1, 0, buckets - 1)

    W = np.zeros((buckets, d, d))
    b = np.zeros((buckets, d))
    fitted = np.zeros(buckets, dtype=bool)
    for k in range(buckets):
        sel = which == k
        m = int(sel.sum())
        if m == 0:
            continue
        if m < d + 1:
            raise ValueError(f"bucket {k} has {m} samples; need at least {d + 1}")
        xk, ek = xs[sel], es[sel]
        x_mean, e_mean = xk.mean(axis=0), ek.mean(axis=0)
        xc, ec = xk - x_mean, ek - e_mean
        gram = xc.T @ xc / m + ridge * np.eye(d)
        cross = xc.T @ ec / m
        try:
            wk = np.linalg.solve(gram, cross).T
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"bucket {k}: singular system; use ridge > 0") from exc
        W[k] = wk
        b[k] = e_mean - wk @ x_mean
        fitted[k] = True
    return Surrogate(edges=edges, weight=W, bias=b, fitted=fitted, ridge=ridge)


def surrogate_eps(s: Surrogate, x_t: np.ndarray, t: int) -> np.ndarray:
    """Affine evaluation in the bucket owning t."""
    k = s.bucket_of(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[-1] != s.dim:
        raise ValueError(f"points must have trailing dimension {s.dim}")
    return x_t @ s.weight[k].T + s.bias[k]


def build_denoise_dataset(
    pool: np.ndarray,
    sched: NoiseSchedule,
    trange: TimestepRange,
    n: int,
    rng: np.random.Generator,
    buckets: int | None = None,
) -> list[tuple[np.ndarray, int, np.ndarray]]:
    """Forward-noise points from a pool into (x_t, t, eps) training triples.

    When buckets is given, timesteps are drawn stratified round-robin across
    the buckets (intersected with the truncated range) so each bucket
    receives data.
    """
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    t_lo, t_hi = trange.bounds(sched.T)
    triples = []
    if buckets is not None:
        edges = np.linspace(1.0, sched.T + 1.0, buckets + 1)
    for j in range(n):
        if buckets is None:
            t = sample_timestep(rng, trange, sched.T)
        else:
            k = j % buckets
            lo = max(t_lo, int(np.ceil(edges[k])))
            hi = min(t_hi, int(np.ceil(edges[k + 1])) - 1)
            if lo > hi:
                lo, hi = t_lo, t_hi
            t = int(rng.integers(lo, hi + 1))
        x0 = pool[rng.integers(pool.shape[0])]
        eps = rng.standard_normal(pool.shape[1])
        triples.append((add_noise(x0, t, eps, sched), t, eps))
    return triples
