"""Monte Carlo gradient estimators for score-distillation optimization.

Every estimator draws one (t, camera, noise) tuple, forms a guided residual
between a teacher prediction and a control variate, and pulls it back through
the render Jacobian transpose weighted by the schedule's omega(t):

    sds       teacher - raw noise
    sds_nocv  teacher alone (no control variate)
    ip_sds    reference-blended teacher - raw noise
    isd       reference-blended teacher - guided base prediction (same x_t, t)
    ip_vsd    reference-blended teacher - fitted affine surrogate
    t_shift   reference-blended teacher - guided base prediction at t + dt
    sds_mvd   per-view teacher on stacked views - raw noise
    combined  alpha * isd + beta * sds_mvd under a linear (alpha, beta) ramp

All estimators consume randomness in the same order (t, camera, noise) so
paired comparisons can replay identical streams across estimator kinds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .oracle import (
    CfgOracle,
    ConditionalOracle,
    MixturePrior,
    MultiViewPrior,
    Surrogate,
    cfg_eps,
    envelope_prior,
    eps_predict,
    ip_eps_predict,
    multiview_eps,
    surrogate_eps,
)
from .render import RenderMap, render, vjp
from .schedule import DEFAULT_RANGE, NoiseSchedule, TimestepRange, add_noise, sample_timestep

ESTIMATOR_KINDS = (
    "sds",
    "sds_nocv",
    "ip_sds",
    "isd",
    "ip_vsd",
    "t_shift",
    "sds_mvd",
    "combined",
)
ISD_CONTROLS = ("guided_base", "uncond")


@dataclass(frozen=True)
class EstimatorSpec:
    """Configuration of one estimator; fields map one-to-one to config keys."""

    kind: str
    cfg_scale: float = 7.5
    ip_scale: float = 0.5
    delta_t: int = 50
    combine: tuple[float, float, float, float] | None = None  # (a0, a1, b0, b1)
    mvd_cfg_scale: float = 50.0
    isd_control: str = "guided_base"

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.cfg_scale < 0.0 or self.mvd_cfg_scale < 0.0:
            raise ValueError("guidance scales must be nonnegative")
        if not 0.0 <= self.ip_scale <= 1.0:
            raise ValueError(f"ip_scale must be in [0, 1], got {self.ip_scale}")
        if self.kind == "t_shift" and self.delta_t < 1:
            raise ValueError("t_shift needs delta_t >= 1")
        if self.kind == "combined":
            if self.combine is None:
                raise ValueError("combined estimator needs combine=(a0, a1, b0, b1)")
            if len(self.combine) != 4:
                raise ValueError("combine must have four entries (a0, a1, b0, b1)")
            object.__setattr__(self, "combine", tuple(float(c) for c in self.combine))
        elif self.combine is not None:
            raise ValueError("combine is only valid for the combined estimator")
        if self.isd_control not in ISD_CONTROLS:
            raise ValueError(f"isd_control must be one of {ISD_CONTROLS}")


@dataclass(frozen=True)
class GradSample:
    """One Monte Carlo draw of an estimator."""

    t: int
    eps: np.ndarray
    residual: np.ndarray
    grad: np.ndarray
    camera_id: int | None = None
    alpha: float | None = None
    beta: float | None = None


def _draw(rng, trange: TimestepRange, sched: NoiseSchedule, rmap: RenderMap):
    """Shared draw protocol: timestep, camera index, then noise (by the caller)."""
    t = sample_timestep(rng, trange, sched.T)
    cam = rmap.cameras[int(rng.integers(len(rmap.cameras)))]
    return t, cam


def _guided(cond_fn, uncond_prior: MixturePrior, sched: NoiseSchedule, scale: float) -> CfgOracle:
    def uncond_fn(x_t, t):
        return eps_predict(uncond_prior, x_t, t, sched)

    return CfgOracle(cond=cond_fn, uncond=uncond_fn, guidance_scale=scale)


def _resolve_uncond(uncond: MixturePrior | None, base: MixturePrior) -> MixturePrior:
    """Default unconditional oracle: the moment-matched envelope of the base."""
    if uncond is None:
        return envelope_prior(base)
    if uncond.dim != base.dim:
        raise ValueError(
            f"unconditional prior dimension {uncond.dim} != view dimension {base.dim}"
        )
    return uncond


def grad_sds(
    theta: np.ndarray,
    prior: MixturePrior,
    rmap: RenderMap,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    spec: EstimatorSpec,
    trange: TimestepRange = DEFAULT_RANGE,
    uncond: MixturePrior | None = None,
) -> GradSample:
    """Vanilla residual: guided base prediction minus the drawn noise."""
    uncond = _resolve_uncond(uncond, prior)
    t, cam = _draw(rng, trange, sched, rmap)
    eps = rng.standard_normal(prior.dim)
    x_t = add_noise(render(rmap, theta, cam), t, eps, sched)
    guided = _guided(lambda x, tt: eps_predict(prior, x, tt, sched), uncond, sched, spec.cfg_scale)
    residual = cfg_eps(guided, x_t, t) - eps
    grad = sched.weight_at(t) * vjp(rmap, cam, residual)
    return GradSample(t=t, eps=eps, residual=residual, grad=grad, camera_id=cam.id)


def grad_sds_nocv(
    theta: np.ndarray,
    prior: MixturePrior,
    rmap: RenderMap,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    spec: EstimatorSpec,
    trange: TimestepRange = DEFAULT_RANGE,
    uncond: MixturePrior | None = None,
) -> GradSample:
    """Teacher-only residual: the drawn noise is not subtracted."""
    uncond = _resolve_uncond(uncond, prior)
    t, cam = _draw(rng, trange, sched, rmap)
    eps = rng.standard_normal(prior.dim)
    x_t = add_noise(render(rmap, theta, cam), t, eps, sched)
    guided = _guided(lambda x, tt: eps_predict(prior, x, tt, sched), uncond, sched, spec.cfg_scale)
    residual = cfg_eps(guided, x_t, t)
    grad = sched.weight_at(t) * vjp(rmap, cam, residual)
    return GradSample(t=t, eps=eps, residual=residual, grad=grad, camera_id=cam.id)


def grad_ip_sds(
    theta: np.ndarray,
    cond_oracle: ConditionalOracle,
    rmap: RenderMap,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    spec: EstimatorSpec,
    trange: TimestepRange = DEFAULT_RANGE,
    uncond: MixturePrior | None = None,
) -> GradSample:
    """Reference-blended teacher minus the drawn noise."""
    oracle = _with_scale(cond_oracle, spec.ip_scale)
    uncond = _resolve_uncond(uncond, oracle.base)
    t, cam = _draw(rng, trange, sched, rmap)
    eps = rng.standard_normal(oracle.base.dim)
    x_t = add_noise(render(rmap, theta, cam), t, eps, sched)
    guided = _guided(
        lambda x, tt: ip_eps_predict(oracle, x, tt, sched), uncond, sched, spec.cfg_scale
    )
    residual = cfg_eps(guided, x_t, t) - eps
    grad = sched.weight_at(t) * vjp(rmap, cam, residual)
    return GradSample(t=t, eps=eps, residual=residual, grad=grad, camera_id=cam.id)


def _with_scale(oracle: ConditionalOracle, ip_scale: float) -> ConditionalOracle:
    if oracle.ip_scale == ip_scale:
        return oracle
    return replace(oracle, ip_scale=ip_scale)


def _isd_parts(theta, oracle, rmap, sched, rng, spec, trange, uncond):
    """Common draw and guided teacher/control evaluation for the isd family."""
    uncond = _resolve_uncond(uncond, oracle.base)
    t, cam = _draw(rng, trange, sched, rmap)
    eps = rng.standard_normal(oracle.base.dim)
    x_t = add_noise(render(rmap, theta, cam), t, eps, sched)
    teacher_oracle = _guided(
        lambda x, tt: ip_eps_predict(oracle, x, tt, sched), uncond, sched, spec.cfg_scale
    )
    teacher = cfg_eps(teacher_oracle, x_t, t)
    return t, cam, eps, x_t, teacher, uncond


def grad_isd(
    theta: np.ndarray,
    cond_oracle: ConditionalOracle,
    rmap: RenderMap,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    spec: EstimatorSpec,
    trange: TimestepRange = DEFAULT_RANGE,
    uncond: MixturePrior | None = None,
) -> GradSample:
    """Reference-blended teacher minus the guided base prediction at the same x_t, t.

    Teacher and control variate share the same guidance scale; ip_scale 0
    therefore yields an exactly zero residual on every draw. isd_control
    "uncond" swaps the control variate for the unconditional prediction.
    """
    oracle = _with_scale(cond_oracle, spec.ip_scale)
    t, cam, eps, x_t, teacher, uncond = _isd_parts(
        theta, oracle, rmap, sched, rng, spec, trange, uncond
    )
    if spec.isd_control == "uncond":
        cv = eps_predict(uncond, x_t, t, sched)
    else:
        base_oracle = _guided(
            lambda x, tt: eps_predict(oracle.base, x, tt, sched), uncond, sched, spec.cfg_scale
        )
        cv = cfg_eps(base_oracle, x_t, t)
    residual = teacher - cv
    grad = sched.weight_at(t) * vjp(rmap, cam, residual)
    return GradSample(t=t, eps=eps, residual=residual, grad=grad, camera_id=cam.id)


def grad_ip_vsd(
    theta: np.ndarray,
    cond_oracle: ConditionalOracle,
    surrogate: Surrogate,
    rmap: RenderMap,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    spec: EstimatorSpec,
    trange: TimestepRange = DEFAULT_RANGE,
    uncond: MixturePrior | None = None,
) -> GradSample:
    """Reference-blended teacher minus a fitted affine surrogate prediction."""
    oracle = _with_scale(cond_oracle, spec.ip_scale)
    t, cam, eps, x_t, teacher, _ = _isd_parts(
        theta, oracle, rmap, sched, rng, spec, trange, uncond
    )
    residual = teacher - surrogate_eps(surrogate, x_t, t)
    grad = sched.weight_at(t) * vjp(rmap, cam, residual)
    return GradSample(t=t, eps=eps, residual=residual, grad=grad, camera_id=cam.id)


def grad_tshift(
    theta: np.ndarray,
    cond_oracle: ConditionalOracle,
    rmap: RenderMap,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    spec: EstimatorSpec,
    trange: TimestepRange = DEFAULT_RANGE,
    uncond: MixturePrior | None = None,
) -> GradSample:
    """Like isd, but the control variate is evaluated at min(t + delta_t, T)."""
    oracle = _with_scale(cond_oracle, spec.ip_scale)
    t, cam, eps, x_t, teacher, uncond = _isd_parts(
        theta, oracle, rmap, sched, rng, spec, trange, uncond
    )
    t_cv = min(t + spec.delta_t, sched.T)
    base_oracle = _guided(
        lambda x, tt: eps_predict(oracle.base, x, tt, sched), uncond, sched, spec.cfg_scale
    )
    residual = teacher - cfg_eps(base_oracle, x_t, t_cv)
    grad = sched.weight_at(t) * vjp(rmap, cam, residual)
    return GradSample(t=t, eps=eps, residual=residual, grad=grad, camera_id=cam.id)


def grad_sds_mvd(
    theta: np.ndarray,
    mv_prior: MultiViewPrior,
    rmap: RenderMap,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    spec: EstimatorSpec,
    trange: TimestepRange = DEFAULT_RANGE,
    uncond: MixturePrior | None = None,
) -> GradSample:
    """Joint residual over all views with shared t; vjps accumulate per view.

    Consumes a camera draw like the single-view estimators (the value is
    unused) so paired streams stay aligned across estimator kinds. Guidance
    extrapolates per view against each view's envelope prior by default; a
    custom unconditional prior must live in stacked space (dimension V * d).
    """
    V, d = mv_prior.n_views, mv_prior.d_view
    if len(rmap.cameras) != V:
        raise ValueError(f"render map has {len(rmap.cameras)} cameras but prior has {V} views")
    if uncond is None:
        view_envelopes = [envelope_prior(p) for p in mv_prior.per_view_priors]

        def uncond_fn(xx, tt):
            out = np.empty_like(xx)
            for v in range(V):
                sl = slice(v * d, (v + 1) * d)
                out[sl] = eps_predict(view_envelopes[v], xx[sl], tt, sched)
            return out
    else:
        if uncond.dim != V * d:
            raise ValueError(
                f"stacked unconditional prior must have dimension {V * d}, got {uncond.dim}"
            )

        def uncond_fn(xx, tt):
            return eps_predict(uncond, xx, tt, sched)

    t, _ = _draw(rng, trange, sched, rmap)
    eps = rng.standard_normal(V * d)
    x = np.concatenate([render(rmap, theta, cam) for cam in rmap.cameras])
    x_t = add_noise(x, t, eps, sched)
    guided = CfgOracle(
        cond=lambda xx, tt: multiview_eps(mv_prior, xx, tt, sched),
        uncond=uncond_fn,
        guidance_scale=spec.cfg_scale,
    )
    residual = cfg_eps(guided, x_t, t) - eps
    w = sched.weight_at(t)
    grad = np.zeros_like(np.asarray(theta, dtype=np.float64))
    for v, cam in enumerate(rmap.cameras):
        grad += w * vjp(rmap, cam, residual[v * d : (v + 1) * d])
    return GradSample(t=t, eps=eps, residual=residual, grad=grad, camera_id=None)


def schedule_alpha_beta(
    iteration: int, total: int, combine: tuple[float, float, float, float]
) -> tuple[float, float]:
    """Linear ramp from (a0, b0) at iteration 0 to (a1, b1) at iteration total."""
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    a0, a1, b0, b1 = combine
    u = iteration / total
    return a0 + (a1 - a0) * u, b0 + (b1 - b0) * u


def grad_combined(
    theta: np.ndarray,
    cond_oracle: ConditionalOracle,
    mv_prior: MultiViewPrior,
    rmap: RenderMap,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    spec: EstimatorSpec,
    iteration: int,
    total: int,
    trange: TimestepRange = DEFAULT_RANGE,
    uncond: MixturePrior | None = None,
) -> GradSample:
    """alpha * isd + beta * sds_mvd on sequential draws from the same stream.

    The reference-guided term uses cfg_scale, the multi-view term
    mvd_cfg_scale; (alpha, beta) follow the linear ramp at the given
    iteration.
    """
    a, b = schedule_alpha_beta(iteration, total, spec.combine)
    isd_spec = EstimatorSpec(
        kind="isd", cfg_scale=spec.cfg_scale, ip_scale=spec.ip_scale,
        isd_control=spec.isd_control,
    )
    mvd_spec = EstimatorSpec(kind="sds_mvd", cfg_scale=spec.mvd_cfg_scale)
    g_isd = grad_isd(theta, cond_oracle, rmap, sched, rng, isd_spec, trange, uncond)
    g_mvd = grad_sds_mvd(theta, mv_prior, rmap, sched, rng, mvd_spec, trange, None)
    grad = a * g_isd.grad + b * g_mvd.grad
    return GradSample(
        t=g_isd.t,
        eps=g_isd.eps,
        residual=g_isd.residual,
        grad=grad,
        camera_id=g_isd.camera_id,
        alpha=a,
        beta=b,
    )


@dataclass(frozen=True)
class Problem:
    """Everything an estimator needs besides theta and randomness."""

    prior: MixturePrior
    rmap: RenderMap
    sched: NoiseSchedule
    trange: TimestepRange = DEFAULT_RANGE
    conditional: ConditionalOracle | None = None
    mv_prior: MultiViewPrior | None = None
    uncond: MixturePrior | None = None

    def __post_init__(self):
        if self.prior.dim != self.rmap.d_view:
            raise ValueError(
                f"prior dimension {self.prior.dim} != render view dimension {self.rmap.d_view}"
            )


EstimatorFn = Callable[..., GradSample]


def make_estimator(
    spec: EstimatorSpec, problem: Problem, surrogate: Surrogate | None = None
) -> EstimatorFn:
    """Bind a spec to a problem; returns fn(theta, rng, iteration=0, total=1)."""
    p = problem
    kind = spec.kind
    if kind in ("ip_sds", "isd", "ip_vsd", "t_shift", "combined") and p.conditional is None:
        raise ValueError(f"estimator {kind!r} needs a conditional oracle")
    if kind in ("sds_mvd", "combined") and p.mv_prior is None:
        raise ValueError(f"estimator {kind!r} needs a multi-view prior")
    if kind == "ip_vsd" and surrogate is None:
        raise ValueError("estimator 'ip_vsd' needs a fitted surrogate")

    if kind == "sds":
        return lambda theta, rng, iteration=0, total=1: grad_sds(
            theta, p.prior, p.rmap, p.sched, rng, spec, p.trange, p.uncond
        )
    if kind == "sds_nocv":
        return lambda theta, rng, iteration=0, total=1: grad_sds_nocv(
            theta, p.prior, p.rmap, p.sched, rng, spec, p.trange, p.uncond
        )
    if kind == "ip_sds":
        return lambda theta, rng, iteration=0, total=1: grad_ip_sds(
            theta, p.conditional, p.rmap, p.sched, rng, spec, p.trange, p.uncond
        )
    if kind == "isd":
        return lambda theta, rng, iteration=0, total=1: grad_isd(
            theta, p.conditional, p.rmap, p.sched, rng, spec, p.trange, p.uncond
        )
    if kind == "ip_vsd":
        return lambda theta, rng, iteration=0, total=1: grad_ip_vsd(
            theta, p.conditional, surrogate, p.rmap, p.sched, rng, spec, p.trange, p.uncond
        )
    if kind == "t_shift":
        return lambda theta, rng, iteration=0, total=1: grad_tshift(
            theta, p.conditional, p.rmap, p.sched, rng, spec, p.trange, p.uncond
        )
    if kind == "sds_mvd":
        return lambda theta, rng, iteration=0, total=1: grad_sds_mvd(
            theta, p.mv_prior, p.rmap, p.sched, rng, spec, p.trange, None
        )
    return lambda theta, rng, iteration=0, total=1: grad_combined(
        theta, p.conditional, p.mv_prior, p.rmap, p.sched, rng, spec,
        iteration, total, p.trange, p.uncond,
    )
