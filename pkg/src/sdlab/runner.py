"""Stochastic optimization loop with mode-convergence diagnostics.

One run draws a single estimator sample per iteration and applies an
adaptive-moment update. Traces record the parameter vector, gradient norm,
ramp weights, and the time-0 mode assignment of the canonical render at a
fixed stride. Runs are bit-deterministic given the config seed.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .estimators import EstimatorSpec, Problem, make_estimator, schedule_alpha_beta
from .oracle import (
    MixturePrior,
    MultiViewPrior,
    Surrogate,
    build_denoise_dataset,
    fit_surrogate,
    responsibilities_at,
)
from .render import RenderMap, render

# Surrogate maintenance for the ip_vsd estimator.
SURROGATE_REFIT_INTERVAL = 50
SURROGATE_FIT_SAMPLES = 320
SURROGATE_BUCKETS = 10
SURROGATE_RIDGE = 1e-4
REPLAY_WINDOW = 512


@dataclass(frozen=True)
class ModeAssignment:
    component: int
    responsibility: float


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    theta: np.ndarray
    grad_norm: float
    alpha: float | None
    beta: float | None
    mode: int
    responsibility: float


@dataclass(frozen=True)
class RunConfig:
    problem: Problem
    spec: EstimatorSpec
    theta0: np.ndarray
    iterations: int = 2000
    learning_rate: float = 0.01
    moment_decay: tuple[float, float] = (0.9, 0.99)
    epsilon: float = 1e-8
    seed: int = 0
    trace_stride: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")
        if self.trace_stride < 1:
            raise ValueError("trace stride must be >= 1")
        theta0 = np.asarray(self.theta0, dtype=np.float64)
        if theta0.shape != (self.problem.rmap.d_theta,):
            raise ValueError(
                f"theta0 must have shape ({self.problem.rmap.d_theta},), got {theta0.shape}"
            )
        object.__setattr__(self, "theta0", theta0)


@dataclass
class RunTrace:
    records: list[TraceRecord]
    final_theta: np.ndarray
    wall_clock: float
    aborted: bool = False
    abort_reason: str | None = None

    @property
    def modes(self) -> list[int]:
        return [r.mode for r in self.records]


def classify_mode(theta: np.ndarray, prior: MixturePrior, rmap: RenderMap) -> ModeAssignment:
    """Argmax time-0 component responsibility of the canonical render.

    Ties break toward the lowest component index (argmax convention).
    """
    x = render(rmap, np.asarray(theta, dtype=np.float64), rmap.cameras[0])
    r = responsibilities_at(prior, x)
    k = int(np.argmax(r))
    return ModeAssignment(component=k, responsibility=float(r[k]))


def oscillation_metrics(trace: RunTrace) -> tuple[int, int]:
    """(mode-switch count, length of the longest constant suffix) over records."""
    modes = trace.modes
    if len(modes) < 2:
        raise ValueError("trace needs at least 2 records for oscillation metrics")
    switches = sum(1 for a, b in zip(modes, modes[1:]) if a != b)
    window = 1
    for a, b in zip(reversed(modes[1:]), reversed(modes[:-1])):
        if a != b:
            break
        window += 1
    return switches, window


def mode_separation(prior: MixturePrior) -> float:
    """Smallest pairwise distance between component means (1.0 if unimodal)."""
    if prior.n_components < 2:
        return 1.0
    d = np.linalg.norm(prior.means[:, None, :] - prior.means[None, :, :], axis=-1)
    return float(d[np.triu_indices(prior.n_components, k=1)].min())


def mode_distance(theta: np.ndarray, prior: MixturePrior, rmap: RenderMap,
                  target: int | None = None) -> float:
    """Distance from the canonical render to a component mean.

    target selects the component; None uses the nearest mean.
    """
    x = render(rmap, np.asarray(theta, dtype=np.float64), rmap.cameras[0])
    if target is not None:
        return float(np.linalg.norm(x - prior.means[target]))
    return float(np.linalg.norm(x - prior.means, axis=1).min())


def view_consistency_error(
    theta: np.ndarray, mv_prior: MultiViewPrior, rmap: RenderMap
) -> float:
    """Mean over cameras of the distance from each view's render to its nearest
    per-view mode, normalized by the canonical mode separation."""
    theta = np.asarray(theta, dtype=np.float64)
    sep = mode_separation(mv_prior.canonical)
    errs = []
    for cam, view_prior in zip(rmap.cameras, mv_prior.per_view_priors):
        x = render(rmap, theta, cam)
        errs.append(np.linalg.norm(x - view_prior.means, axis=1).min())
    return float(np.mean(errs)) / sep


def _fit_runner_surrogate(problem: Problem, replay, rng) -> Surrogate:
    pool = np.stack(list(replay))
    triples = build_denoise_dataset(
        pool, problem.sched, problem.trange, SURROGATE_FIT_SAMPLES, rng,
        buckets=SURROGATE_BUCKETS,
    )
    return fit_surrogate(
        triples, buckets=SURROGATE_BUCKETS, ridge=SURROGATE_RIDGE, t_max=problem.sched.T
    )


def optimize(config: RunConfig) -> RunTrace:
    """Run the configured estimator through the adaptive-moment update.

    Aborts on non-finite parameters or gradients, preserving the partial
    trace. Record count is floor(iterations / stride) + 1 (the initial state
    is always recorded).
    """
    p = config.problem
    spec = config.spec
    rng = np.random.default_rng(config.seed)
    theta = config.theta0.copy()
    b1, b2 = config.moment_decay
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    start = time.perf_counter()

    replay: deque | None = None
    surrogate: Surrogate | None = None
    if spec.kind == "ip_vsd":
        replay = deque(maxlen=REPLAY_WINDOW)

    def renders_of(th: np.ndarray) -> np.ndarray:
        # One pooled entry per camera keeps the replay representative of the
        # render distribution the estimator actually sees.
        return np.stack([render(p.rmap, th, cam) for cam in p.rmap.cameras])

    def record(it: int, g_norm: float, a: float | None, b: float | None) -> TraceRecord:
        assignment = classify_mode(theta, p.prior, p.rmap)
        return TraceRecord(
            iteration=it,
            theta=theta.copy(),
            grad_norm=g_norm,
            alpha=a,
            beta=b,
            mode=assignment.component,
            responsibility=assignment.responsibility,
        )

    if spec.kind == "combined":
        a0, b0 = schedule_alpha_beta(0, config.iterations, spec.combine)
    else:
        a0 = b0 = None
    records = [record(0, 0.0, a0, b0)]

    estimator = make_estimator(spec, p) if spec.kind != "ip_vsd" else None
    for k in range(1, config.iterations + 1):
        if replay is not None:
            for row in renders_of(theta):
                replay.append(row)
            if (k - 1) % SURROGATE_REFIT_INTERVAL == 0:
                surrogate = _fit_runner_surrogate(p, replay, rng)
                estimator = make_estimator(spec, p, surrogate=surrogate)
        sample = estimator(theta, rng, iteration=k - 1, total=config.iterations)
        g = sample.grad
        if not np.all(np.isfinite(g)):
            return RunTrace(records, theta.copy(), time.perf_counter() - start,
                            aborted=True, abort_reason=f"non-finite gradient at iteration {k}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**k)
        v_hat = v / (1.0 - b2**k)
        theta = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        if not np.all(np.isfinite(theta)):
            return RunTrace(records, theta.copy(), time.perf_counter() - start,
                            aborted=True, abort_reason=f"non-finite theta at iteration {k}")
        if k % config.trace_stride == 0:
            records.append(record(k, float(np.linalg.norm(g)), sample.alpha, sample.beta))

    return RunTrace(records, theta.copy(), time.perf_counter() - start)
