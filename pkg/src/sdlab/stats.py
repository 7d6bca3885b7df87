"""Per-sample gradient statistics and paired estimator comparisons.

Draw streams are derived from a seed sequence, one child generator per draw,
so different estimators replay bit-identical (t, camera, noise) tuples and
variance orderings can be read off paired samples instead of independent
Monte Carlo runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest

from .estimators import EstimatorFn, EstimatorSpec, GradSample, Problem, make_estimator
from .oracle import Surrogate

# Two-sided significance level for ordering verdicts.
VERDICT_ALPHA = 0.01


@dataclass(frozen=True)
class GradStats:
    """Summary of n draws of one estimator at a fixed theta."""

    spec: EstimatorSpec
    n: int
    mean: np.ndarray            # (d,)
    var: np.ndarray             # (d,) unbiased per-coordinate variance
    norm_trace: np.ndarray      # (n,) per-draw gradient norms
    t_draws: np.ndarray         # (n,) sampled timesteps
    grads: np.ndarray           # (n, d) raw per-draw gradients
    bucket_edges: np.ndarray | None = None
    bucket_var: np.ndarray | None = None    # (B, d), NaN where a bucket has < 2 draws
    bucket_count: np.ndarray | None = None  # (B,)

    @property
    def mean_coord_var(self) -> float:
        return float(self.var.mean())

    @property
    def trace_norm(self) -> float:
        return float(self.var.sum())


def _stream(seed: int, n: int, shared: bool):
    ss = np.random.SeedSequence(seed)
    if shared:
        return [np.random.default_rng(child) for child in ss.spawn(n)]
    rng = np.random.default_rng(ss)
    return [rng] * n


def bucket_edges_for(problem: Problem, buckets: int) -> np.ndarray:
    t_lo, t_hi = problem.trange.bounds(problem.sched.T)
    return np.linspace(t_lo, t_hi + 1.0, buckets + 1)


def grad_stats(
    estimator: EstimatorFn,
    theta: np.ndarray,
    n: int,
    seed: int,
    shared_stream: bool = True,
    bucket_edges: np.ndarray | None = None,
    spec: EstimatorSpec | None = None,
) -> GradStats:
    """Collect n draws and their unbiased statistics; deterministic per seed.

    With shared_stream, draw j uses the j-th spawned child generator, so a
    second call with the same seed but a different estimator replays the
    identical stream.
    """
    if n < 2:
        raise ValueError(f"need at least 2 draws for a variance, got {n}")
    theta = np.asarray(theta, dtype=np.float64)
    rngs = _stream(seed, n, shared_stream)
    samples: list[GradSample] = [estimator(theta, rngs[j]) for j in range(n)]
    grads = np.stack([s.grad for s in samples])
    ts = np.array([s.t for s in samples], dtype=np.int64)
    mean = grads.mean(axis=0)
    var = grads.var(axis=0, ddof=1)
    norms = np.linalg.norm(grads, axis=1)

    b_var = b_count = None
    if bucket_edges is not None:
        B = len(bucket_edges) - 1
        which = np.clip(np.searchsorted(bucket_edges, ts, side="right") - 1, 0, B - 1)
        b_var = np.full((B, grads.shape[1]), np.nan)
        b_count = np.zeros(B, dtype=np.int64)
        for k in range(B):
            sel = which == k
            b_count[k] = sel.sum()
            if b_count[k] >= 2:
                b_var[k] = grads[sel].var(axis=0, ddof=1)
    return GradStats(
        spec=spec,
        n=n,
        mean=mean,
        var=var,
        norm_trace=norms,
        t_draws=ts,
        grads=grads,
        bucket_edges=bucket_edges,
        bucket_var=b_var,
        bucket_count=b_count,
    )


@dataclass(frozen=True)
class Verdict:
    """Paired-sign-test outcome for a pair of estimators."""

    first: str
    second: str
    verdict: str          # "<first> lower variance" | "<second> lower variance" | "tie"
    p_value: float
    n_effective: int
    first_mean_coord_var: float
    second_mean_coord_var: float


def _sign_verdict(label_a: str, label_b: str, sq_a: np.ndarray, sq_b: np.ndarray) -> Verdict:
    # Paired squared deviations from each estimator's own mean; sign test on
    # the per-draw differences (distribution-free, heavy-tail tolerant).
    diff = sq_a - sq_b
    nonzero = diff != 0.0
    n_eff = int(nonzero.sum())
    if n_eff == 0:
        return Verdict(label_a, label_b, "tie", 1.0, 0, float(sq_a.mean()), float(sq_b.mean()))
    wins_a = int((diff[nonzero] < 0).sum())
    test = binomtest(wins_a, n_eff, 0.5)
    verdict = "tie"
    if test.pvalue < VERDICT_ALPHA:
        verdict = f"{label_a} lower variance" if wins_a > n_eff / 2 else f"{label_b} lower variance"
    return Verdict(
        label_a, label_b, verdict, float(test.pvalue), n_eff,
        float(sq_a.mean()), float(sq_b.mean()),
    )


@dataclass(frozen=True)
class ComparisonReport:
    labels: list[str]
    stats: list[GradStats]
    verdicts: list[Verdict]
    seed: int

    def stats_for(self, label: str) -> GradStats:
        return self.stats[self.labels.index(label)]


def estimator_label(spec: EstimatorSpec) -> str:
    return spec.kind


def compare_estimators(
    specs: list[EstimatorSpec],
    problem: Problem,
    theta: np.ndarray,
    n: int,
    seed: int,
    buckets: int = 10,
    surrogate: Surrogate | None = None,
    labels: list[str] | None = None,
) -> ComparisonReport:
    """Shared-stream statistics for each spec plus pairwise ordering verdicts."""
    if labels is None:
        labels = [estimator_label(s) for s in specs]
        if len(set(labels)) != len(labels):
            labels = [f"{s.kind}#{i}" for i, s in enumerate(specs)]
    edges = bucket_edges_for(problem, buckets)
    stats = []
    for spec in specs:
        fn = make_estimator(spec, problem, surrogate=surrogate)
        stats.append(
            grad_stats(fn, theta, n, seed, shared_stream=True, bucket_edges=edges, spec=spec)
        )

    verdicts = []
    sq_dev = [((st.grads - st.mean) ** 2).sum(axis=1) for st in stats]
    for i in range(len(specs)):
        for j in range(i + 1, len(specs)):
            verdicts.append(_sign_verdict(labels[i], labels[j], sq_dev[i], sq_dev[j]))
    return ComparisonReport(labels=labels, stats=stats, verdicts=verdicts, seed=seed)


def bucketwise_le(a: GradStats, b: GradStats) -> bool:
    """True when a's per-coordinate variance is <= b's in every populated bucket."""
    if a.bucket_var is None or b.bucket_var is None:
        raise ValueError("bucket statistics were not collected")
    ok = True
    for k in range(a.bucket_var.shape[0]):
        if a.bucket_count[k] < 2 or b.bucket_count[k] < 2:
            continue
        if np.any(a.bucket_var[k] > b.bucket_var[k]):
            ok = False
    return ok


def report_rows(report: ComparisonReport) -> list[dict]:
    """One row per (estimator, draw) for CSV trace emission."""
    rows = []
    for label, st in zip(report.labels, report.stats):
        for j in range(st.n):
            rows.append(
                {
                    "estimator": label,
                    "draw": j,
                    "t": int(st.t_draws[j]),
                    "grad_norm": float(st.norm_trace[j]),
                }
            )
    return rows


def report_summary(report: ComparisonReport) -> dict:
    """JSON-ready summary: per-estimator moments and pairwise verdicts."""
    return {
        "seed": report.seed,
        "estimators": [
            {
                "label": label,
                "n": st.n,
                "mean": st.mean.tolist(),
                "var": st.var.tolist(),
                "mean_coord_var": st.mean_coord_var,
                "trace_norm": st.trace_norm,
                "mean_norm": float(st.norm_trace.mean()),
                "bucket_count": None if st.bucket_count is None else st.bucket_count.tolist(),
            }
            for label, st in zip(report.labels, report.stats)
        ],
        "verdicts": [
            {
                "pair": [v.first, v.second],
                "verdict": v.verdict,
                "p_value": v.p_value,
                "n_effective": v.n_effective,
                "mean_coord_var": [v.first_mean_coord_var, v.second_mean_coord_var],
            }
            for v in report.verdicts
        ],
    }
