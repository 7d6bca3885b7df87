"""Score-distillation estimator lab over analytic Gaussian-mixture priors."""

from ._core import BACKEND
from .estimators import EstimatorSpec, GradSample, Problem, make_estimator
from .oracle import (
    CfgOracle,
    ConditionalOracle,
    MixturePrior,
    MultiViewPrior,
    ReferencePoint,
    Surrogate,
    cfg_eps,
    condition,
    eps_predict,
    fit_surrogate,
    ip_eps_predict,
    marginal_at,
    multiview_eps,
    sample_reference,
    score,
    standard_prior,
    surrogate_eps,
)
from .render import Camera, RenderMap, identity_map, make_camera_ring, render, vjp
from .runner import (
    ModeAssignment,
    RunConfig,
    RunTrace,
    classify_mode,
    mode_distance,
    optimize,
    oscillation_metrics,
    view_consistency_error,
)
from .schedule import (
    DEFAULT_RANGE,
    NoiseSchedule,
    TimestepRange,
    add_noise,
    build_schedule,
    sample_timestep,
)
from .stats import GradStats, compare_estimators, grad_stats

__version__ = "0.1.0"
