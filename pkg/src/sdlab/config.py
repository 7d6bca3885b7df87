"""Experiment configuration: strict parsing, normalization, and object building.

A config is one YAML document. Every mapping is validated against a closed
key set (unknown keys are rejected) and every diagnostic carries the schema
path of the offending key, e.g. ``conditional.ip_scale: must be within
[0, 1]``. Parsing normalizes defaults so that a config round-trips through
``to_dict`` unchanged.

The file format is documented in ``docs/config-schema.md``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .estimators import ESTIMATOR_KINDS, ISD_CONTROLS, EstimatorSpec, Problem
from .oracle import (
    ConditionalOracle,
    MixturePrior,
    ReferencePoint,
    condition,
    MultiViewPrior,
    sample_reference,
    standard_prior,
)
from .render import RenderMap, identity_map, make_camera_ring
from .runner import RunConfig
from .schedule import SCHEDULE_KINDS, WEIGHT_KINDS, TimestepRange, build_schedule

# Entropy tag mixed with the seed for reference-point draws, keeping them
# decoupled from the optimizer stream.
_REF_STREAM_TAG = 2718281828


class ConfigError(ValueError):
    """Invalid experiment config; message starts with the schema path."""


def _fail(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


def _require_mapping(doc, path: str) -> dict:
    if not isinstance(doc, dict):
        _fail(path, f"expected a mapping, got {type(doc).__name__}")
    return doc


def _check_keys(doc: dict, allowed: set[str], path: str):
    for key in doc:
        if key not in allowed:
            _fail(path, f"unknown key {key!r} (allowed: {sorted(allowed)})")


_REQUIRED = object()


def _get_number(doc, key, path, default=_REQUIRED, lo=None, hi=None, integer=False):
    if key not in doc or doc[key] is None:
        if default is _REQUIRED:
            _fail(f"{path}.{key}", "missing required value")
        return default
    val = doc[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        _fail(f"{path}.{key}", f"expected a number, got {val!r}")
    if integer:
        if int(val) != val:
            _fail(f"{path}.{key}", f"expected an integer, got {val!r}")
        val = int(val)
    else:
        val = float(val)
    if lo is not None and val < lo:
        _fail(f"{path}.{key}", f"must be within [{lo}, {hi if hi is not None else 'inf'}], got {val}")
    if hi is not None and val > hi:
        _fail(f"{path}.{key}", f"must be within [{lo if lo is not None else '-inf'}, {hi}], got {val}")
    return val


def _get_choice(doc, key, path, choices, default):
    val = doc.get(key, default)
    if val not in choices:
        _fail(f"{path}.{key}", f"expected one of {list(choices)}, got {val!r}")
    return val


def _vector(val, path) -> tuple[float, ...]:
    if isinstance(val, (int, float)) and not isinstance(val, bool):
        return (float(val),)
    if isinstance(val, (list, tuple)) and val and all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in val
    ):
        return tuple(float(v) for v in val)
    _fail(path, f"expected a number or list of numbers, got {val!r}")


@dataclass(frozen=True)
class PriorDecl:
    name: str
    components: tuple[tuple[float, tuple[float, ...], float], ...]

    def build(self) -> MixturePrior:
        return MixturePrior.from_components(self.name, self.components)


def _parse_prior(doc, path: str) -> PriorDecl:
    doc = _require_mapping(doc, path)
    _check_keys(doc, {"name", "components"}, path)
    name = doc.get("name", "prior")
    if not isinstance(name, str):
        _fail(f"{path}.name", f"expected a string, got {name!r}")
    comps = doc.get("components")
    if not isinstance(comps, list) or not comps:
        _fail(f"{path}.components", "expected a nonempty list of components")
    out = []
    dims = set()
    for i, c in enumerate(comps):
        cpath = f"{path}.components[{i}]"
        c = _require_mapping(c, cpath)
        _check_keys(c, {"weight", "mean", "variance"}, cpath)
        w = _get_number(c, "weight", cpath)
        if w <= 0:
            _fail(f"{cpath}.weight", f"must be strictly positive, got {w}")
        mean = _vector(c.get("mean"), f"{cpath}.mean")
        var = _get_number(c, "variance", cpath)
        if var <= 0:
            _fail(f"{cpath}.variance", f"must be strictly positive, got {var}")
        dims.add(len(mean))
        out.append((w, mean, var))
    if len(dims) != 1:
        _fail(f"{path}.components", "all component means must share one dimension")
    total = sum(c[0] for c in out)
    out = [(w / total, mean, var) for (w, mean, var) in out]
    return PriorDecl(name=name, components=tuple(out))


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seeds: tuple[int, ...]
    schedule_kind: str
    steps: int
    weight: str
    t_lo: float
    t_hi: float
    prior: PriorDecl
    uncond: PriorDecl | str | None      # None = auto (envelope), "standard", or explicit
    reference: tuple | None             # ("point", vec) | ("sample", "random" | int)
    ip_scale: float
    posterior_temperature: float | None
    render_kind: str
    theta_dim: int
    views: int
    camera_seed: int
    estimator: EstimatorSpec | None
    estimators: tuple[EstimatorSpec, ...] | None
    iterations: int
    learning_rate: float
    moment_decay: tuple[float, float]
    epsilon: float
    trace_stride: int
    theta0: tuple[float, ...] | None    # None = zeros
    draws: int
    buckets: int
    eval_theta: tuple[float, ...] | None  # None = zeros

    @property
    def dim(self) -> int:
        return len(self.prior.components[0][1])

    def to_dict(self) -> dict:
        """Normalized plain-data echo; parsing it reproduces this config."""
        doc = {
            "name": self.name,
            "seeds": list(self.seeds),
            "schedule": {"kind": self.schedule_kind, "steps": self.steps, "weight": self.weight},
            "timestep_range": {"lo": self.t_lo, "hi": self.t_hi},
            "prior": {
                "name": self.prior.name,
                "components": [
                    {"weight": w, "mean": list(mean), "variance": var}
                    for (w, mean, var) in self.prior.components
                ],
            },
            "conditional": {
                "ip_scale": self.ip_scale,
                "posterior_temperature": self.posterior_temperature,
            },
            "render": {
                "kind": self.render_kind,
                "theta_dim": self.theta_dim,
                "views": self.views,
                "camera_seed": self.camera_seed,
            },
            "runner": {
                "iterations": self.iterations,
                "learning_rate": self.learning_rate,
                "moment_decay": list(self.moment_decay),
                "epsilon": self.epsilon,
                "trace_stride": self.trace_stride,
                "theta0": None if self.theta0 is None else list(self.theta0),
            },
            "variance": {
                "draws": self.draws,
                "buckets": self.buckets,
                "eval_theta": None if self.eval_theta is None else list(self.eval_theta),
            },
        }
        if self.uncond == "standard":
            doc["uncond_prior"] = "standard"
        elif self.uncond is not None:
            doc["uncond_prior"] = {
                "name": self.uncond.name,
                "components": [
                    {"weight": w, "mean": list(mean), "variance": var}
                    for (w, mean, var) in self.uncond.components
                ],
            }
        if self.reference is not None:
            kind, val = self.reference
            doc["reference"] = {"point": list(val)} if kind == "point" else {"sample": val}
        if self.estimator is not None:
            doc["estimator"] = _spec_to_dict(self.estimator)
        if self.estimators is not None:
            doc["estimators"] = [_spec_to_dict(s) for s in self.estimators]
        return doc


def _spec_to_dict(spec: EstimatorSpec) -> dict:
    doc = {"kind": spec.kind, "cfg_scale": spec.cfg_scale, "ip_scale": spec.ip_scale}
    if spec.kind == "t_shift":
        doc["delta_t"] = spec.delta_t
    if spec.kind == "combined":
        a0, a1, b0, b1 = spec.combine
        doc["combine"] = {"alpha": [a0, a1], "beta": [b0, b1]}
        doc["mvd_cfg_scale"] = spec.mvd_cfg_scale
    if spec.isd_control != "guided_base":
        doc["isd_control"] = spec.isd_control
    return doc


def _parse_estimator(doc, path: str) -> EstimatorSpec:
    doc = _require_mapping(doc, path)
    allowed = {"kind", "cfg_scale", "ip_scale", "delta_t", "combine", "mvd_cfg_scale",
               "isd_control"}
    _check_keys(doc, allowed, path)
    kind = _get_choice(doc, "kind", path, ESTIMATOR_KINDS, default=None)
    cfg_scale = _get_number(doc, "cfg_scale", path, default=7.5, lo=0.0)
    ip_scale = _get_number(doc, "ip_scale", path, default=0.5, lo=0.0, hi=1.0)
    delta_t = _get_number(doc, "delta_t", path, default=50, lo=1, integer=True)
    mvd_cfg = _get_number(doc, "mvd_cfg_scale", path, default=50.0, lo=0.0)
    isd_control = _get_choice(doc, "isd_control", path, ISD_CONTROLS, default="guided_base")
    combine = None
    if kind == "combined":
        cdoc = _require_mapping(doc.get("combine", {"alpha": [0.4, 0.8], "beta": [0.6, 0.02]}),
                                f"{path}.combine")
        _check_keys(cdoc, {"alpha", "beta"}, f"{path}.combine")
        a = _vector(cdoc.get("alpha", [0.4, 0.8]), f"{path}.combine.alpha")
        b = _vector(cdoc.get("beta", [0.6, 0.02]), f"{path}.combine.beta")
        if len(a) != 2 or len(b) != 2:
            _fail(f"{path}.combine", "alpha and beta must be [start, end] pairs")
        combine = (a[0], a[1], b[0], b[1])
    elif "combine" in doc:
        _fail(f"{path}.combine", "only valid when kind is 'combined'")
    try:
        return EstimatorSpec(
            kind=kind, cfg_scale=cfg_scale, ip_scale=ip_scale, delta_t=delta_t,
            combine=combine, mvd_cfg_scale=mvd_cfg, isd_control=isd_control,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_TOP_KEYS = {
    "name", "seed", "seeds", "schedule", "timestep_range", "prior", "uncond_prior",
    "reference", "conditional", "render", "estimator", "estimators", "runner", "variance",
}


def parse_config(source: dict | str | Path, name_hint: str = "experiment") -> ExperimentConfig:
    """Validate a config document (or YAML file path) into an ExperimentConfig."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        name_hint = path.stem
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config: invalid YAML in {path}: {exc}") from exc
    else:
        doc = source
    doc = _require_mapping(doc, "config")
    _check_keys(doc, _TOP_KEYS, "config")

    name = doc.get("name", name_hint)
    if not isinstance(name, str) or not name:
        _fail("config.name", f"expected a nonempty string, got {name!r}")

    if "seeds" in doc and doc["seeds"] is not None:
        raw = doc["seeds"]
        if not isinstance(raw, list) or not raw or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in raw
        ):
            _fail("config.seeds", f"expected a nonempty list of integers, got {raw!r}")
        seeds = tuple(int(s) for s in raw)
    else:
        seeds = (int(_get_number(doc, "seed", "config", default=0, integer=True)),)

    sdoc = _require_mapping(doc.get("schedule", {}), "schedule")
    _check_keys(sdoc, {"kind", "steps", "weight"}, "schedule")
    schedule_kind = _get_choice(sdoc, "kind", "schedule", SCHEDULE_KINDS, default="cosine")
    steps = _get_number(sdoc, "steps", "schedule", default=1000, lo=2, integer=True)
    weight = _get_choice(sdoc, "weight", "schedule", WEIGHT_KINDS, default="sigma_sq")

    rdoc = _require_mapping(doc.get("timestep_range", {}), "timestep_range")
    _check_keys(rdoc, {"lo", "hi"}, "timestep_range")
    t_lo = _get_number(rdoc, "lo", "timestep_range", default=0.02)
    t_hi = _get_number(rdoc, "hi", "timestep_range", default=0.98)
    if not 0.0 < t_lo < t_hi < 1.0:
        _fail("timestep_range", f"need 0 < lo < hi < 1, got ({t_lo}, {t_hi})")

    if "prior" not in doc:
        _fail("config.prior", "missing required section")
    prior = _parse_prior(doc["prior"], "prior")
    dim = len(prior.components[0][1])

    uncond: PriorDecl | str | None
    raw_uncond = doc.get("uncond_prior")
    if raw_uncond in (None, "auto"):
        uncond = None
    elif raw_uncond == "standard":
        uncond = "standard"
    else:
        uncond = _parse_prior(raw_uncond, "uncond_prior")
        if len(uncond.components[0][1]) != dim:
            _fail("uncond_prior", "dimension must match the prior")

    reference = None
    if doc.get("reference") is not None:
        refdoc = _require_mapping(doc["reference"], "reference")
        _check_keys(refdoc, {"point", "sample"}, "reference")
        if ("point" in refdoc) == ("sample" in refdoc):
            _fail("reference", "give exactly one of 'point' or 'sample'")
        if "point" in refdoc:
            vec = _vector(refdoc["point"], "reference.point")
            if len(vec) != dim:
                _fail("reference.point", f"expected dimension {dim}, got {len(vec)}")
            reference = ("point", vec)
        else:
            sval = refdoc["sample"]
            if sval == "random":
                reference = ("sample", "random")
            elif isinstance(sval, int) and not isinstance(sval, bool):
                if not 0 <= sval < len(prior.components):
                    _fail("reference.sample", f"component index {sval} out of range")
                reference = ("sample", int(sval))
            else:
                _fail("reference.sample", f"expected 'random' or a component index, got {sval!r}")

    cdoc = _require_mapping(doc.get("conditional", {}), "conditional")
    _check_keys(cdoc, {"ip_scale", "posterior_temperature"}, "conditional")
    ip_scale = _get_number(cdoc, "ip_scale", "conditional", default=0.5, lo=0.0, hi=1.0)
    tau_sq = _get_number(cdoc, "posterior_temperature", "conditional", default=None)
    if tau_sq is not None and tau_sq <= 0:
        _fail("conditional.posterior_temperature", f"must be strictly positive, got {tau_sq}")

    vdoc = _require_mapping(doc.get("render", {}), "render")
    _check_keys(vdoc, {"kind", "theta_dim", "views", "camera_seed"}, "render")
    render_kind = _get_choice(vdoc, "kind", "render", ("identity", "linear-view"),
                              default="identity")
    theta_dim = _get_number(vdoc, "theta_dim", "render", default=dim, lo=1, integer=True)
    views = _get_number(vdoc, "views", "render", default=1, lo=1, integer=True)
    camera_seed = _get_number(vdoc, "camera_seed", "render", default=0, integer=True)
    if render_kind == "identity" and views != 1:
        _fail("render.views", "identity render has exactly one view")
    if theta_dim != dim:
        _fail("render.theta_dim", f"ring cameras are square; theta_dim must equal prior "
                                  f"dimension {dim}, got {theta_dim}")

    estimator = None
    if doc.get("estimator") is not None:
        estimator = _parse_estimator(doc["estimator"], "estimator")
    estimators = None
    if doc.get("estimators") is not None:
        raw = doc["estimators"]
        if not isinstance(raw, list) or not raw:
            _fail("estimators", "expected a nonempty list")
        estimators = tuple(
            _parse_estimator(e, f"estimators[{i}]") for i, e in enumerate(raw)
        )

    rundoc = _require_mapping(doc.get("runner", {}), "runner")
    _check_keys(
        rundoc,
        {"iterations", "learning_rate", "moment_decay", "epsilon", "trace_stride", "theta0"},
        "runner",
    )
    iterations = _get_number(rundoc, "iterations", "runner", default=2000, lo=1, integer=True)
    lr = _get_number(rundoc, "learning_rate", "runner", default=0.01)
    if lr <= 0:
        _fail("runner.learning_rate", f"must be strictly positive, got {lr}")
    decay_raw = rundoc.get("moment_decay", [0.9, 0.99])
    decay = _vector(decay_raw, "runner.moment_decay")
    if len(decay) != 2 or not all(0.0 <= b < 1.0 for b in decay):
        _fail("runner.moment_decay", f"expected two decays in [0, 1), got {decay_raw!r}")
    epsilon = _get_number(rundoc, "epsilon", "runner", default=1e-8)
    if epsilon <= 0:
        _fail("runner.epsilon", f"must be strictly positive, got {epsilon}")
    stride = _get_number(rundoc, "trace_stride", "runner", default=10, lo=1, integer=True)
    theta0 = None
    if rundoc.get("theta0") not in (None, "zeros"):
        theta0 = _vector(rundoc["theta0"], "runner.theta0")
        if len(theta0) != theta_dim:
            _fail("runner.theta0", f"expected dimension {theta_dim}, got {len(theta0)}")

    vardoc = _require_mapping(doc.get("variance", {}), "variance")
    _check_keys(vardoc, {"draws", "buckets", "eval_theta"}, "variance")
    draws = _get_number(vardoc, "draws", "variance", default=10000, lo=2, integer=True)
    buckets = _get_number(vardoc, "buckets", "variance", default=10, lo=1, integer=True)
    eval_theta = None
    if vardoc.get("eval_theta") not in (None, "zeros"):
        eval_theta = _vector(vardoc["eval_theta"], "variance.eval_theta")
        if len(eval_theta) != theta_dim:
            _fail("variance.eval_theta", f"expected dimension {theta_dim}, got {len(eval_theta)}")

    return ExperimentConfig(
        name=name, seeds=seeds, schedule_kind=schedule_kind, steps=steps, weight=weight,
        t_lo=t_lo, t_hi=t_hi, prior=prior, uncond=uncond, reference=reference,
        ip_scale=ip_scale, posterior_temperature=tau_sq, render_kind=render_kind,
        theta_dim=theta_dim, views=views, camera_seed=camera_seed, estimator=estimator,
        estimators=estimators, iterations=iterations, learning_rate=lr,
        moment_decay=(decay[0], decay[1]), epsilon=epsilon, trace_stride=stride,
        theta0=theta0, draws=draws, buckets=buckets, eval_theta=eval_theta,
    )


def _resolve_reference(cfg: ExperimentConfig, prior: MixturePrior, seed: int) -> ReferencePoint:
    kind, val = cfg.reference
    if kind == "point":
        return ReferencePoint(x_ref=np.array(val))
    rng = np.random.default_rng(np.random.SeedSequence([_REF_STREAM_TAG, seed]))
    if val == "random":
        return sample_reference(prior, rng)
    k = int(val)
    z = rng.standard_normal(prior.dim)
    x = prior.means[k] + np.sqrt(prior.variances[k]) * z
    return ReferencePoint(x_ref=x, source_component=k)


def build_problem(cfg: ExperimentConfig, seed: int) -> Problem:
    """Construct the runnable objects for one seed.

    Sampled references are drawn from a dedicated stream derived from the
    seed, so runs stay deterministic and the optimizer stream is untouched.
    """
    sched = build_schedule(cfg.schedule_kind, cfg.steps, weight=cfg.weight)
    trange = TimestepRange(cfg.t_lo, cfg.t_hi)
    prior = cfg.prior.build()
    if cfg.uncond is None:
        uncond = None  # estimators default to the mixture's envelope
    elif cfg.uncond == "standard":
        uncond = standard_prior(len(cfg.prior.components[0][1]))
    else:
        uncond = cfg.uncond.build()

    if cfg.views > 1:
        cameras = make_camera_ring(cfg.views, cfg.theta_dim, cfg.camera_seed)
        rmap = RenderMap(kind="linear-view", cameras=tuple(cameras))
        mv_prior = MultiViewPrior(canonical=prior, cameras=tuple(cameras))
    elif cfg.render_kind == "identity":
        rmap = identity_map(cfg.theta_dim)
        mv_prior = None
    else:
        rmap = RenderMap(kind="linear-view", cameras=tuple(make_camera_ring(1, cfg.theta_dim)))
        mv_prior = None

    conditional = None
    if cfg.reference is not None:
        ref = _resolve_reference(cfg, prior, seed)
        conditional = condition(prior, ref, cfg.ip_scale, cfg.posterior_temperature)

    return Problem(
        prior=prior, rmap=rmap, sched=sched, trange=trange,
        conditional=conditional, mv_prior=mv_prior, uncond=uncond,
    )


def theta0_of(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.theta0 is None:
        return np.zeros(cfg.theta_dim)
    return np.array(cfg.theta0, dtype=np.float64)


def eval_theta_of(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.eval_theta is None:
        return np.zeros(cfg.theta_dim)
    return np.array(cfg.eval_theta, dtype=np.float64)


def run_config_from(
    cfg: ExperimentConfig, seed: int, spec: EstimatorSpec | None = None,
    problem: Problem | None = None,
) -> RunConfig:
    if spec is None:
        spec = cfg.estimator
    if spec is None:
        raise ConfigError("estimator: missing required section for a run")
    if problem is None:
        problem = build_problem(cfg, seed)
    return RunConfig(
        problem=problem,
        spec=spec,
        theta0=theta0_of(cfg),
        iterations=cfg.iterations,
        learning_rate=cfg.learning_rate,
        moment_decay=cfg.moment_decay,
        epsilon=cfg.epsilon,
        seed=seed,
        trace_stride=cfg.trace_stride,
    )


def target_component(problem: Problem) -> int | None:
    """The component a conditioned run is steered toward (argmax posterior)."""
    if problem.conditional is None:
        return None
    return int(np.argmax(problem.conditional.conditioned_weights))
