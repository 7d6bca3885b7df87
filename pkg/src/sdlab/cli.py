"""Experiment front end: run, variance, ablate, and janus subcommands.

Outputs are written atomically (complete or absent) and contain no
wall-clock or environment data, so a rerun with the same config and seed
produces byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    build_problem,
    eval_theta_of,
    parse_config,
    run_config_from,
    target_component,
)
from .estimators import EstimatorSpec, Problem
from .runner import (
    RunTrace,
    mode_distance,
    mode_separation,
    optimize,
    oscillation_metrics,
    view_consistency_error,
)
from .stats import bucketwise_le, compare_estimators, report_rows, report_summary
from . import presets

IP_SCALE_SWEEP = (0.0, 0.2, 0.5, 0.7, 1.0)

CONTROL_VARIATE_SWEEP = (
    ("rand-noise-cfg-7.5", EstimatorSpec(kind="ip_sds", cfg_scale=7.5, ip_scale=0.5)),
    ("rand-noise-cfg-100", EstimatorSpec(kind="ip_sds", cfg_scale=100.0, ip_scale=0.5)),
    ("surrogate", EstimatorSpec(kind="ip_vsd", cfg_scale=7.5, ip_scale=0.5)),
    ("shifted-t", EstimatorSpec(kind="t_shift", cfg_scale=7.5, ip_scale=0.5, delta_t=50)),
    ("base-same-t", EstimatorSpec(kind="isd", cfg_scale=7.5, ip_scale=0.5)),
)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, doc: dict):
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]):
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    _atomic_write(path, buf.getvalue())


def _parallel_map(fn, items, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _trace_rows(trace: RunTrace) -> tuple[list[str], list[list]]:
    d = trace.final_theta.size
    header = ["iteration", *(f"theta_{i}" for i in range(d)), "grad_norm",
              "alpha", "beta", "mode", "responsibility"]
    rows = []
    for r in trace.records:
        rows.append([
            r.iteration,
            *(float(v) for v in r.theta),
            float(r.grad_norm),
            "" if r.alpha is None else float(r.alpha),
            "" if r.beta is None else float(r.beta),
            r.mode,
            float(r.responsibility),
        ])
    return header, rows


def _run_metrics(problem: Problem, trace: RunTrace) -> dict:
    target = target_component(problem)
    dist = mode_distance(trace.final_theta, problem.prior, problem.rmap, target=target)
    switches, window = oscillation_metrics(trace)
    norms = [r.grad_norm for r in trace.records]
    metrics = {
        "final_theta": [float(v) for v in trace.final_theta],
        "final_mode": trace.records[-1].mode,
        "final_responsibility": float(trace.records[-1].responsibility),
        "target_component": target,
        "mode_distance": dist,
        "normalized_mode_distance": dist / mode_separation(problem.prior),
        "switches": switches,
        "stability_window": window,
        "records": len(trace.records),
        "mean_grad_norm": float(np.mean(norms)),
        "max_grad_norm": float(np.max(norms)),
        "aborted": trace.aborted,
        "abort_reason": trace.abort_reason,
    }
    if problem.mv_prior is not None:
        metrics["view_consistency_error"] = view_consistency_error(
            trace.final_theta, problem.mv_prior, problem.rmap
        )
    return metrics


def _single_run(cfg: ExperimentConfig, seed: int, spec: EstimatorSpec | None = None):
    problem = build_problem(cfg, seed)
    trace = optimize(run_config_from(cfg, seed, spec=spec, problem=problem))
    return problem, trace


def cmd_run(cfg: ExperimentConfig, out: Path, threads: int = 1) -> int:
    """One optimization run per seed; writes trace.csv and summary.json each."""

    def one(seed: int):
        problem, trace = _single_run(cfg, seed)
        run_dir = out / cfg.name / str(seed)
        header, rows = _trace_rows(trace)
        _write_csv(run_dir / "trace.csv", header, rows)
        summary = {
            "experiment": cfg.name,
            "seed": seed,
            "config": cfg.to_dict(),
            **_run_metrics(problem, trace),
        }
        _write_json(run_dir / "summary.json", summary)
        return trace.aborted

    aborted = _parallel_map(one, list(cfg.seeds), threads)
    return 1 if any(aborted) else 0


def _merge_benchmark(user: ExperimentConfig, bench: ExperimentConfig) -> ExperimentConfig:
    return dataclasses.replace(
        user,
        name=bench.name,
        prior=bench.prior,
        reference=bench.reference,
        ip_scale=bench.ip_scale,
        posterior_temperature=bench.posterior_temperature,
        render_kind="identity",
        theta_dim=bench.theta_dim,
        views=1,
        theta0=None,
        eval_theta=bench.eval_theta,
    )


def cmd_variance(cfg: ExperimentConfig, out: Path, threads: int = 1) -> int:
    """Compare the configured estimators across the ten committed benchmarks."""
    if cfg.estimators is None:
        raise ConfigError("estimators: missing required list for the variance command")
    seed = cfg.seeds[0]

    def one(bench: ExperimentConfig):
        merged = _merge_benchmark(cfg, bench)
        problem = build_problem(merged, seed)
        report = compare_estimators(
            list(cfg.estimators), problem, eval_theta_of(merged), cfg.draws, seed,
            buckets=cfg.buckets,
        )
        bench_dir = out / cfg.name / bench.name
        rows = [[r["estimator"], r["draw"], r["t"], r["grad_norm"]]
                for r in report_rows(report)]
        _write_csv(bench_dir / "draws.csv", ["estimator", "draw", "t", "grad_norm"], rows)
        summary = report_summary(report)
        summary["benchmark"] = bench.name
        _write_json(bench_dir / "summary.json", summary)

        orderings = {}
        labels = report.labels
        if "isd" in labels and "ip_sds" in labels:
            orderings["isd_le_ip_sds_all_buckets"] = bucketwise_le(
                report.stats_for("isd"), report.stats_for("ip_sds")
            )
        if "sds" in labels and "sds_nocv" in labels:
            a, b = report.stats_for("sds"), report.stats_for("sds_nocv")
            orderings["sds_le_sds_nocv"] = bool(np.all(a.var <= b.var))
        return bench.name, orderings, summary["verdicts"]

    results = _parallel_map(one, presets.load_benchmarks(), threads)
    benchmarks = {name: {"orderings": orderings, "verdicts": verdicts}
                  for name, orderings, verdicts in results}
    counts = {}
    for key in ("isd_le_ip_sds_all_buckets", "sds_le_sds_nocv"):
        vals = [b["orderings"][key] for b in benchmarks.values() if key in b["orderings"]]
        if vals:
            counts[key] = {"holds": int(sum(vals)), "total": len(vals)}
    _write_json(out / cfg.name / "verdicts.json", {
        "seed": seed,
        "draws": cfg.draws,
        "buckets": cfg.buckets,
        "benchmarks": benchmarks,
        "counts": counts,
    })
    return 0


def cmd_ablate(cfg: ExperimentConfig, which: str, out: Path, threads: int = 1) -> int:
    """Sweep either the blend scale or the control-variate family."""
    if which == "ip-scale":
        settings = [
            (f"ip-{lam:.1f}", EstimatorSpec(kind="isd", cfg_scale=7.5, ip_scale=lam))
            for lam in IP_SCALE_SWEEP
        ]
    elif which == "control-variate":
        settings = list(CONTROL_VARIATE_SWEEP)
    else:
        raise ConfigError(f"ablate: unknown sweep {which!r}; "
                          "expected 'ip-scale' or 'control-variate'")
    if cfg.reference is None:
        raise ConfigError("reference: ablation sweeps need a conditioned benchmark")

    def one(item):
        label, spec = item
        per_seed = []
        for seed in cfg.seeds:
            problem, trace = _single_run(cfg, seed, spec=spec)
            per_seed.append(_run_metrics(problem, trace))
        return label, per_seed

    results = _parallel_map(one, settings, threads)
    header = ["setting", "median_mode_distance", "median_normalized_mode_distance",
              "median_switches", "mean_grad_norm", "max_grad_norm"]
    rows = []
    table = {}
    for label, per_seed in results:
        row = {
            "median_mode_distance": float(np.median([m["mode_distance"] for m in per_seed])),
            "median_normalized_mode_distance": float(
                np.median([m["normalized_mode_distance"] for m in per_seed])
            ),
            "median_switches": float(np.median([m["switches"] for m in per_seed])),
            "mean_grad_norm": float(np.mean([m["mean_grad_norm"] for m in per_seed])),
            "max_grad_norm": float(np.max([m["max_grad_norm"] for m in per_seed])),
        }
        table[label] = {**row, "per_seed": per_seed}
        rows.append([label, *(row[k] for k in header[1:])])
    sweep_dir = out / cfg.name / f"ablate-{which}"
    _write_csv(sweep_dir / "summary.csv", header, rows)
    _write_json(sweep_dir / "summary.json", {
        "sweep": which,
        "seeds": list(cfg.seeds),
        "config": cfg.to_dict(),
        "settings": table,
    })
    return 0


def cmd_janus(cfg: ExperimentConfig, out: Path, threads: int = 1) -> int:
    """Paired guided-only vs combined runs on the ring-camera setup."""
    if cfg.views < 2:
        raise ConfigError("render.views: the janus experiment needs a multi-view setup "
                          "(views >= 2)")
    if cfg.reference is None:
        raise ConfigError("reference: the janus experiment needs a conditioned oracle")
    base_spec = cfg.estimator
    if base_spec is not None and base_spec.kind == "combined":
        combined_spec = base_spec
    else:
        combined_spec = EstimatorSpec(
            kind="combined",
            cfg_scale=7.5 if base_spec is None else base_spec.cfg_scale,
            ip_scale=cfg.ip_scale,
            combine=(0.4, 0.8, 0.6, 0.02),
        )
    isd_spec = EstimatorSpec(
        kind="isd", cfg_scale=combined_spec.cfg_scale, ip_scale=combined_spec.ip_scale
    )

    def one(seed: int):
        problem = build_problem(cfg, seed)
        tr_isd = optimize(run_config_from(cfg, seed, spec=isd_spec, problem=problem))
        tr_comb = optimize(run_config_from(cfg, seed, spec=combined_spec, problem=problem))
        e_isd = view_consistency_error(tr_isd.final_theta, problem.mv_prior, problem.rmap)
        e_comb = view_consistency_error(tr_comb.final_theta, problem.mv_prior, problem.rmap)
        return seed, e_isd, e_comb

    results = _parallel_map(one, list(cfg.seeds), threads)
    rows = [[seed, e_isd, e_comb, int(e_comb < e_isd)] for seed, e_isd, e_comb in results]
    wins = sum(r[3] for r in rows)
    a0, a1, b0, b1 = combined_spec.combine
    summary = {
        "experiment": cfg.name,
        "seeds": list(cfg.seeds),
        "config": cfg.to_dict(),
        "alpha_schedule": [a0, a1],
        "beta_schedule": [b0, b1],
        "pairs": len(rows),
        "combined_wins": wins,
        "win_fraction": wins / len(rows),
        "pass_90pct": bool(wins >= int(np.ceil(0.9 * len(rows)))),
        "mean_isd_error": float(np.mean([r[1] for r in rows])),
        "mean_combined_error": float(np.mean([r[2] for r in rows])),
    }
    try:
        thresholds = presets.janus_thresholds()
        summary["calibration"] = {
            "e_hi": thresholds["e_hi"],
            "e_lo": thresholds["e_lo"],
            "isd_above_e_hi": bool(summary["mean_isd_error"] > thresholds["e_hi"]),
            "combined_below_e_lo": bool(summary["mean_combined_error"] < thresholds["e_lo"]),
        }
    except FileNotFoundError:
        summary["calibration"] = None
    exp_dir = out / cfg.name
    _write_csv(exp_dir / "pairs.csv",
               ["seed", "isd_error", "combined_error", "combined_win"], rows)
    _write_json(exp_dir / "summary.json", summary)
    return 0


def _parse_seeds(text: str) -> tuple[int, ...]:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return tuple(seeds)


def _load(args) -> ExperimentConfig:
    if args.preset and args.config:
        raise ConfigError("config: give either --config or --preset, not both")
    if args.preset:
        cfg = presets.load_preset(args.preset)
    elif args.config:
        cfg = parse_config(args.config)
    else:
        raise ConfigError("config: one of --config or --preset is required")
    if args.seeds:
        cfg = dataclasses.replace(cfg, seeds=_parse_seeds(args.seeds))
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sdlab",
        description="Score-distillation estimator lab over analytic mixture priors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("run", "optimize the configured estimator, one run per seed"),
        ("variance", "paired estimator comparison across the committed benchmarks"),
        ("ablate", "blend-scale or control-variate sweep"),
        ("janus", "paired guided-only vs combined runs on the camera ring"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", type=Path, help="experiment config (YAML)")
        p.add_argument("--preset", help="packaged preset name")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seeds", help="seed list like 0,1,2 or 0-49 (overrides config)")
        p.add_argument("--threads", type=int, default=1, help="parallel fan-out width")
        if name == "ablate":
            p.add_argument("--which", required=True,
                           choices=["ip-scale", "control-variate"])
    args = parser.parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "run":
            return cmd_run(cfg, args.out, threads=args.threads)
        if args.command == "variance":
            return cmd_variance(cfg, args.out, threads=args.threads)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.which, args.out, threads=args.threads)
        return cmd_janus(cfg, args.out, threads=args.threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
