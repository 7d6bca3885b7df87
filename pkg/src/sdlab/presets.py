"""Packaged experiment presets and the committed benchmark suite."""

from __future__ import annotations

import json
from importlib import resources

import yaml

from .config import ExperimentConfig, parse_config

PRESET_NAMES = ("single_gaussian", "two_mode", "variance", "ablate", "janus")
BENCHMARK_NAMES = tuple(f"bench_{i:02d}" for i in range(1, 11))


def _preset_root():
    return resources.files("sdlab") / "presets"


def preset_text(name: str) -> str:
    if name in PRESET_NAMES:
        return (_preset_root() / f"{name}.yaml").read_text()
    if name in BENCHMARK_NAMES:
        return (_preset_root() / "benchmarks" / f"{name}.yaml").read_text()
    raise ValueError(
        f"unknown preset {name!r}; expected one of {PRESET_NAMES + BENCHMARK_NAMES}"
    )


def load_preset(name: str) -> ExperimentConfig:
    return parse_config(yaml.safe_load(preset_text(name)), name_hint=name)


def load_benchmarks() -> list[ExperimentConfig]:
    """The ten committed benchmark priors used by the variance command."""
    return [load_preset(name) for name in BENCHMARK_NAMES]


def janus_thresholds() -> dict:
    """Calibration thresholds recorded from the first committed ring-camera run."""
    return json.loads((_preset_root() / "janus_thresholds.json").read_text())
