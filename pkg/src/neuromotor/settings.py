"""
Run configuration.

Defaults live in ``config/defaults.yaml``; CLI flags and ad-hoc dictionaries are
deep-merged on top and validated into a single :class:`RunConfig`.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Literal, Optional

import psutil
import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from neuromotor.errors import ConfigError

CONFIG_DIR = Path(__file__).parent / "config"
DEFAULTS_FILE = CONFIG_DIR / "defaults.yaml"
STAGES_FILE = CONFIG_DIR / "stages.yaml"

WORKERS_ENV = "NEUROMOTOR_WORKERS"
STAGE_ORDER = ("validate", "dsp", "sync", "metrics", "synergy", "hmm", "stats", "plot-data")


class FilterSettings(BaseModel):
    low_hz: float = Field(default=30.0, gt=0, description="Lower band-pass cutoff.")
    high_hz: float = Field(default=450.0, gt=0, description="Upper band-pass cutoff.")
    order: int = Field(default=4, ge=1, description="Butterworth design order.")
    causal: bool = Field(default=False, description="Single forward pass instead of zero-phase.")

    @model_validator(mode="after")
    def _band_ordered(self):
        if not self.low_hz < self.high_hz:
            raise ValueError(f"low_hz {self.low_hz} must be below high_hz {self.high_hz}")
        return self


class EnvelopeSettings(BaseModel):
    rms_window: int = Field(default=400, ge=1, description="RMS window length in samples.")


class SyncSettings(BaseModel):
    epsilon_frac: float = Field(
        default=0.02, gt=0, lt=1, description="Subtask dead band as a fraction of peak target speed."
    )
    align_threshold_ms: float = Field(default=1.0, gt=0, description="Nearest-neighbour match limit.")

    @property
    def align_threshold(self) -> float:
        return self.align_threshold_ms / 1000.0


class MetricsSettings(BaseModel):
    rmse_mode: Literal["stacked", "norm-diff"] = "stacked"


class SynergySettings(BaseModel):
    max_k: int = Field(default=8, ge=1, le=8)
    restarts: int = Field(default=20, ge=1, description="NMF random restarts per rank.")
    max_iter: int = Field(default=500, ge=1)
    tol: float = Field(default=1e-6, ge=0)
    vaf_threshold: float = Field(default=0.90, gt=0, lt=1)
    vaf_increment: float = Field(default=0.03, gt=0, lt=1)
    procedures: list[Literal[1, 2, 3]] = Field(default_factory=lambda: [1, 2, 3])
    clusters: list[int] = Field(default_factory=lambda: list(range(1, 9)))
    kmeans_restarts: int = Field(default=10, ge=1)
    kmeans_max_iter: int = Field(default=300, ge=1)
    top_n: Optional[int] = Field(default=None, ge=1, description="Procedure 2 selection; k* when unset.")
    segment_mode: Literal["direction", "repetition"] = "direction"

    @field_validator("clusters")
    @classmethod
    def _positive_clusters(cls, value: list[int]) -> list[int]:
        if not value or min(value) < 1:
            raise ValueError("cluster counts must be positive")
        return sorted(set(value))


class HmmSettings(BaseModel):
    states: int = Field(default=2, ge=2, le=2, description="Only two-state models are supported.")
    restarts: int = Field(default=25, ge=1)
    max_iter: int = Field(default=200, ge=1)
    tol: float = Field(default=1e-4, ge=0)
    variance_floor: float = Field(default=1e-6, gt=0)
    covariance: Literal["diag", "full"] = "diag"
    decimate: int = Field(default=1, ge=1, description="Keep every n-th envelope sample before fitting.")


class RunConfig(BaseModel):
    manifest: Optional[Path] = None
    out: Optional[Path] = None
    stages: list[str] = Field(default_factory=lambda: list(STAGE_ORDER))
    seed: int = Field(default=0, ge=0, lt=2**64)
    workers: Optional[int] = Field(default=None, ge=1)
    filter: FilterSettings = Field(default_factory=FilterSettings)
    envelope: EnvelopeSettings = Field(default_factory=EnvelopeSettings)
    sync: SyncSettings = Field(default_factory=SyncSettings)
    metrics: MetricsSettings = Field(default_factory=MetricsSettings)
    synergy: SynergySettings = Field(default_factory=SynergySettings)
    hmm: HmmSettings = Field(default_factory=HmmSettings)

    @field_validator("stages")
    @classmethod
    def _known_stages(cls, value: list[str]) -> list[str]:
        unknown = sorted(set(value) - set(STAGE_ORDER))
        if unknown:
            raise ValueError(f"unknown stages {unknown}; choose from {list(STAGE_ORDER)}")
        return [stage for stage in STAGE_ORDER if stage in value]

    def resolved_workers(self) -> int:
        return self.workers or default_workers()

    def provenance(self) -> dict[str, Any]:
        """Everything that influences results; output location and parallelism are excluded."""
        return self.model_dump(mode="json", exclude={"out", "workers"})


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
        if value < 1:
            raise ConfigError(f"{WORKERS_ENV} must be positive, got {value}")
        return value
    return psutil.cpu_count(logical=False) or 1


def _deep_merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None and key in merged:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_yaml(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return data


def load_config(overrides: Optional[dict] = None, config_file: Optional[Path] = None) -> RunConfig:
    """Build a RunConfig from packaged defaults, an optional YAML file and overrides.

    ``None`` values in ``overrides`` never replace a default, so argparse
    namespaces can be passed through without filtering.
    """
    data = read_yaml(DEFAULTS_FILE)
    if config_file is not None:
        data = _deep_merge(data, read_yaml(Path(config_file)))
    if overrides:
        data = _deep_merge(data, overrides)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_stage_catalog() -> dict[str, dict]:
    catalog = read_yaml(STAGES_FILE)
    missing = [stage for stage in STAGE_ORDER if stage not in catalog]
    if missing:
        raise ConfigError(f"stage catalogue lacks {missing}")
    return catalog
