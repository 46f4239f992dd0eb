"""Experiment configuration: YAML file validated into pydantic models."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import Anomaly, SynthSpec

STRATEGIES = ("no-curriculum", "random", "stl", "loss", "knn", "kde", "convex-value", "convex-rank", "grid")
SCHEDULES = ("one-pass", "baby-steps")

CONFIG_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AnomalyConfig(_Strict):
    start: int
    end: int
    kind: Literal["spike", "shift"] = "spike"
    magnitude: float = 6.0


class SyntheticConfig(_Strict):
    T: int = Field(540, ge=2)
    C: int = Field(2, ge=1)
    period: int = Field(24, ge=2)
    amplitude: float = 1.0
    trend: float = 0.002
    noise_std: float = Field(0.1, ge=0)
    seed: int = 0
    anomalies: list[AnomalyConfig] = []

    def to_spec(self) -> SynthSpec:
        return SynthSpec(T=self.T, C=self.C, period=self.period, amplitude=self.amplitude, trend=self.trend,
                         noise_std=self.noise_std, seed=self.seed,
                         anomalies=tuple(Anomaly(**a.model_dump()) for a in self.anomalies))


class DatasetConfig(_Strict):
    name: str = "synthetic"
    source: Literal["synthetic", "csv"] = "synthetic"
    path: Optional[str] = None
    target_channels: list[str] = []
    lookback: int = Field(12, ge=1)
    horizon: int = Field(4, ge=1)
    stride: int = Field(1, ge=1)
    subsample: Optional[int] = Field(None, ge=1)
    seasonal_period: int = Field(24, ge=2)
    sample_period: str = "1h"
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    synthetic: SyntheticConfig = SyntheticConfig()

    @field_validator("ratios")
    @classmethod
    def _ratios(cls, v):
        if any(r <= 0 for r in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("ratios must be positive and sum to 1")
        return v

    @model_validator(mode="after")
    def _source(self):
        if self.source == "csv" and not self.path:
            raise ValueError("csv source requires 'path'")
        return self


class SearchSpace(_Strict):
    hidden_dim: list[int] = [32, 64, 128]
    lr: tuple[float, float] = (1e-4, 5e-3)

    @field_validator("lr")
    @classmethod
    def _lr(cls, v):
        if not 0 < v[0] <= v[1]:
            raise ValueError("lr range must satisfy 0 < low <= high")
        return v


class RepresentationConfig(_Strict):
    kind: Literal["lstm", "attention"] = "lstm"
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(8, ge=1)
    hidden_dim: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    search_space: SearchSpace = SearchSpace()


class StrategiesConfig(_Strict):
    names: list[str] = list(STRATEGIES)
    knn_percentile: tuple[float, float] = (10.0, 90.0)
    kde_bandwidth_scale: tuple[float, float] = (0.25, 4.0)
    alpha: tuple[float, float] = (0.0, 1.0)
    density_estimators: list[Literal["knn", "kde"]] = ["knn", "kde"]
    grid_bins: list[int] = [3, 4, 5, 6, 8]

    @field_validator("names")
    @classmethod
    def _names(cls, v):
        bad = [n for n in v if n not in STRATEGIES]
        if bad:
            raise ValueError(f"unknown strategies {bad}; choose from {list(STRATEGIES)}")
        if len(set(v)) != len(v):
            raise ValueError("duplicate strategy names")
        return v

    @field_validator("knn_percentile")
    @classmethod
    def _pct(cls, v):
        if not 0 < v[0] <= v[1] < 100:
            raise ValueError("percentile range must lie inside (0, 100)")
        return v

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, v):
        if not 0 <= v[0] <= v[1] <= 1:
            raise ValueError("alpha range must lie inside [0, 1]")
        return v

    @field_validator("grid_bins")
    @classmethod
    def _bins(cls, v):
        if not v or min(v) < 2:
            raise ValueError("grid bins must be >= 2")
        return v


class ScheduleConfig(_Strict):
    schedules: list[Literal["one-pass", "baby-steps"]] = list(SCHEDULES)
    K: int = Field(5, ge=1)
    epochs_per_stage: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, ge=0)
    model: Literal["lstm", "attention"] = "attention"
    hidden_dim: int = Field(32, ge=1)
    clip_max_norm: float = Field(1.0, gt=0)
    warm_start: bool = False


class SearchConfig(_Strict):
    trials: int = Field(30, ge=1)
    seed: int = 42


class EvaluationConfig(_Strict):
    seeds: int = Field(10, ge=1)
    workers: int = Field(1, ge=1)


class OutputConfig(_Strict):
    dir: str = "results"


class ExperimentConfig(_Strict):
    dataset: list[DatasetConfig] = [DatasetConfig()]
    representation: RepresentationConfig = RepresentationConfig()
    strategies: StrategiesConfig = StrategiesConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    search: SearchConfig = SearchConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    output: OutputConfig = OutputConfig()

    @field_validator("dataset", mode="before")
    @classmethod
    def _one_or_many(cls, v):
        if isinstance(v, dict):
            return [v]
        return v

    @model_validator(mode="after")
    def _unique_names(self):
        names = [d.name for d in self.dataset]
        if len(set(names)) != len(names):
            raise ValueError("dataset names must be unique")
        if not self.dataset:
            raise ValueError("at least one dataset is required")
        return self


def _format_error(err: ValidationError, source: str) -> str:
    first = err.errors()[0]
    loc = ".".join(str(p) for p in first["loc"]) or "<root>"
    return f"{source}: invalid config at '{loc}': {first['msg']}"


def parse_config(doc: dict | None, source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc or {})
    except ValidationError as err:
        raise ConfigError(_format_error(err, source)) from None


def load_config(path_or_name: str | Path | None) -> ExperimentConfig:
    """Load a YAML config; the names ``default`` and ``smoke`` refer to shipped files."""
    if path_or_name is None:
        path_or_name = "default"
    p = Path(path_or_name)
    if not p.exists() and (CONFIG_DIR / f"{path_or_name}.yaml").exists():
        p = CONFIG_DIR / f"{path_or_name}.yaml"
    if not p.exists():
        raise ConfigError(f"config not found: {path_or_name}")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: cannot parse YAML: {exc}") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return parse_config(doc, str(p))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
