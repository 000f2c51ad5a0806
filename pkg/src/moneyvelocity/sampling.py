"""Partial-data study: velocity estimates from random subsamples of holding times."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    Binning,
    SampleSet,
    build_histogram,
    fit_exponential_loglinear,
    fit_exponential_mle,
    parse_binning,
)
from .errors import ConfigError, InsufficientDataError
from .velocity import VelocityEstimate

DEFAULT_RATIOS = (0.015, 0.03, 0.05, 0.1, 0.2, 0.3)
ESTIMATORS = ("f0", "exponent", "lifespan-mean")
MIN_SUBSAMPLE = 100


@dataclass(frozen=True)
class StudyConfig:
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    repetitions: int = 10
    estimator: str = "exponent"
    rng_seed: int = 0
    binning: Binning = "auto"
    min_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(sorted(float(r) for r in self.ratios)))
        object.__setattr__(self, "binning", parse_binning(self.binning))
        if not self.ratios:
            raise ConfigError("at least one ratio is required")
        if any(not 0 < r <= 1 for r in self.ratios):
            raise ConfigError("every ratio must lie in (0, 1]")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")


@dataclass(frozen=True)
class StudyRow:
    ratio: float
    mean_velocity: float
    std_velocity: float
    n_samples: int
    estimates: tuple[float, ...] = field(default=(), repr=False)


@dataclass(frozen=True)
class StudyResult:
    rows: tuple[StudyRow, ...]
    baseline: VelocityEstimate
    estimator: str = "exponent"

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "baseline": self.baseline.to_dict(),
            "rows": [
                {
                    "ratio": r.ratio,
                    "mean_velocity": r.mean_velocity,
                    "std_velocity": r.std_velocity,
                    "n_samples": r.n_samples,
                    "estimates": list(r.estimates),
                }
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def estimate_velocity(samples: SampleSet, estimator: str, binning: Binning = "auto", min_count: int = 1) -> float:
    """Single velocity estimate from a sample set."""
    if estimator == "exponent":
        return fit_exponential_mle(samples, binning).rate
    if estimator == "f0":
        return fit_exponential_loglinear(build_histogram(samples, binning), min_count).intercept
    if estimator == "lifespan-mean":
        return 1.0 / samples.mean()
    raise ConfigError(f"unknown estimator {estimator!r}")


def substream(seed: int, ratio: float, rep: int) -> np.random.Generator:
    """Independent generator keyed by (seed, ratio, repetition)."""
    return np.random.default_rng(np.random.SeedSequence([seed, int(round(ratio * 1e9)), rep]))


def subsample(samples: SampleSet, size: int, rng: np.random.Generator) -> SampleSet:
    """``size`` samples drawn without replacement, kept in original order."""
    n = len(samples)
    if size >= n:
        return samples
    idx = np.sort(rng.choice(n, size, replace=False))
    return samples.take(idx)


def run_study(
    samples: SampleSet,
    baseline: VelocityEstimate,
    config: StudyConfig,
    max_workers: int | None = None,
) -> StudyResult:
    n = len(samples)
    smallest = int(np.floor(min(config.ratios) * n))
    if smallest < MIN_SUBSAMPLE:
        raise InsufficientDataError(
            f"smallest subsample has {smallest} samples; need at least {MIN_SUBSAMPLE}"
        )

    def one(key):
        ratio, rep = key
        sub = subsample(samples, int(np.floor(ratio * n)), substream(config.rng_seed, ratio, rep))
        return estimate_velocity(sub, config.estimator, config.binning, config.min_count)

    keys = [(r, k) for r in config.ratios for k in range(config.repetitions)]
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            values = dict(zip(keys, pool.map(one, keys)))
    else:
        values = {key: one(key) for key in keys}

    rows = []
    for r in config.ratios:
        est = np.array([values[(r, k)] for k in range(config.repetitions)])
        std = float(est.std(ddof=1)) if len(est) > 1 else 0.0
        rows.append(StudyRow(r, float(est.mean()), std, int(np.floor(r * n)), tuple(float(e) for e in est)))
    return StudyResult(tuple(rows), baseline, config.estimator)


def emit_study_csv(result: StudyResult) -> str:
    """CSV ``ratio,mean,std,n,baseline`` in ascending ratio order."""
    if not result.rows:
        raise ValueError("empty study result")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["ratio", "mean", "std", "n", "baseline"])
    for row in sorted(result.rows, key=lambda r: r.ratio):
        writer.writerow([repr(row.ratio), repr(row.mean_velocity), repr(row.std_velocity), row.n_samples, repr(result.baseline.value)])
    return buf.getvalue()
