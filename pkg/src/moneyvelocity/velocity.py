"""Velocity-of-money estimators.

All estimators return a :class:`VelocityEstimate` in units of 1 / time unit of
the input.  The ground truth is ``volume / (money_supply * window)``; the
distribution-based estimators use the holding-time pdf's value at zero, its
decay rate, a Taylor-corrected value at zero, or the mean lifespan.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    ExponentialFit,
    PdfModel,
    PowerLawFit,
    PowerLawPdf,
    SampleSet,
)
from .errors import ConditionViolatedError, DegenerateSamplesError, DivergentAtZeroError

MAX_CORRECTION_ORDER = 5
TAIL_TOLERANCE = 1e-3

METHODS = ("ground-truth", "f0", "exponent", "corrected", "lifespan-mean")


@dataclass(frozen=True)
class VelocityEstimate:
    value: float
    method: str
    inputs_digest: str = ""
    stderr: float | None = None
    terms: tuple[float, ...] = ()
    order: int | None = None
    delta_t: float | None = None
    trend_proxy: bool = False

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"velocity must be finite, got {self.value}")
        if self.method not in METHODS:
            raise ValueError(f"unknown velocity method {self.method!r}")

    def to_dict(self) -> dict:
        out = {"value": self.value, "method": self.method}
        if self.stderr is not None:
            out["stderr"] = self.stderr
        if self.method == "corrected":
            out["order"] = self.order
            out["delta_t"] = self.delta_t
            out["terms"] = list(self.terms)
        if self.trend_proxy:
            out["trend_proxy"] = True
        if self.inputs_digest:
            out["inputs"] = self.inputs_digest
        return out


@dataclass(frozen=True)
class CorrectionParams:
    """Settings for the Taylor-corrected estimator.

    ``derivative_source="finite-difference"`` evaluates f^(i)(0) by forward
    differences with step ``step``; otherwise the model's own derivatives are
    used.  ``x_max`` is where the vanishing-tail condition is checked
    (defaults to the model's support end).
    """

    delta_t: float = 1.0
    order: int = 1
    derivative_source: str = "analytic"
    step: float | None = None
    x_max: float | None = None
    check_tail: bool = True

    def __post_init__(self):
        if not self.delta_t > 0:
            raise ValueError("delta_t must be positive")
        if not 1 <= self.order <= MAX_CORRECTION_ORDER:
            raise ValueError(f"order must be in 1..{MAX_CORRECTION_ORDER}")
        if self.derivative_source not in ("analytic", "finite-difference"):
            raise ValueError("derivative_source must be 'analytic' or 'finite-difference'")
        if self.derivative_source == "finite-difference" and not (self.step and self.step > 0):
            raise ValueError("finite-difference derivatives need a positive step")


def ground_truth(volume: float, money_supply: float, window: float, inputs_digest: str = "") -> VelocityEstimate:
    if money_supply <= 0:
        raise ValueError("money supply must be positive")
    if window <= 0:
        raise ValueError("window must be positive")
    return VelocityEstimate(volume / (money_supply * window), "ground-truth", inputs_digest)


def velocity_from_f0(fit: ExponentialFit | PdfModel, inputs_digest: str = "") -> VelocityEstimate:
    """V = f(0)."""
    if isinstance(fit, (PowerLawFit, PowerLawPdf)):
        raise DivergentAtZeroError("f(0) diverges for a power law; use velocity_from_exponent")
    if isinstance(fit, ExponentialFit):
        if fit.flagged:
            raise DegenerateSamplesError(f"fit is flagged: {', '.join(fit.flags)}")
        return VelocityEstimate(fit.intercept, "f0", inputs_digest, stderr=fit.intercept_stderr)
    value = float(fit.pdf(0.0))
    if not math.isfinite(value):
        raise DivergentAtZeroError("model has no finite value at zero")
    return VelocityEstimate(value, "f0", inputs_digest)


def velocity_from_exponent(fit: ExponentialFit | PowerLawFit, inputs_digest: str = "") -> VelocityEstimate:
    """Decay rate of an exponential fit, or the power-law exponent as a trend proxy."""
    if fit.flagged:
        raise DegenerateSamplesError(f"fit is flagged: {', '.join(fit.flags)}")
    if isinstance(fit, PowerLawFit):
        return VelocityEstimate(fit.exponent, "exponent", inputs_digest, stderr=fit.exponent_stderr, trend_proxy=True)
    return VelocityEstimate(fit.rate, "exponent", inputs_digest, stderr=fit.rate_stderr)


def _forward_difference(model: PdfModel, order: int, step: float) -> float:
    # order-th forward difference at 0
    k = np.arange(order + 1)
    coeffs = np.array([(-1) ** (order - j) * math.comb(order, j) for j in k], dtype=float)
    return float(np.dot(coeffs, model.pdf(k * step)) / step**order)


def derivatives_at_zero(model: PdfModel, order: int, params: CorrectionParams) -> list[float]:
    """[f(0), f'(0), ..., f^(order)(0)]."""
    if isinstance(model, PowerLawPdf):
        raise DivergentAtZeroError("power-law derivatives diverge at zero")
    out = [float(model.pdf(0.0))]
    for i in range(1, order + 1):
        if params.derivative_source == "finite-difference":
            out.append(_forward_difference(model, i, params.step))
        else:
            out.append(float(model.derivative(0.0, i)))
    if not all(math.isfinite(d) for d in out):
        raise DivergentAtZeroError("model derivatives are not finite at zero")
    return out


def velocity_corrected(model: PdfModel, params: CorrectionParams, inputs_digest: str = "") -> VelocityEstimate:
    """V = f(0) - sum_{i=1}^{n-1} dt^i / (i+1)! * f^(i)(0).

    ``terms`` holds each subtracted quantity ``dt^i/(i+1)! * f^(i)(0)``.
    Requires ``|f^(i)(x_max)| < 1e-3 * |f^(i)(0)|`` for every i < n.
    """
    n = params.order
    derivs = derivatives_at_zero(model, n - 1, params)
    if params.check_tail and n > 1:
        x_max = params.x_max if params.x_max is not None else model.support_max()
        for i in range(1, n):
            tail = abs(float(model.derivative(x_max, i)))
            if not tail < TAIL_TOLERANCE * abs(derivs[i]):
                raise ConditionViolatedError(
                    f"|f^({i})(x_max={x_max:g})| = {tail:g} does not vanish relative to |f^({i})(0)| = {abs(derivs[i]):g}"
                )
    terms = tuple(params.delta_t**i / math.factorial(i + 1) * derivs[i] for i in range(1, n))
    value = derivs[0] - sum(terms)
    return VelocityEstimate(value, "corrected", inputs_digest, terms=terms, order=n, delta_t=params.delta_t)


def velocity_from_lifespans(samples: SampleSet, inputs_digest: str = "") -> VelocityEstimate:
    """1 / (weighted mean lifespan); stderr by the delta method."""
    positive = samples.values > 0
    if positive.sum() < 2:
        raise DegenerateSamplesError("need at least 2 positive lifespans")
    mean = samples.mean()
    w = samples.weights
    var = float(np.average((samples.values - mean) ** 2, weights=w))
    n_eff = samples.effective_size
    stderr = math.sqrt(var / n_eff) / mean**2 if n_eff > 1 else None
    return VelocityEstimate(1.0 / mean, "lifespan-mean", inputs_digest, stderr=stderr)
