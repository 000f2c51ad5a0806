"""Empirical duration distributions: sample sets, histograms, fits and pdf models.

Holding times (ages) and lifespans are both non-negative durations.  The
holding-time pdf ``f`` and lifespan pdf ``p`` are linked through the hazard
rate ``p/S = -f'/f``; :func:`lifespan_from_holding` and
:func:`holding_from_lifespan` convert one into the other on a grid.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import integrate, stats

from .errors import (
    DegenerateSamplesError,
    DivergentAtZeroError,
    InsufficientBinsError,
    ZeroDensityError,
)

TIME_UNITS = ("iteration", "second", "day")
MAX_AUTO_BINS = 20_000


# --------------------------------------------------------------------------- #
# Samples and histograms
# --------------------------------------------------------------------------- #
@dataclass(frozen=True, eq=False)
class SampleSet:
    """Duration observations with an optional weight per observation.

    Weights act as frequency multipliers (e.g. coin amounts for ledger data).
    """

    values: np.ndarray
    time_unit: str = "iteration"
    weights: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(values)):
            raise DegenerateSamplesError("sample values must be finite")
        if np.any(values < 0):
            raise DegenerateSamplesError("durations must be non-negative")
        if self.time_unit not in TIME_UNITS:
            raise ValueError(f"unknown time unit {self.time_unit!r}; expected one of {TIME_UNITS}")
        object.__setattr__(self, "values", values)
        if self.weights is not None:
            weights = np.asarray(self.weights, dtype=float).ravel()
            if weights.shape != values.shape:
                raise ValueError("weights must have the same length as values")
            if np.any(weights < 0) or not np.all(np.isfinite(weights)):
                raise ValueError("weights must be finite and non-negative")
            if len(weights) and weights.sum() <= 0:
                raise ValueError("weights must have a positive sum")
            object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum()) if self.weights is not None else float(len(self.values))

    @property
    def effective_size(self) -> float:
        """Kish effective sample size; equals ``len`` when unweighted."""
        if self.weights is None:
            return float(len(self.values))
        w = self.weights
        return float(w.sum() ** 2 / np.sum(w * w))

    def mean(self) -> float:
        if len(self.values) == 0:
            raise DegenerateSamplesError("no samples")
        return float(np.average(self.values, weights=self.weights))

    def take(self, index) -> SampleSet:
        """Subset by integer index array."""
        weights = None if self.weights is None else self.weights[index]
        return SampleSet(self.values[index], self.time_unit, weights)

    def is_integral(self) -> bool:
        return bool(np.all(self.values == np.floor(self.values)))


@dataclass(frozen=True)
class FixedWidth:
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("bin width must be positive")


@dataclass(frozen=True)
class LogBins:
    n_bins: int

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")


Binning = Union[str, FixedWidth, LogBins]


def parse_binning(text: str | Binning) -> Binning:
    """Parse ``auto``, ``width:W`` or ``log:N`` into a binning policy."""
    if not isinstance(text, str):
        return text
    text = text.strip().lower()
    if text == "auto":
        return "auto"
    kind, _, arg = text.partition(":")
    if kind in ("width", "fixed") and arg:
        return FixedWidth(float(arg))
    if kind == "log" and arg:
        return LogBins(int(arg))
    raise ValueError(f"cannot parse binning {text!r}; use auto, width:W or log:N")


@dataclass(frozen=True, eq=False)
class Histogram:
    """Binned density estimate.

    ``counts`` hold weighted counts and ``raw_counts`` the number of samples
    per bin.  For log-scaled bins the bin centre is the geometric mean of the
    edges (of the first and last integer for integer-aligned bins).
    """

    bin_edges: np.ndarray
    densities: np.ndarray
    counts: np.ndarray | None = None
    total_weight: float = 1.0
    scale: str = "linear"
    discrete: bool = False
    raw_counts: np.ndarray | None = None

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=float)
        dens = np.asarray(self.densities, dtype=float)
        if edges.ndim != 1 or len(edges) < 2:
            raise ValueError("need at least two bin edges")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if dens.shape != (len(edges) - 1,):
            raise ValueError("len(densities) must equal len(bin_edges) - 1")
        if np.any(dens < 0):
            raise ValueError("densities must be non-negative")
        counts = dens * np.diff(edges) if self.counts is None else np.asarray(self.counts, dtype=float)
        if self.raw_counts is not None:
            raw = np.asarray(self.raw_counts, dtype=float)
        else:
            # sample counts unknown for a bare density table: never filter
            raw = counts if self.counts is not None else np.full(len(dens), np.inf)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "densities", dens)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "raw_counts", raw)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    @property
    def centers(self) -> np.ndarray:
        lo, hi = self.bin_edges[:-1], self.bin_edges[1:]
        if self.scale == "log":
            if self.discrete:
                return np.sqrt(lo * (hi - 1.0))
            return np.sqrt(lo * hi)
        return 0.5 * (lo + hi)

    def integral(self) -> float:
        return float(np.sum(self.densities * self.widths))

    def to_dict(self) -> dict:
        return {
            "bin_edges": self.bin_edges.tolist(),
            "densities": self.densities.tolist(),
            "counts": self.counts.tolist(),
        }


def _weighted_quantile(values: np.ndarray, weights: np.ndarray | None, qs) -> np.ndarray:
    if weights is None:
        return np.quantile(values, qs)
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    cum = np.cumsum(w) - 0.5 * w
    return np.interp(np.asarray(qs) * w.sum(), cum, v)


def _auto_width(samples: SampleSet, integral: bool) -> float:
    # Freedman-Diaconis
    v = samples.values
    q25, q75 = _weighted_quantile(v, samples.weights, [0.25, 0.75])
    span = float(v.max() - v.min())
    width = 2.0 * (q75 - q25) * len(v) ** (-1.0 / 3.0)
    if width <= 0:
        width = span / max(math.sqrt(len(v)), 1.0)
    width = max(width, span / MAX_AUTO_BINS)
    if integral:
        width = max(1.0, float(round(width)))
    return width


def build_histogram(samples: SampleSet, binning: Binning = "auto") -> Histogram:
    """Normalized density histogram of ``samples``.

    Log binning covers the positive values only (zero durations are dropped)
    and, for integer data, uses integer-aligned edges.
    """
    binning = parse_binning(binning)
    v = samples.values
    if len(v) == 0 or len(np.unique(v)) < 2:
        raise DegenerateSamplesError("need at least 2 distinct sample values to build a histogram")
    integral = samples.is_integral()
    w = samples.weights

    if isinstance(binning, LogBins):
        keep = v > 0
        v = v[keep]
        w = None if w is None else w[keep]
        if len(v) == 0 or v.min() == v.max():
            raise DegenerateSamplesError("log binning needs at least 2 distinct positive values")
        lo, hi = float(v.min()), float(v.max())
        if integral:
            edges = np.unique(np.floor(np.geomspace(lo, hi + 1.0, binning.n_bins + 1)))
        else:
            edges = np.geomspace(lo, hi, binning.n_bins + 1)
            edges[0], edges[-1] = lo, hi
        scale = "log"
    else:
        width = binning.width if isinstance(binning, FixedWidth) else _auto_width(samples, integral)
        start = math.floor(v.min() / width) * width
        n_bins = int(math.floor((v.max() - start) / width)) + 1
        edges = start + width * np.arange(n_bins + 1)
        scale = "linear"

    counts, _ = np.histogram(v, bins=edges, weights=w)
    raw, _ = np.histogram(v, bins=edges) if w is not None else (counts, None)
    total = float(counts.sum())
    if total <= 0:
        raise DegenerateSamplesError("no weight falls inside the histogram range")
    with np.errstate(over="ignore", divide="ignore"):
        dens = counts / (total * np.diff(edges))
    if not np.all(np.isfinite(dens)):
        raise DegenerateSamplesError("value range too narrow to bin")
    return Histogram(edges, dens, counts.astype(float), total, scale, integral and scale == "log", raw.astype(float))


# --------------------------------------------------------------------------- #
# Fits
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class ExponentialFit:
    """Exponential pdf fit ``f(x) = intercept * exp(-rate * x)``.

    For ``method="mle"`` the intercept equals the rate.  ``flags`` records
    problems such as a non-decaying log-linear slope; a flagged fit is still
    returned so the caller can inspect it.
    """

    rate: float
    intercept: float
    r_squared: float | None
    method: str
    rate_stderr: float | None = None
    intercept_stderr: float | None = None
    n_bins: int | None = None
    flags: tuple[str, ...] = ()

    @property
    def flagged(self) -> bool:
        return bool(self.flags)

    def model(self) -> ExponentialPdf:
        if self.rate <= 0:
            raise DegenerateSamplesError(f"fit is not decaying (rate={self.rate:g})")
        return ExponentialPdf(self.rate, self.intercept)

    def to_dict(self) -> dict:
        params = {"rate": self.rate, "intercept": self.intercept}
        if self.rate_stderr is not None:
            params["rate_stderr"] = self.rate_stderr
        if self.intercept_stderr is not None:
            params["intercept_stderr"] = self.intercept_stderr
        return {
            "kind": "exponential",
            "method": self.method,
            "params": params,
            "r_squared": self.r_squared,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class PowerLawFit:
    """Power-law fit ``f(x) = prefactor * x**(-exponent)`` for x >= xmin."""

    exponent: float
    prefactor: float
    xmin: float
    r_squared: float
    exponent_stderr: float | None = None
    n_bins: int | None = None
    flags: tuple[str, ...] = ()

    @property
    def flagged(self) -> bool:
        return bool(self.flags)

    def model(self) -> PowerLawPdf:
        return PowerLawPdf(self.prefactor, self.exponent, self.xmin)

    def to_dict(self) -> dict:
        params = {"exponent": self.exponent, "prefactor": self.prefactor}
        if self.exponent_stderr is not None:
            params["exponent_stderr"] = self.exponent_stderr
        return {
            "kind": "power-law",
            "params": params,
            "r_squared": self.r_squared,
            "xmin": self.xmin,
            "flags": list(self.flags),
        }


Fit = Union[ExponentialFit, PowerLawFit]


def fit_from_dict(data: dict) -> Fit:
    """Inverse of ``to_dict`` for both fit kinds."""
    params = data["params"]
    flags = tuple(data.get("flags", ()))
    if data["kind"] == "exponential":
        return ExponentialFit(
            rate=float(params["rate"]),
            intercept=float(params["intercept"]),
            r_squared=data.get("r_squared"),
            method=data.get("method", "mle"),
            rate_stderr=params.get("rate_stderr"),
            intercept_stderr=params.get("intercept_stderr"),
            flags=flags,
        )
    if data["kind"] == "power-law":
        return PowerLawFit(
            exponent=float(params["exponent"]),
            prefactor=float(params["prefactor"]),
            xmin=float(data["xmin"]),
            r_squared=float(data["r_squared"]),
            exponent_stderr=params.get("exponent_stderr"),
            flags=flags,
        )
    raise ValueError(f"unknown fit kind {data['kind']!r}")


def _r_squared(observed: np.ndarray, predicted: np.ndarray) -> float:
    ss_tot = float(np.sum((observed - observed.mean()) ** 2))
    if ss_tot == 0:
        return 0.0
    ss_res = float(np.sum((observed - predicted) ** 2))
    return min(1.0, max(0.0, 1.0 - ss_res / ss_tot))


def fit_exponential_mle(samples: SampleSet, binning: Binning = "auto") -> ExponentialFit:
    """Maximum-likelihood exponential fit: rate = 1 / (weighted mean).

    ``r_squared`` compares the fitted pdf with the histogram of the same
    samples on the density scale; it is ``None`` when no histogram can be
    built (e.g. all samples equal).
    """
    if len(samples) < 2:
        raise DegenerateSamplesError("need at least 2 samples for an exponential fit")
    mean = samples.mean()
    if mean <= 0:
        raise DegenerateSamplesError("all samples are zero; exponential rate is undefined")
    rate = 1.0 / mean
    try:
        hist = build_histogram(samples, binning)
    except DegenerateSamplesError:
        r2 = None
    else:
        r2 = _r_squared(hist.densities, rate * np.exp(-rate * hist.centers))
    return ExponentialFit(
        rate=rate,
        intercept=rate,
        r_squared=r2,
        method="mle",
        rate_stderr=rate / math.sqrt(samples.effective_size),
        intercept_stderr=rate / math.sqrt(samples.effective_size),
    )


def _usable_bins(hist: Histogram, min_count: float) -> np.ndarray:
    return (hist.densities > 0) & (hist.raw_counts >= min_count)


def fit_exponential_loglinear(hist: Histogram, min_count: float = 1) -> ExponentialFit:
    """OLS of log-density on bin centre over bins with positive density.

    ``min_count`` additionally drops bins holding fewer samples.
    """
    mask = _usable_bins(hist, min_count)
    if mask.sum() < 3:
        raise InsufficientBinsError(f"need >= 3 positive-density bins, have {int(mask.sum())}")
    x = hist.centers[mask]
    y = np.log(hist.densities[mask])
    reg = stats.linregress(x, y)
    flags = ("non-decaying",) if reg.slope >= 0 else ()
    intercept = math.exp(reg.intercept)
    return ExponentialFit(
        rate=-float(reg.slope),
        intercept=intercept,
        r_squared=float(reg.rvalue**2),
        method="log-linear",
        rate_stderr=float(reg.stderr),
        intercept_stderr=intercept * float(reg.intercept_stderr),
        n_bins=int(mask.sum()),
        flags=flags,
    )


def default_xmin(hist: Histogram) -> float:
    centers = hist.centers[(hist.densities > 0) & (hist.centers >= 1.0)]
    if len(centers) == 0:
        raise InsufficientBinsError("no positive-density bin centred at or above 1 time unit")
    return float(centers.min())


def fit_powerlaw_loglog(hist: Histogram, xmin: float | None = None, min_count: float = 1) -> PowerLawFit:
    """OLS of log-density on log bin centre for bins centred at or above ``xmin``."""
    if xmin is None:
        xmin = default_xmin(hist)
    if not xmin > 0:
        raise ValueError("xmin must be positive")
    mask = _usable_bins(hist, min_count) & (hist.centers >= xmin)
    if mask.sum() < 3:
        raise InsufficientBinsError(f"need >= 3 positive-density bins at or above xmin, have {int(mask.sum())}")
    reg = stats.linregress(np.log(hist.centers[mask]), np.log(hist.densities[mask]))
    flags = ("non-decaying",) if reg.slope >= 0 else ()
    return PowerLawFit(
        exponent=-float(reg.slope),
        prefactor=math.exp(reg.intercept),
        xmin=float(xmin),
        r_squared=float(reg.rvalue**2),
        exponent_stderr=float(reg.stderr),
        n_bins=int(mask.sum()),
        flags=flags,
    )


def fit_plot_csv(hist: Histogram, fit: Fit) -> str:
    """CSV ``bin_center,density,fitted_density`` for plotting."""
    centers = hist.centers
    if isinstance(fit, PowerLawFit):
        fitted = np.where(centers >= fit.xmin, fit.prefactor * centers ** (-fit.exponent), np.nan)
    else:
        fitted = fit.intercept * np.exp(-fit.rate * centers)
    buf = io.StringIO()
    buf.write("bin_center,density,fitted_density\n")
    for c, d, f in zip(centers, hist.densities, fitted):
        buf.write(f"{float(c)!r},{float(d)!r},{'' if np.isnan(f) else repr(float(f))}\n")
    return buf.getvalue()


# --------------------------------------------------------------------------- #
# Pdf models
# --------------------------------------------------------------------------- #
class PdfModel:
    """Common interface of the analytic and tabulated duration pdfs."""

    kind: str = ""

    def pdf(self, x):
        raise NotImplementedError

    def derivative(self, x, order: int = 1):
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def sf(self, x):
        return 1.0 - self.cdf(x)

    def hazard(self, x):
        f = np.asarray(self.pdf(x), dtype=float)
        if np.any(f <= 0):
            raise ZeroDensityError("density is zero where the hazard was requested")
        return -np.asarray(self.derivative(x, 1), dtype=float) / f

    def support_max(self) -> float:
        """Largest x at which the model is considered to carry mass."""
        raise NotImplementedError


@dataclass(frozen=True)
class ExponentialPdf(PdfModel):
    """``f(x) = amplitude * exp(-rate * x)``; amplitude defaults to rate."""

    rate: float
    amplitude: float | None = None
    kind = "exponential"

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if self.amplitude is None:
            object.__setattr__(self, "amplitude", float(self.rate))

    def pdf(self, x):
        return self.amplitude * np.exp(-self.rate * np.asarray(x, dtype=float))

    def derivative(self, x, order: int = 1):
        return (-self.rate) ** order * self.pdf(x)

    def cdf(self, x):
        return -(self.amplitude / self.rate) * np.expm1(-self.rate * np.asarray(x, dtype=float))

    def sf(self, x):
        if self.amplitude == self.rate:
            return np.exp(-self.rate * np.asarray(x, dtype=float))
        return super().sf(x)

    def hazard(self, x):
        return np.full(np.shape(x), float(self.rate)) if np.ndim(x) else float(self.rate)

    def support_max(self) -> float:
        return 40.0 / self.rate


@dataclass(frozen=True)
class PowerLawPdf(PdfModel):
    """``f(x) = prefactor * x**(-exponent)`` on ``x >= xmin``."""

    prefactor: float
    exponent: float
    xmin: float = 1.0
    kind = "power-law"

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise DivergentAtZeroError("a power law diverges at x = 0")
        return self.prefactor * x ** (-self.exponent)

    def derivative(self, x, order: int = 1):
        coeff = 1.0
        for k in range(order):
            coeff *= -(self.exponent + k)
        return coeff * self.pdf(x) / np.asarray(x, dtype=float) ** order

    def cdf(self, x):
        """Mass between ``xmin`` and ``x``."""
        x = np.maximum(np.asarray(x, dtype=float), self.xmin)
        if self.exponent == 1:
            return self.prefactor * np.log(x / self.xmin)
        a = 1.0 - self.exponent
        return self.prefactor * (x**a - self.xmin**a) / a

    def hazard(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise DivergentAtZeroError("a power law diverges at x = 0")
        return self.exponent / x

    def support_max(self) -> float:
        return math.inf


@dataclass(frozen=True, eq=False)
class TabulatedPdf(PdfModel):
    """Pdf given on a strictly increasing grid, linearly interpolated.

    ``deficit`` is the probability mass missing beyond the grid end and
    ``truncated`` marks a survival function that reached zero inside the grid.
    Derivatives use central differences with second-order one-sided stencils
    at the boundaries.
    """

    x: np.ndarray
    f: np.ndarray
    deficit: float = 0.0
    truncated: bool = False
    kind = "tabulated"
    _grads: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        f = np.asarray(self.f, dtype=float)
        if x.ndim != 1 or len(x) < 2:
            raise ValueError("tabulated grid needs at least 2 points")
        if np.any(np.diff(x) <= 0):
            raise ValueError("tabulated grid must be strictly increasing")
        if f.shape != x.shape:
            raise ValueError("grid and values differ in length")
        if np.any(f < 0):
            raise ValueError("pdf values must be non-negative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "f", f)

    @classmethod
    def from_histogram(cls, hist: Histogram) -> TabulatedPdf:
        """Tabulate densities at bin centres, prepending f(0) by linear extrapolation."""
        x, f = hist.centers, hist.densities
        if x[0] > 0:
            slope = (f[1] - f[0]) / (x[1] - x[0]) if len(x) > 1 else 0.0
            f0 = max(f[0] - slope * x[0], 0.0)
            x, f = np.concatenate([[0.0], x]), np.concatenate([[f0], f])
        return cls(x, f)

    def _grad(self, order: int) -> np.ndarray:
        if order not in self._grads:
            g = self.f if order == 0 else np.gradient(self._grad(order - 1), self.x, edge_order=2 if len(self.x) > 2 else 1)
            self._grads[order] = g
        return self._grads[order]

    def pdf(self, x):
        return np.interp(x, self.x, self.f, left=np.nan, right=0.0)

    def derivative(self, x, order: int = 1):
        return np.interp(x, self.x, self._grad(order), left=np.nan, right=0.0)

    def cdf(self, x):
        cum = integrate.cumulative_trapezoid(self.f, self.x, initial=0.0)
        return np.interp(x, self.x, cum, left=0.0, right=cum[-1])

    def support_max(self) -> float:
        return float(self.x[-1])


def hazard(model: PdfModel, x):
    """Hazard rate ``-f'(x)/f(x)`` of a holding-time pdf."""
    return model.hazard(x)


def _grid(grid: Sequence[float]) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or len(g) < 2:
        raise ValueError("grid needs at least 2 points")
    if g[0] != 0:
        raise ValueError("grid must start at 0")
    if np.any(np.diff(g) <= 0):
        raise ValueError("grid must be strictly increasing")
    return g


def lifespan_from_holding(model: PdfModel, grid: Sequence[float]) -> TabulatedPdf:
    """Lifespan pdf ``p = h * S`` with ``S = exp(-int_0^x h)`` and ``h = -f'/f``.

    The mass beyond the grid end, ``S(grid[-1])``, is stored as ``deficit``.
    Negative hazards, which arise from noise in empirical tables, are clipped
    to zero.
    """
    g = _grid(grid)
    h = np.maximum(np.asarray(hazard(model, g), dtype=float), 0.0)
    cum = integrate.cumulative_trapezoid(h, g, initial=0.0)
    surv = np.exp(-cum)
    return TabulatedPdf(g, h * surv, deficit=float(surv[-1]))


def holding_from_lifespan(model: PdfModel, grid: Sequence[float]) -> TabulatedPdf:
    """Holding-time pdf ``f = f(0) * exp(-int_0^x p/S)`` normalized to unit mass.

    Mass beyond the grid end is accounted for by extending the last hazard
    value as a constant.  If ``S`` reaches zero inside the grid, ``f`` is zero
    from there on and the result is flagged ``truncated``.
    """
    g = _grid(grid)
    p = np.asarray(model.pdf(g), dtype=float)
    surv = np.asarray(model.sf(g), dtype=float)
    alive = surv > 0
    truncated = not bool(alive.all())
    n_alive = int(np.argmin(alive)) if truncated else len(g)

    h = np.zeros_like(g)
    h[:n_alive] = p[:n_alive] / surv[:n_alive]
    cum = np.full_like(g, np.inf)
    cum[:n_alive] = integrate.cumulative_trapezoid(h[:n_alive], g[:n_alive], initial=0.0)
    shape = np.exp(-cum)

    mass = integrate.simpson(shape, x=g)
    if not truncated and h[-1] > 0:
        mass += shape[-1] / h[-1]
    f = shape / mass
    return TabulatedPdf(g, f, truncated=truncated)
