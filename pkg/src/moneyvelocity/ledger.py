"""UTXO-style ledger ingestion and per-period velocity reports.

Each transaction line is a JSON object::

    {"tx_id": "...", "timestamp": 1650000000,
     "inputs": [{"amount": 7, "created_at": 1649990000}],
     "outputs": [{"amount": 7}]}

A spent input's holding time is ``timestamp - created_at``; it is counted with
weight ``amount`` in the period containing ``timestamp``.
"""
from __future__ import annotations

import calendar
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping

import numpy as np

from .distributions import (
    Binning,
    Histogram,
    LogBins,
    PowerLawFit,
    SampleSet,
    build_histogram,
    fit_plot_csv,
    fit_powerlaw_loglog,
    parse_binning,
)
from .errors import ConfigError, DegenerateSamplesError, LedgerValidationError
from .velocity import VelocityEstimate, ground_truth

SECONDS = {"second": 1, "day": 86_400}
DEFAULT_START = 1_640_995_200  # 2022-01-01T00:00:00Z


@dataclass(frozen=True)
class TxInput:
    amount: int
    created_at: int


@dataclass(frozen=True)
class LedgerTx:
    tx_id: str
    timestamp: int
    inputs: tuple[TxInput, ...]
    outputs: tuple[int, ...]

    @property
    def input_total(self) -> int:
        return sum(i.amount for i in self.inputs)

    @property
    def output_total(self) -> int:
        return sum(self.outputs)

    def to_dict(self) -> dict:
        return {
            "tx_id": self.tx_id,
            "timestamp": self.timestamp,
            "inputs": [{"amount": i.amount, "created_at": i.created_at} for i in self.inputs],
            "outputs": [{"amount": a} for a in self.outputs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


@dataclass
class ParseStats:
    lines: int = 0
    parsed: int = 0
    skipped: int = 0
    errors: list[LedgerValidationError] = field(default_factory=list)


def _int_field(obj: Mapping, key: str, where: str) -> int:
    if key not in obj:
        raise ValueError(f"{where}: missing {key!r}")
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ValueError(f"{where}: {key!r} must be an integer")
    return val


def parse_tx(obj, line_no: int = 0) -> LedgerTx:
    """Validate one decoded transaction object."""
    try:
        if not isinstance(obj, dict):
            raise ValueError("transaction must be a JSON object")
        tx_id = obj.get("tx_id")
        if not isinstance(tx_id, str):
            raise ValueError("'tx_id' must be a string")
        ts = _int_field(obj, "timestamp", "transaction")
        raw_in, raw_out = obj.get("inputs"), obj.get("outputs")
        if not isinstance(raw_in, list) or not raw_in:
            raise ValueError("'inputs' must be a non-empty list")
        if not isinstance(raw_out, list):
            raise ValueError("'outputs' must be a list")
        inputs = []
        for k, item in enumerate(raw_in):
            if not isinstance(item, dict):
                raise ValueError(f"input {k} must be an object")
            amount = _int_field(item, "amount", f"input {k}")
            created = _int_field(item, "created_at", f"input {k}")
            if amount <= 0:
                raise ValueError(f"input {k}: amount must be positive")
            if created > ts:
                raise ValueError(f"input {k}: created_at {created} is after timestamp {ts}")
            inputs.append(TxInput(amount, created))
        outputs = []
        for k, item in enumerate(raw_out):
            if not isinstance(item, dict):
                raise ValueError(f"output {k} must be an object")
            amount = _int_field(item, "amount", f"output {k}")
            if amount <= 0:
                raise ValueError(f"output {k}: amount must be positive")
            outputs.append(amount)
        tx = LedgerTx(tx_id, ts, tuple(inputs), tuple(outputs))
        if tx.output_total > tx.input_total:
            raise ValueError(f"outputs ({tx.output_total}) exceed inputs ({tx.input_total})")
    except ValueError as exc:
        raise LedgerValidationError(line_no, f"{obj.get('tx_id', '?') if isinstance(obj, dict) else '?'}: {exc}") from None
    return tx


def parse_ledger(stream: Iterable[str], strict: bool = True, stats: ParseStats | None = None) -> Iterator[LedgerTx]:
    """Yield validated transactions from JSON lines.

    In strict mode the first bad line raises :class:`LedgerValidationError`;
    otherwise bad lines are skipped and recorded in ``stats``.  Blank lines
    are ignored.
    """
    stats = stats if stats is not None else ParseStats()
    for line_no, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        stats.lines += 1
        try:
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LedgerValidationError(line_no, f"invalid JSON: {exc.msg}") from None
            tx = parse_tx(obj, line_no)
        except LedgerValidationError as err:
            if strict:
                raise
            stats.skipped += 1
            stats.errors.append(err)
            continue
        stats.parsed += 1
        yield tx


# --------------------------------------------------------------------------- #
# Bucketing by period
# --------------------------------------------------------------------------- #
def period_of(timestamp: int, period: str | int) -> tuple[str, int, int]:
    """(label, start, length) in seconds of the period holding ``timestamp``."""
    if period == "month":
        d = datetime.fromtimestamp(timestamp, tz=timezone.utc)
        start = int(datetime(d.year, d.month, 1, tzinfo=timezone.utc).timestamp())
        days = calendar.monthrange(d.year, d.month)[1]
        return f"{d.year:04d}-{d.month:02d}", start, days * 86_400
    if period == "day":
        start = timestamp - timestamp % 86_400
        label = datetime.fromtimestamp(start, tz=timezone.utc).strftime("%Y-%m-%d")
        return label, start, 86_400
    if isinstance(period, int) and not isinstance(period, bool) and period > 0:
        start = timestamp - timestamp % period
        return str(start), start, period
    raise ConfigError(f"period must be 'month', 'day' or a positive number of seconds, got {period!r}")


@dataclass
class PeriodBucket:
    label: str
    start: int
    length_seconds: int
    ages: list = field(default_factory=list)
    amounts: list = field(default_factory=list)
    volume: int = 0
    n_tx: int = 0

    def samples(self, time_unit: str = "day") -> SampleSet:
        scale = SECONDS[time_unit]
        return SampleSet(np.asarray(self.ages, dtype=float) / scale, time_unit, np.asarray(self.amounts, dtype=float))

    def length(self, time_unit: str = "day") -> float:
        return self.length_seconds / SECONDS[time_unit]


def bucket_ledger(txs: Iterable[LedgerTx], period: str | int = "month", volume_cap: int | None = None) -> dict[str, PeriodBucket]:
    """One pass over ``txs``; buckets ordered by period start.

    With ``volume_cap`` set, transactions whose input total exceeds the cap
    still contribute holding samples but are left out of the volume.
    """
    buckets: dict[str, PeriodBucket] = {}
    for tx in txs:
        label, start, length = period_of(tx.timestamp, period)
        b = buckets.get(label)
        if b is None:
            b = buckets[label] = PeriodBucket(label, start, length)
        b.n_tx += 1
        for inp in tx.inputs:
            b.ages.append(tx.timestamp - inp.created_at)
            b.amounts.append(inp.amount)
        total = tx.input_total
        if volume_cap is None or total <= volume_cap:
            b.volume += total
    return dict(sorted(buckets.items(), key=lambda kv: kv[1].start))


def holding_times_by_period(txs: Iterable[LedgerTx], period: str | int = "month", time_unit: str = "day") -> dict[str, SampleSet]:
    """Amount-weighted spent-input ages per spend period."""
    return {label: b.samples(time_unit) for label, b in bucket_ledger(txs, period).items()}


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class FitConfig:
    binning: Binning = LogBins(30)
    xmin: float | None = None
    min_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "binning", parse_binning(self.binning))


@dataclass(frozen=True, eq=False)
class PeriodReport:
    period: str
    holding_samples: SampleSet
    volume: float
    supply: float
    period_length: float
    ground_truth_velocity: VelocityEstimate
    regression_velocity: VelocityEstimate
    fit: PowerLawFit
    histogram: Histogram
    flags: tuple[str, ...] = ()

    def row(self) -> dict:
        return {
            "period": self.period,
            "volume": self.volume,
            "supply": self.supply,
            "ground_truth_v": self.ground_truth_velocity.value,
            "regression_v": self.regression_velocity.value,
            "alpha": self.fit.exponent,
            "r2": self.fit.r_squared,
            "n_samples": len(self.holding_samples),
        }


def period_report(
    bucket: SampleSet,
    volume: float,
    supply: float,
    period_length: float,
    fit_config: FitConfig = FitConfig(),
    period: str = "",
) -> PeriodReport:
    """Ground-truth velocity and power-law regression velocity of one period."""
    if len(bucket) == 0:
        raise DegenerateSamplesError(f"period {period or '?'} has no holding samples")
    if supply <= 0:
        raise ConfigError("supply must be positive")
    gt = ground_truth(volume, supply, period_length, inputs_digest=period)
    hist = build_histogram(bucket, fit_config.binning)
    fit = fit_powerlaw_loglog(hist, fit_config.xmin, fit_config.min_count)
    reg = VelocityEstimate(fit.exponent, "exponent", period, stderr=fit.exponent_stderr, trend_proxy=True)
    return PeriodReport(period, bucket, volume, supply, period_length, gt, reg, fit, hist, fit.flags)


def subsample(samples: SampleSet, ratio: float, rng: np.random.Generator) -> SampleSet:
    if not 0 < ratio <= 1:
        raise ConfigError("sample ratio must lie in (0, 1]")
    n = len(samples)
    size = max(1, int(math.floor(ratio * n)))
    if size >= n:
        return samples
    return samples.take(np.sort(rng.choice(n, size, replace=False)))


def ingest(
    txs: Iterable[LedgerTx],
    supply: float | Mapping[str, float],
    period: str | int = "month",
    fit_config: FitConfig = FitConfig(),
    time_unit: str = "day",
    sample_ratio: float = 1.0,
    seed: int = 0,
    volume_cap: int | None = None,
) -> list[PeriodReport]:
    """Bucket a ledger and build one report per period.

    ``sample_ratio < 1`` fits each period on a random subsample of its holding
    samples (volume is always taken from the full data).
    """
    buckets = bucket_ledger(txs, period, volume_cap)
    reports = []
    for k, (label, b) in enumerate(buckets.items()):
        samples = b.samples(time_unit)
        if sample_ratio < 1:
            rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
            samples = subsample(samples, sample_ratio, rng)
        sup = supply[label] if isinstance(supply, Mapping) else supply
        reports.append(period_report(samples, b.volume, sup, b.length(time_unit), fit_config, label))
    return reports


REPORT_COLUMNS = ("period", "volume", "supply", "ground_truth_v", "regression_v", "alpha", "r2", "n_samples")


def reports_csv(reports: Iterable[PeriodReport]) -> str:
    buf = io.StringIO()
    buf.write(",".join(REPORT_COLUMNS) + "\n")
    for r in reports:
        row = r.row()
        buf.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in REPORT_COLUMNS) + "\n")
    return buf.getvalue()


def write_reports(reports: list[PeriodReport], outdir: str | Path) -> list[Path]:
    """periods.csv plus one ``hist_<period>.csv`` per period."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / "periods.csv"
    path.write_text(reports_csv(reports))
    paths = [path]
    for r in reports:
        p = outdir / f"hist_{r.period}.csv"
        p.write_text(fit_plot_csv(r.histogram, r.fit))
        paths.append(p)
    return paths


def cross_check_creation_times(txs: list[LedgerTx]) -> dict:
    """Match every input's (created_at, amount) against an output of a ledger transaction.

    Inputs created before the first ledger timestamp are counted as external.
    Each output can back at most one input.
    """
    if not txs:
        return {"matched": 0, "external": 0, "unmatched": []}
    first = min(tx.timestamp for tx in txs)
    available = Counter((tx.timestamp, a) for tx in txs for a in tx.outputs)
    matched, external, unmatched = 0, 0, []
    for tx in txs:
        for k, inp in enumerate(tx.inputs):
            if inp.created_at < first:
                external += 1
                continue
            key = (inp.created_at, inp.amount)
            if available[key] > 0:
                available[key] -= 1
                matched += 1
            else:
                unmatched.append((tx.tx_id, k))
    return {"matched": matched, "external": external, "unmatched": unmatched}


# --------------------------------------------------------------------------- #
# Synthetic ledgers
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class SyntheticLedgerConfig:
    """Coins respent at random intervals (durations in days).

    ``mode="exponential"`` uses a Poisson spend process with rate ``rate``, or
    ``monthly_rates[k]`` during the k-th calendar month from ``start``.
    ``mode="heavy-tail"`` draws intervals from a power law with exponent
    ``alpha`` (or ``monthly_alphas[k]`` for intervals starting in month k) on
    [``xmin``, ``xmax``].  Both start in the stationary state so
    the first spend already has an ordinary holding time.
    """

    n_coins: int = 1000
    rate: float = 0.1
    duration: float = 90.0
    supply: int | None = None
    seed: int = 0
    mode: str = "exponential"
    monthly_rates: tuple[float, ...] | None = None
    alpha: float = 1.6
    monthly_alphas: tuple[float, ...] | None = None
    xmin: float = 0.1
    xmax: float = 3650.0
    start: int = DEFAULT_START

    def validate(self) -> None:
        if self.n_coins < 1:
            raise ConfigError("n_coins must be positive")
        if self.duration < 0:
            raise ConfigError("duration must be non-negative")
        if self.supply is not None and self.supply < self.n_coins:
            raise ConfigError("supply must be at least n_coins (every coin holds >= 1 unit)")
        if self.mode == "exponential":
            rates = self.monthly_rates or (self.rate,)
            if any(not r > 0 for r in rates):
                raise ConfigError("rates must be positive")
        elif self.mode == "heavy-tail":
            alphas = self.monthly_alphas or (self.alpha,)
            if not (all(a > 1 for a in alphas) and 0 < self.xmin < self.xmax):
                raise ConfigError("heavy-tail mode needs alpha > 1 and 0 < xmin < xmax")
        else:
            raise ConfigError("mode must be 'exponential' or 'heavy-tail'")

    @property
    def total_supply(self) -> int:
        return self.supply if self.supply is not None else 100 * self.n_coins


def _month_knots(start: int, duration_days: float) -> np.ndarray:
    """Day offsets of calendar-month starts after ``start`` within the horizon."""
    d = datetime.fromtimestamp(start, tz=timezone.utc)
    knots = [0.0]
    y, m = d.year, d.month
    while True:
        y, m = (y + 1, 1) if m == 12 else (y, m + 1)
        off = (datetime(y, m, 1, tzinfo=timezone.utc).timestamp() - start) / 86_400
        if off >= duration_days:
            break
        knots.append(off)
    return np.asarray(knots)


class _PiecewiseRate:
    def __init__(self, knots: np.ndarray, rates: np.ndarray):
        self.knots = knots
        self.rates = rates
        self.cum = np.concatenate([[0.0], np.cumsum(rates[:-1] * np.diff(knots))])

    def integral(self, t: np.ndarray) -> np.ndarray:
        k = np.searchsorted(self.knots, t, side="right") - 1
        return self.cum[k] + self.rates[k] * (t - self.knots[k])

    def inverse(self, y: np.ndarray) -> np.ndarray:
        k = np.searchsorted(self.cum, y, side="right") - 1
        return self.knots[k] + (y - self.cum[k]) / self.rates[k]


def _pareto(rng, size, alpha, lo, hi):
    b = alpha - 1.0
    u = rng.random(size)
    return lo * (1.0 - u * (1.0 - (lo / hi) ** b)) ** (-1.0 / b)


def _length_biased_pareto(rng, size, alpha, lo, hi):
    # density proportional to x**(1 - alpha) on [lo, hi]
    u = rng.random(size)
    e = 2.0 - alpha
    if abs(e) < 1e-12:
        return lo * (hi / lo) ** u
    return (lo**e + u * (hi**e - lo**e)) ** (1.0 / e)


def generate_synthetic_ledger(config: SyntheticLedgerConfig) -> list[LedgerTx]:
    """Schema-valid transactions, one single-input spend per event, time-ordered."""
    config.validate()
    if config.duration == 0:
        return []
    rng = np.random.default_rng(config.seed)
    n = config.n_coins
    amounts = 1 + rng.multinomial(config.total_supply - n, np.full(n, 1.0 / n))

    knots = _month_knots(config.start, config.duration)
    if config.mode == "exponential":
        rates = np.asarray(config.monthly_rates or (config.rate,), dtype=float)
        per_knot = rates[np.minimum(np.arange(len(knots)), len(rates) - 1)]
        schedule = _PiecewiseRate(knots, per_knot)
        age0 = rng.exponential(1.0 / per_knot[0], n)
        created = -age0
        nxt = schedule.inverse(rng.exponential(1.0, n))
    else:
        alphas = np.asarray(config.monthly_alphas or (config.alpha,), dtype=float)
        per_knot = alphas[np.minimum(np.arange(len(knots)), len(alphas) - 1)]
        length = _length_biased_pareto(rng, n, per_knot[0], config.xmin, config.xmax)
        age0 = rng.random(n) * length
        created = -age0
        nxt = length - age0

    events = []  # (time_days, coin, created_days)
    active = nxt < config.duration
    while active.any():
        idx = np.flatnonzero(active)
        events.append(np.column_stack([nxt[idx], idx, created[idx]]))
        created[idx] = nxt[idx]
        if config.mode == "exponential":
            target = schedule.integral(nxt[idx]) + rng.exponential(1.0, len(idx))
            nxt[idx] = schedule.inverse(target)
        else:
            a = per_knot[np.searchsorted(knots, nxt[idx], side="right") - 1]
            nxt[idx] = nxt[idx] + _pareto(rng, len(idx), a, config.xmin, config.xmax)
        active[idx] = nxt[idx] < config.duration

    if not events:
        return []
    ev = np.concatenate(events)
    ts = config.start + np.floor(ev[:, 0] * 86_400).astype(np.int64)
    cr = config.start + np.floor(ev[:, 2] * 86_400).astype(np.int64)
    coin = ev[:, 1].astype(np.int64)
    order = np.lexsort((coin, ts))
    txs = []
    for k, j in enumerate(order):
        amt = int(amounts[coin[j]])
        txs.append(LedgerTx(f"tx{k:08d}", int(ts[j]), (TxInput(amt, int(cr[j])),), (amt,)))
    return txs


def write_ledger(txs: Iterable[LedgerTx], fh: IO[str]) -> int:
    n = 0
    for tx in txs:
        fh.write(tx.to_json() + "\n")
        n += 1
    return n
