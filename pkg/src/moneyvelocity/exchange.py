"""Closed-economy random-exchange simulator with per-unit age tracking.

Money is ``total_money`` indivisible units shared by ``n_agents`` agents.  Each
iteration a random sender/receiver pair trades ``floor(v * (m1 + m2) / 2)``
units, where m1 and m2 are the sender's and receiver's balances.  Every unit
remembers the tick of its last transfer, so holding times (ages) and
lifespans (gaps between consecutive transfers) can be harvested.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .distributions import SampleSet
from .errors import ConfigError, InsufficientDataError

log = logging.getLogger(__name__)

TRANSFER_MODES = ("uniform", "fixed")
UNIT_SELECTIONS = ("random", "oldest-first", "newest-first")


@dataclass(frozen=True)
class SimConfig:
    """Simulation parameters.

    ``transfer_mode="uniform"`` draws v uniformly from (0, 1] for every
    transaction; ``"fixed"`` uses ``v`` throughout.
    """

    n_agents: int = 10_000
    total_money: int = 1_000_000
    transfer_mode: str = "uniform"
    v: float = 1.0
    unit_selection: str = "random"
    burn_in_iterations: int = 10_000
    measure_iterations: int = 40_000
    rng_seed: int = 0
    entropy_stride: int = 1

    def validate(self) -> None:
        if self.n_agents < 2:
            raise ConfigError("need at least 2 agents")
        if self.total_money < 1:
            raise ConfigError("total_money must be positive")
        if self.total_money % self.n_agents:
            raise ConfigError(
                f"total_money ({self.total_money}) must be divisible by n_agents ({self.n_agents})"
            )
        if self.transfer_mode not in TRANSFER_MODES:
            raise ConfigError(f"transfer_mode must be one of {TRANSFER_MODES}")
        if self.transfer_mode == "fixed" and not 0 < self.v <= 1:
            raise ConfigError("fixed v must satisfy 0 < v <= 1")
        if self.unit_selection not in UNIT_SELECTIONS:
            raise ConfigError(f"unit_selection must be one of {UNIT_SELECTIONS}")
        if self.burn_in_iterations < 0:
            raise ConfigError("burn_in_iterations must be >= 0")
        if self.measure_iterations < 1:
            raise ConfigError("measure_iterations must be >= 1")
        if self.entropy_stride < 1:
            raise ConfigError("entropy_stride must be >= 1")

    @property
    def final_tick(self) -> int:
        return self.burn_in_iterations + self.measure_iterations


class SimState:
    """Mutable world state: balances, unit owners and unit birth ticks.

    ``holdings[a]`` lists the unit ids owned by agent ``a``; its length is
    always ``balances[a]``.
    """

    def __init__(self, n_agents: int, total_money: int):
        per_agent = total_money // n_agents
        self.tick = 0
        self.balances = np.full(n_agents, per_agent, dtype=np.int64)
        self.unit_birth = np.zeros(total_money, dtype=np.int64)
        self.unit_owner = np.repeat(np.arange(n_agents, dtype=np.int64), per_agent)
        self.holdings = [np.arange(a * per_agent, (a + 1) * per_agent, dtype=np.int64) for a in range(n_agents)]
        # balance histogram and sum of c*ln(c) over it, for O(1) entropy updates
        self._bal_hist = np.zeros(total_money + 1, dtype=np.int64)
        self._bal_hist[per_agent] = n_agents
        self._clogc = n_agents * math.log(n_agents)

    @classmethod
    def initial(cls, config: SimConfig) -> SimState:
        config.validate()
        return cls(config.n_agents, config.total_money)

    @property
    def n_agents(self) -> int:
        return len(self.balances)

    @property
    def total_money(self) -> int:
        return len(self.unit_birth)

    def ages(self) -> np.ndarray:
        return self.tick - self.unit_birth

    def entropy(self) -> float:
        n = self.n_agents
        return max(0.0, math.log(n) - self._clogc / n)

    def _move_hist(self, old: int, new: int) -> None:
        h = self._bal_hist
        for b, d in ((old, -1), (new, 1)):
            c = h[b]
            if c > 0:
                self._clogc -= c * math.log(c)
            c += d
            h[b] = c
            if c > 0:
                self._clogc += c * math.log(c)

    def check(self) -> None:
        """Assert every state invariant (used by tests)."""
        assert self.balances.sum() == self.total_money
        assert np.all(self.unit_birth >= 0) and np.all(self.unit_birth <= self.tick)
        for a, units in enumerate(self.holdings):
            assert len(units) == self.balances[a]
            assert np.all(self.unit_owner[units] == a)
        owned = np.concatenate(self.holdings)
        assert len(np.unique(owned)) == self.total_money


def _draw_fraction(config: SimConfig, rng: np.random.Generator) -> float:
    if config.transfer_mode == "uniform":
        return 1.0 - rng.random()
    return config.v


def _pick_units(state: SimState, units: np.ndarray, dm: int, selection: str, rng: np.random.Generator) -> np.ndarray:
    if selection == "random":
        return rng.choice(len(units), dm, replace=False)
    order = np.lexsort((units, state.unit_birth[units]))
    if selection == "oldest-first":
        return order[:dm]
    return order[::-1][:dm]


def step(state: SimState, config: SimConfig, rng: np.random.Generator) -> tuple[SimState, int, np.ndarray]:
    """Advance one iteration in place.

    Returns ``(state, transferred, lifespans)``.  A transaction with
    ``dm == 0`` or ``dm`` above the sender's balance is skipped; the tick
    advances either way.
    """
    n = state.n_agents
    sender = int(rng.integers(n))
    receiver = int(rng.integers(n - 1))
    if receiver >= sender:
        receiver += 1
    v = _draw_fraction(config, rng)
    m1 = int(state.balances[sender])
    m2 = int(state.balances[receiver])
    dm = math.floor(0.5 * v * (m1 + m2))
    state.tick += 1
    if dm < 1 or dm > m1:
        return state, 0, np.empty(0, dtype=np.int64)

    units = state.holdings[sender]
    idx = _pick_units(state, units, dm, config.unit_selection, rng)
    moved = units[idx]
    keep = np.ones(len(units), dtype=bool)
    keep[idx] = False
    state.holdings[sender] = units[keep]
    state.holdings[receiver] = np.concatenate([state.holdings[receiver], moved])
    state.unit_owner[moved] = receiver

    lifespans = state.tick - state.unit_birth[moved]
    state.unit_birth[moved] = state.tick

    state.balances[sender] = m1 - dm
    state.balances[receiver] = m2 + dm
    state._move_hist(m1, m1 - dm)
    state._move_hist(m2, m2 + dm)
    return state, dm, lifespans


def entropy(balances) -> float:
    """Shannon entropy of the balance distribution with unit-width bins."""
    b = np.asarray(balances, dtype=np.int64)
    if b.size == 0:
        raise InsufficientDataError("entropy needs at least one agent")
    if np.any(b < 0):
        raise ValueError("balances must be non-negative")
    p = np.bincount(b) / b.size
    p = p[p > 0]
    return float(max(0.0, -np.sum(p * np.log(p))))


def stationarity_reached(entropy_trace, window: int, rel_tol: float) -> bool:
    """True iff the means of the last two disjoint ``window``-point blocks differ by < rel_tol."""
    values = _trace_values(entropy_trace)
    if window < 1 or len(values) < 2 * window:
        raise InsufficientDataError(f"need at least {2 * window} trace points, have {len(values)}")
    last = values[-window:].mean()
    prev = values[-2 * window : -window].mean()
    if prev == 0:
        return bool(last == 0)
    return bool(abs(last - prev) / abs(prev) < rel_tol)


def first_stationary_tick(entropy_trace, window: int, rel_tol: float) -> int | None:
    """Earliest trace tick at which :func:`stationarity_reached` holds on the prefix."""
    trace = np.asarray(entropy_trace, dtype=float)
    values = trace[:, 1]
    csum = np.concatenate([[0.0], np.cumsum(values)])
    for end in range(2 * window, len(values) + 1):
        last = (csum[end] - csum[end - window]) / window
        prev = (csum[end - window] - csum[end - 2 * window]) / window
        ok = last == 0 if prev == 0 else abs(last - prev) / abs(prev) < rel_tol
        if ok:
            return int(trace[end - 1, 0])
    return None


def _trace_values(entropy_trace) -> np.ndarray:
    trace = np.asarray(entropy_trace, dtype=float)
    return trace[:, 1] if trace.ndim == 2 else trace


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RunResult:
    config: SimConfig
    volume: int
    window: int
    final_ages: SampleSet
    lifespans: SampleSet
    entropy_trace: np.ndarray = field(repr=False)
    skipped_transactions: int

    @property
    def v_g(self) -> float:
        return self.volume / (self.config.total_money * self.window)

    def summary(self) -> dict:
        return {
            "volume": self.volume,
            "window": self.window,
            "v_g": self.v_g,
            "skipped": self.skipped_transactions,
            "seed": self.config.rng_seed,
            "config": asdict(self.config),
        }


def run(config: SimConfig, progress: Callable[[int], None] | None = None) -> RunResult:
    """Burn in, then measure volume, lifespans and entropy.

    The entropy trace covers the whole run (burn-in included) so the approach
    to equilibrium is visible; volume, lifespans and skip counts cover the
    measurement window only.
    """
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    state = SimState(config.n_agents, config.total_money)
    stride = config.entropy_stride
    ticks = [0]
    values = [state.entropy()]

    for _ in range(config.burn_in_iterations):
        step(state, config, rng)
        if state.tick % stride == 0:
            ticks.append(state.tick)
            values.append(state.entropy())
        if progress and state.tick % 10_000 == 0:
            progress(state.tick)

    volume = 0
    skipped = 0
    lifespans = []
    for _ in range(config.measure_iterations):
        _, moved, spans = step(state, config, rng)
        if moved:
            volume += moved
            lifespans.append(spans)
        else:
            skipped += 1
        if state.tick % stride == 0:
            ticks.append(state.tick)
            values.append(state.entropy())
        if progress and state.tick % 10_000 == 0:
            progress(state.tick)

    if skipped / config.measure_iterations >= 0.5:
        log.warning("%d of %d transactions skipped during measurement", skipped, config.measure_iterations)

    spans = np.concatenate(lifespans) if lifespans else np.empty(0, dtype=np.int64)
    trace = np.column_stack([np.asarray(ticks, dtype=float), np.asarray(values, dtype=float)])
    return RunResult(
        config=config,
        volume=volume,
        window=config.measure_iterations,
        final_ages=SampleSet(_frozen(state.ages().astype(float)), "iteration"),
        lifespans=SampleSet(_frozen(spans.astype(float)), "iteration"),
        entropy_trace=_frozen(trace),
        skipped_transactions=skipped,
    )


def write_run(result: RunResult, outdir: str | Path) -> list[Path]:
    """Write ages.csv, lifespans.csv, entropy.csv and summary.json."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, header, data in (
        ("ages.csv", "age", result.final_ages.values),
        ("lifespans.csv", "lifespan", result.lifespans.values),
    ):
        path = outdir / name
        np.savetxt(path, data.astype(np.int64).reshape(-1, 1), fmt="%d", header=header, comments="")
        paths.append(path)
    path = outdir / "entropy.csv"
    with open(path, "w") as fh:
        fh.write("tick,entropy\n")
        for t, e in result.entropy_trace:
            fh.write(f"{int(t)},{e!r}\n")
    paths.append(path)
    path = outdir / "summary.json"
    path.write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    paths.append(path)
    return paths
