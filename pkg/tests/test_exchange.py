import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from moneyvelocity.distributions import fit_exponential_mle
from moneyvelocity.errors import ConfigError, InsufficientDataError
from moneyvelocity.exchange import (
    SimConfig,
    SimState,
    entropy,
    first_stationary_tick,
    run,
    stationarity_reached,
    step,
    write_run,
)


class ScriptedRng:
    """Stands in for a Generator: returns queued integers, defers the rest."""

    def __init__(self, ints, seed=0):
        self.ints = list(ints)
        self.rng = np.random.default_rng(seed)

    def integers(self, n):
        return self.ints.pop(0)

    def random(self):
        return self.rng.random()

    def choice(self, *args, **kwargs):
        return self.rng.choice(*args, **kwargs)


def _two_agents(b0, b1):
    """State with arbitrary balances; all units born at tick 0."""
    total = b0 + b1
    state = SimState(2, 2)
    state.balances = np.array([b0, b1], dtype=np.int64)
    state.unit_birth = np.zeros(total, dtype=np.int64)
    state.unit_owner = np.repeat([0, 1], [b0, b1])
    state.holdings = [np.arange(b0), np.arange(b0, total)]
    state._bal_hist = np.bincount(state.balances, minlength=total + 1)
    state._clogc = sum(c * math.log(c) for c in state._bal_hist if c > 0)
    return state


FIXED_1 = SimConfig(n_agents=2, total_money=200, transfer_mode="fixed", v=1.0)


# --------------------------------------------------------------------------- #
# step
# --------------------------------------------------------------------------- #
def test_step_moves_half_the_pair_total():
    state = _two_agents(100, 100)
    _, dm, spans = step(state, FIXED_1, ScriptedRng([0, 0]))
    assert dm == 100
    assert state.balances.tolist() == [0, 200]
    assert state.tick == 1
    assert len(spans) == 100
    state.check()


def test_step_skips_when_sender_is_short():
    state = _two_agents(0, 200)
    _, dm, spans = step(state, FIXED_1, ScriptedRng([0, 0]))  # agent 0 sends
    assert dm == 0 and len(spans) == 0
    assert state.balances.tolist() == [0, 200]
    assert state.tick == 1


def test_step_skips_zero_transfer():
    cfg = SimConfig(n_agents=2, total_money=2, transfer_mode="fixed", v=0.4)
    state = SimState(2, 2)
    _, dm, _ = step(state, cfg, ScriptedRng([1, 0]))
    assert dm == 0 and state.tick == 1


def test_step_lifespan_and_rebirth():
    state = _two_agents(100, 100)
    state.tick = 64
    state.unit_birth[:] = 40
    _, dm, spans = step(state, FIXED_1, ScriptedRng([1, 0]))  # agent 1 sends to 0
    assert state.tick == 65
    moved = state.holdings[0][100:]
    assert np.all(spans == 25)
    assert np.all(state.ages()[moved] == 0)
    assert np.all(state.ages()[state.holdings[0][:100]] == 25)


@pytest.mark.parametrize("selection", ["oldest-first", "newest-first"])
def test_ordered_unit_selection(selection):
    cfg = SimConfig(n_agents=2, total_money=4, transfer_mode="fixed", v=0.5, unit_selection=selection)
    state = SimState(2, 4)
    state.tick = 10
    state.unit_birth[:] = [3, 7, 0, 0]
    _, dm, spans = step(state, cfg, ScriptedRng([0, 0]))
    assert dm == 1
    assert spans.tolist() == ([8] if selection == "oldest-first" else [4])


# --------------------------------------------------------------------------- #
# config validation
# --------------------------------------------------------------------------- #
@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n_agents=3, total_money=10),
        dict(transfer_mode="fixed", v=0.0),
        dict(transfer_mode="fixed", v=1.5),
        dict(transfer_mode="gaussian"),
        dict(unit_selection="fifo"),
        dict(burn_in_iterations=-1),
        dict(measure_iterations=0),
        dict(n_agents=1, total_money=10),
    ],
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        run(SimConfig(**{**dict(n_agents=10, total_money=100), **kwargs}))


# --------------------------------------------------------------------------- #
# conservation, bookkeeping and determinism over random configurations
# --------------------------------------------------------------------------- #
configs = st.builds(
    SimConfig,
    n_agents=st.integers(2, 12),
    total_money=st.just(0),
    transfer_mode=st.sampled_from(["uniform", "fixed"]),
    v=st.floats(0.05, 1.0),
    unit_selection=st.sampled_from(["random", "oldest-first", "newest-first"]),
    burn_in_iterations=st.integers(0, 30),
    measure_iterations=st.integers(1, 60),
    rng_seed=st.integers(0, 2**32 - 1),
    entropy_stride=st.integers(1, 7),
)


def _with_money(cfg, per_agent):
    return replace(cfg, total_money=cfg.n_agents * per_agent)


@settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(cfg=configs, per_agent=st.integers(1, 40))
def test_conservation_and_age_bookkeeping(cfg, per_agent):
    cfg = _with_money(cfg, per_agent)
    rng = np.random.default_rng(cfg.rng_seed)
    state = SimState.initial(cfg)
    last_move = np.zeros(cfg.total_money, dtype=np.int64)
    volume = resets = 0
    for _ in range(cfg.burn_in_iterations + cfg.measure_iterations):
        before = state.unit_birth.copy()
        _, dm, spans = step(state, cfg, rng)
        assert state.balances.sum() == cfg.total_money
        moved = np.flatnonzero(state.unit_birth != before)
        assert len(moved) == dm == len(spans)
        # every emitted lifespan is the gap between consecutive moves
        assert sorted(spans.tolist()) == sorted((state.tick - last_move[moved]).tolist())
        last_move[moved] = state.tick
        volume += dm
        resets += len(moved)
        assert state.entropy() == pytest.approx(entropy(state.balances), abs=1e-9)
    state.check()
    assert resets == volume
    assert np.all(state.unit_birth == last_move)


@settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(cfg=configs, per_agent=st.integers(1, 40))
def test_run_is_deterministic(cfg, per_agent):
    cfg = _with_money(cfg, per_agent)
    a, b = run(cfg), run(cfg)
    assert a.volume == b.volume and a.skipped_transactions == b.skipped_transactions
    np.testing.assert_array_equal(a.final_ages.values, b.final_ages.values)
    np.testing.assert_array_equal(a.lifespans.values, b.lifespans.values)
    np.testing.assert_array_equal(a.entropy_trace, b.entropy_trace)
    # RunResult invariants
    assert a.window == cfg.measure_iterations
    assert len(a.final_ages) == cfg.total_money
    assert np.all(a.lifespans.values > 0)
    assert a.volume == len(a.lifespans)


def test_all_skipped_run():
    cfg = SimConfig(n_agents=2, total_money=2, transfer_mode="fixed", v=0.4, burn_in_iterations=0, measure_iterations=1)
    r = run(cfg)
    assert r.volume == 0 and len(r.lifespans) == 0
    assert np.all(r.final_ages.values == 1)
    assert r.skipped_transactions == 1


def test_write_run(tmp_path):
    r = run(SimConfig(n_agents=10, total_money=100, burn_in_iterations=10, measure_iterations=50, rng_seed=4))
    paths = write_run(r, tmp_path)
    assert sorted(p.name for p in paths) == ["ages.csv", "entropy.csv", "lifespans.csv", "summary.json"]
    assert (tmp_path / "ages.csv").read_text().splitlines()[0] == "age"
    assert len((tmp_path / "ages.csv").read_text().splitlines()) == 101
    assert (tmp_path / "lifespans.csv").read_text().splitlines()[0] == "lifespan"
    assert (tmp_path / "entropy.csv").read_text().splitlines()[0] == "tick,entropy"
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["volume"] == r.volume and summary["v_g"] == r.v_g
    assert summary["seed"] == 4 and summary["config"]["n_agents"] == 10


# --------------------------------------------------------------------------- #
# entropy and stationarity
# --------------------------------------------------------------------------- #
def test_entropy_examples():
    assert entropy([100] * 50) == 0.0
    assert entropy([0, 2]) == pytest.approx(math.log(2), rel=1e-15)
    with pytest.raises(InsufficientDataError):
        entropy([])


def test_stationarity_examples():
    assert stationarity_reached(np.ones(100), 10, 0.005)
    assert not stationarity_reached(np.arange(1.0, 101.0), 10, 0.005)
    with pytest.raises(InsufficientDataError):
        stationarity_reached(np.ones(15), 10, 0.005)


@pytest.fixture(scope="module")
def full_scale_run():
    return run(SimConfig())


@pytest.mark.slow
def test_full_scale_entropy_approaches_boltzmann_gibbs(full_scale_run):
    m = np.arange(0, 20_000)
    p = np.exp(-m / 100.0)
    p /= p.sum()
    oracle = -np.sum(p * np.log(p))
    assert oracle == pytest.approx(5.605, abs=1e-3)
    final = full_scale_run.entropy_trace[-2000:, 1].mean()
    assert final == pytest.approx(oracle, rel=0.02)


@pytest.mark.slow
def test_full_scale_stationary_onset(full_scale_run):
    tick = first_stationary_tick(full_scale_run.entropy_trace, 2000, 0.005)
    assert tick is not None and tick <= 25_000


def test_stationary_run_self_consistency(stationary_run):
    lam = fit_exponential_mle(stationary_run.final_ages).rate
    assert lam == pytest.approx(stationary_run.v_g, rel=0.05)
    assert stationary_run.skipped_transactions / stationary_run.window < 0.5
