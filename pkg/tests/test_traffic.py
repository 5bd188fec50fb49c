import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fastgrant import traffic
from fastgrant.traffic import (ALARM, DATA, BackgroundProcess, DeviceDescriptor, StateMatrices, TrafficConfig,
                               combined_theta, spatial_weight, step_device, temporal_sample, transition_matrix)

PROC = BackgroundProcess(400.0, 600.0, 80.0, 50.0, 10.0, 5.0)


def test_spatial_weight_examples():
    assert spatial_weight(PROC, 400.0, 600.0) == 1.0
    assert spatial_weight(PROC, 480.0, 600.0) == pytest.approx(math.exp(-0.5))
    assert spatial_weight(PROC, 1e6, -1e6) == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(ValueError):
        spatial_weight(PROC, float("nan"), 0.0)


@given(st.floats(0, 500), st.floats(0, 500))
def test_spatial_weight_decreasing_along_axes(a, b):
    lo, hi = sorted((a, b))
    assert spatial_weight(PROC, PROC.mu_x + hi, PROC.mu_y) <= spatial_weight(PROC, PROC.mu_x + lo, PROC.mu_y)
    assert spatial_weight(PROC, PROC.mu_x, PROC.mu_y - hi) <= spatial_weight(PROC, PROC.mu_x, PROC.mu_y - lo)
    assert 0.0 <= spatial_weight(PROC, PROC.mu_x + a, PROC.mu_y + b) <= 1.0


def test_process_validation():
    with pytest.raises(ValueError):
        BackgroundProcess(0, 0, 0.0, 1.0, 0, 1)
    with pytest.raises(ValueError):
        BackgroundProcess(0, 0, 1.0, 1.0, 0, 0.0)


def test_temporal_sample_window():
    rng = np.random.default_rng(1)
    assert temporal_sample(PROC, 9.999, rng) == 0.0
    assert temporal_sample(PROC, 15.0, rng) == 0.0
    draws = np.array([temporal_sample(PROC, 12.5, rng) for _ in range(10**5)])
    assert ((draws >= 0) & (draws <= 1)).all()
    assert abs(draws.mean() - 0.5) < 0.01


def test_combined_theta_examples():
    assert combined_theta([(0.3, 0.5)]) == pytest.approx(0.15)
    assert combined_theta([(1.0, 0.5), (1.0, 0.5)]) == pytest.approx(0.75)
    assert combined_theta([(0.2, 0.3), (1.0, 1.0), (0.5, 0.5)]) == 1.0
    with pytest.raises(ValueError):
        combined_theta([(1.5, 1.0)])


unit = st.floats(0, 1)
pairs = st.lists(st.tuples(unit, unit), min_size=1, max_size=6)


@given(unit, unit)
def test_single_process_reduces_exactly(d, t):
    assert combined_theta([(d, t)]) == d * t


@given(pairs, st.randoms(use_true_random=False))
def test_combined_theta_symmetric(items, rnd):
    shuffled = list(items)
    rnd.shuffle(shuffled)
    assert combined_theta(shuffled) == pytest.approx(combined_theta(items), abs=1e-12)


@given(pairs, st.integers(0, 5), unit)
def test_combined_theta_monotone(items, k, bump):
    k = k % len(items)
    d, t = items[k]
    raised = list(items)
    raised[k] = (d, max(t, bump))
    assert combined_theta(raised) >= combined_theta(items) - 1e-12
    assert 0.0 <= combined_theta(items) <= 1.0


def test_transition_matrix_examples():
    m = StateMatrices()
    assert np.array_equal(transition_matrix(0.0, m), m.uncoordinated)
    assert np.array_equal(transition_matrix(1.0, m), m.coordinated)
    assert np.allclose(transition_matrix(0.5, m), (m.coordinated + m.uncoordinated) / 2)
    with pytest.raises(ValueError):
        transition_matrix(1.01, m)


def _stochastic(draw):
    p, q = draw(unit), draw(unit)
    return ((p, 1 - p), (q, 1 - q))


@st.composite
def matrices(draw):
    return StateMatrices(_stochastic(draw), _stochastic(draw))


@given(unit, matrices())
def test_transition_matrix_row_stochastic(theta, m):
    P = transition_matrix(theta, m)
    assert np.all(P >= 0) and np.all(P <= 1)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_state_matrices_validation():
    with pytest.raises(ValueError):
        StateMatrices(P_C=((0.5, 0.6), (0.5, 0.5)))
    with pytest.raises(ValueError):
        StateMatrices(pi_U=(0.3, 0.3))


def test_step_device_rows():
    rng = np.random.default_rng(0)
    d = DeviceDescriptor(0, 0.0, 0.0)
    assert step_device(d, np.array([[1.0, 0.0], [0.0, 1.0]]), rng) == DATA
    assert step_device(DeviceDescriptor(1, 0, 0), np.array([[0.0, 1.0], [1.0, 0.0]]), rng) == ALARM
    half = np.array([[0.5, 0.5], [0.5, 0.5]])
    hits = 0
    n = 10**5
    for _ in range(n):
        d.state = DATA
        hits += step_device(d, half, rng)
    assert abs(hits / n - 0.5) < 0.01


def test_generate_arrivals_means():
    rng = np.random.default_rng(3)
    assert traffic.generate_arrivals(DATA, 1e-300, 1.0, 1e-300, rng) == (0, DATA)
    counts = [traffic.generate_arrivals(ALARM, 1 / 3600, 1.0, 1.0, rng) for _ in range(10**5)]
    assert all(c == ALARM for _, c in counts)
    assert abs(np.mean([n for n, _ in counts]) - 1.0) < 0.02
    # data state: mean gap between packets is 1/lambda_data
    total = sum(traffic.generate_arrivals(DATA, 1 / 36, 1.0, 1.0, rng)[0] for _ in range(2 * 10**5))
    assert 2 * 10**5 / total == pytest.approx(36, rel=0.05)


def small(processes=1, seed=0, **kw):
    kw.setdefault("device_count", 200)
    kw.setdefault("run_time", 5.0)
    return traffic.scenario(processes, seed=seed, **kw)


def test_simulate_deterministic():
    a = traffic.simulate(small(2, seed=4))
    b = traffic.simulate(small(2, seed=4))
    assert np.array_equal(a.states, b.states)
    for f in ("slot", "device", "cls", "nbytes"):
        assert np.array_equal(getattr(a.arrivals, f), getattr(b.arrivals, f))


def test_no_process_means_no_alarm():
    trace = traffic.simulate(small(0, seed=1))
    assert trace.states.max() == 0
    assert trace.alarm_packets() == 0
    assert not trace.coordinated.any()


def test_zero_devices_is_empty():
    trace = traffic.simulate(small(1, device_count=0))
    assert len(trace.arrivals) == 0 and trace.n_devices == 0


def test_trace_invariants():
    trace = traffic.simulate(small(3, seed=2, run_time=10.0))
    a = trace.arrivals
    assert np.array_equal(trace.states[a.slot, a.device], a.cls)
    assert ((trace.x >= 0) & (trace.x <= 1000) & (trace.y >= 0) & (trace.y <= 1000)).all()
    counts = trace.counts()
    for dev in range(0, trace.n_devices, 37):
        assert np.array_equal(trace.activity(dev), (counts[:, dev] > 0).astype(np.uint8))
    # startup burst: every device sends in slot 0
    assert set(a.device[a.slot == 0]) == set(range(trace.n_devices))
    assert np.array_equal(a.nbytes, np.where(a.cls == ALARM, 1000, 100))
    assert np.array_equal(trace.coordinated, trace.weights.max(axis=1) > 0.05)


def test_process_prefix_shares_layout():
    one = traffic.simulate(small(1, seed=9))
    four = traffic.simulate(small(4, seed=9))
    assert one.config.processes[0] == four.config.processes[0]
    assert np.array_equal(one.x, four.x) and np.array_equal(one.y, four.y)


def test_quiet_period_is_poisson():
    # all processes outside their windows, so every device stays in the data state
    proc = BackgroundProcess(500, 500, 100, 100, 1000.0, 1.0)
    cfg = TrafficConfig(device_count=400, run_time=100.0, lambda_data=0.05, processes=(proc,), startup=False, seed=5)
    trace = traffic.simulate(cfg)
    assert trace.states.max() == 0
    per_device = np.bincount(trace.arrivals.device, minlength=400)
    mu = 0.05 * 100.0
    edges = [0, 2, 3, 4, 5, 6, 7, 8, 10**9]
    observed = np.array([((per_device >= lo) & (per_device < hi)).sum() for lo, hi in zip(edges, edges[1:])])
    cdf = stats.poisson.cdf(np.array(edges[1:]) - 1, mu)
    probs = np.diff(np.concatenate([[0.0], cdf]))
    probs[-1] = 1 - probs[:-1].sum()
    chi2 = ((observed - 400 * probs) ** 2 / (400 * probs)).sum()
    assert chi2 < stats.chi2.ppf(0.99, len(observed) - 1)


def test_save_load_roundtrip(tmp_path):
    trace = traffic.simulate(small(2, seed=3))
    trace.save(tmp_path / "t.npz")
    back = traffic.TrafficTrace.load(tmp_path / "t.npz")
    assert back.config == trace.config
    assert np.array_equal(back.states, trace.states)
    assert np.array_equal(back.arrivals.slot, trace.arrivals.slot)
    trace.save(tmp_path / "u.npz")
    assert (tmp_path / "t.npz").read_bytes() == (tmp_path / "u.npz").read_bytes()


def test_write_csv(tmp_path):
    trace = traffic.simulate(small(1, seed=0))
    trace.write_csv(tmp_path / "trace.csv")
    with open(tmp_path / "trace.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["slot", "device_id", "state", "arrivals", "class", "bytes"]
    assert sum(int(r[3]) for r in rows[1:]) == len(trace.arrivals)


def test_phase_sets():
    trace = traffic.simulate(small(2, seed=1, run_time=20.0))
    phases = traffic.phase_sets(trace)
    assert set(phases) == {"startup", "data", "alarm", "silent"}
    assert len(phases["startup"]) == trace.n_devices
    assert set(phases["silent"]) <= set(phases["alarm"])


def test_config_validation():
    with pytest.raises(ValueError):
        TrafficConfig(lambda_data=0.0)
    with pytest.raises(ValueError):
        TrafficConfig(lambda_data=2.0, lambda_alarm=1.0)
    with pytest.raises(ValueError):
        TrafficConfig(slot_duration=0.0)
    assert replace(TrafficConfig(), run_time=2.0).n_slots == 2000
