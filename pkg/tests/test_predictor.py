import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastgrant.lstm import TrainConfig
from fastgrant.predictor import (CORRECTED, OBSERVED, PREDICTED, ActivitySeries, LstmForecaster,
                                 PersistenceForecaster, WindowPlan, correct, make_windows, rolling_predict)


def test_make_windows_examples():
    w, t = make_windows(np.arange(51) % 2, 50)
    assert w.shape == (1, 50) and t.tolist() == [0.0]
    s = np.arange(60)
    w, t = make_windows(s, 50)
    assert w.shape == (10, 50)
    assert t[0] == 50 and w[0].tolist() == list(range(50)) and w[9][0] == 9
    w, t = make_windows(np.zeros(70), 50)
    assert not w.any() and not t.any()
    with pytest.raises(ValueError):
        make_windows(np.zeros(50), 50)


@given(st.integers(2, 200), st.integers(1, 50))
def test_make_windows_count(n, unroll):
    if n <= unroll:
        return
    s = np.random.default_rng(n).integers(0, 2, n)
    w, t = make_windows(s, unroll)
    assert len(w) == n - unroll == len(t)
    k = n - unroll - 1
    assert np.array_equal(w[k], s[k:k + unroll]) and t[k] == s[k + unroll]


def test_plan_validation():
    assert WindowPlan(20, 10, 5).advance == 5
    for bad in ((20, 10, 0), (20, 10, 10), (5, 10, 2)):
        with pytest.raises(ValueError):
            WindowPlan(*bad)


def test_correct_examples():
    bits, flags, tally = correct([1, 0, 1], [0, 0, 1])
    assert (tally.false_active, tally.false_silent, tally.correct) == (1, 0, 2)
    assert bits.tolist() == [0, 0, 1] and (flags == CORRECTED).all()
    _, _, tally = correct(np.ones(5), np.zeros(5))
    assert tally.false_active == 5 and tally.false_silent == 0
    _, _, tally = correct([0, 1, 1], [0, 1, 1])
    assert tally.false_active == tally.false_silent == 0
    with pytest.raises(ValueError):
        correct([1, 0, 1], [1, 0])


class Flipper:
    """Forecasts the complement of the persistence guess, so it is usually wrong."""

    def __init__(self):
        self.spans = []

    def fit(self, bits):
        self.spans.append(np.array(bits))
        return self

    def forecast(self, context, n):
        return np.full(n, 1 - int(context[-1]), dtype=np.uint8)


def _series(n, seed):
    return (np.random.default_rng(seed).random(n) < 0.4).astype(np.uint8)


def test_advance_audit_minute_slots():
    # one slot per minute: T_p = 10 min, dT = 5 min
    plan = WindowPlan(60, 10, 5)
    full = _series(200, 0)
    hist = ActivitySeries.observed(full[:60])
    trainer = Flipper()
    res = rolling_predict(plan, hist, trainer, full[60:], 4)
    starts = [r.train_start for r in res.records]
    assert starts == [0, 5, 10, 15]
    assert [r.forecast_start for r in res.records] == [60, 65, 70, 75]
    assert sum(len(r.forecast) for r in res.records) == 40
    for r in res.records:
        assert r.tally.total == plan.advance


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.data())
def test_training_never_sees_predicted_slots(iterations, T_p, data):
    dT = data.draw(st.integers(1, T_p - 1))
    T_tr = data.draw(st.integers(T_p, 30))
    plan = WindowPlan(T_tr, T_p, dT)
    full = _series(T_tr + plan.required_length(iterations), iterations * 31 + T_p)
    hist = ActivitySeries.observed(full[:T_tr])
    trainer = Flipper()
    res = rolling_predict(plan, hist, trainer, full[T_tr:], iterations)
    for it, span in enumerate(trainer.spans):
        start = it * plan.advance
        assert np.array_equal(span, full[start:start + T_tr])
    frontier = T_tr + iterations * plan.advance
    assert (res.series.provenance[:frontier] != PREDICTED).all()
    assert (res.series.provenance[frontier:] == PREDICTED).all()


def test_training_view_refuses_forecasts():
    s = ActivitySeries(0, np.zeros(5, dtype=np.uint8), np.array([OBSERVED, OBSERVED, PREDICTED, 0, 0], dtype=np.uint8))
    assert s.training_view(0, 2).tolist() == [0, 0]
    with pytest.raises(RuntimeError):
        s.training_view(0, 4)


def test_perfect_predictor_changes_nothing():
    plan = WindowPlan(20, 4, 1)
    full = _series(100, 5)

    class Perfect:
        def __init__(self):
            self.pos = 20

        def fit(self, bits):
            return self

        def forecast(self, context, n):
            out = full[self.pos:self.pos + n]
            self.pos += plan.advance
            return out

    res = rolling_predict(plan, ActivitySeries.observed(full[:20]), Perfect(), full[20:], 5)
    assert res.tally().false_active == res.tally().false_silent == 0
    n = 20 + 5 * plan.advance
    assert np.array_equal(res.series.bits[:n], full[:n])
    assert all(np.array_equal(r.forecast, r.truth) for r in res.records)


def test_rolling_errors():
    plan = WindowPlan(10, 4, 2)
    hist = ActivitySeries.observed(np.zeros(8))
    with pytest.raises(ValueError):
        rolling_predict(plan, hist, PersistenceForecaster(), np.zeros(10), 1)
    hist = ActivitySeries.observed(np.zeros(10))
    with pytest.raises(ValueError):
        rolling_predict(plan, hist, PersistenceForecaster(), np.zeros(5), 2)


def test_outputs(tmp_path):
    plan = WindowPlan(10, 3, 1)
    full = _series(40, 2)
    res = rolling_predict(plan, ActivitySeries.observed(full[:10], device=7), PersistenceForecaster(), full[10:], 3)
    res.write_forecasts(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "device_id,slot,predicted,truth,provenance"
    assert len(lines) == 1 + 3 * 3
    assert lines[1].startswith("7,10,") and lines[3].endswith("predicted")
    res.write_report(tmp_path / "r.csv")
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 4
    cm = res.confusion()
    assert cm.total == 9


def test_lstm_forecaster_learns_a_period():
    # period-4 pattern 1100: an LSTM should forecast it almost perfectly
    pattern = np.tile([1, 1, 0, 0], 60).astype(np.uint8)
    plan = WindowPlan(160, 4, 2)
    cfg = TrainConfig(hidden_sizes=(8,), dropout=0.0, epochs=60, unroll=8, batch_size=32, learning_rate=2e-2,
                      seed=0)
    res = rolling_predict(plan, ActivitySeries.observed(pattern[:160]), LstmForecaster(cfg, refit_epochs=2),
                          pattern[160:], 4)
    f = np.concatenate([r.forecast for r in res.records])
    t = np.concatenate([r.truth for r in res.records])
    assert (f == t).mean() >= 0.9
