"""Rolling train / predict / correct protocol over binary activity series.

Each iteration trains on the most recent ``T_tr`` slots, forecasts the next
``T_p`` slots, receives ground truth for the first ``T_p - dT`` of them, writes
that truth back over the forecast and advances by ``T_p - dT``. The last
``dT`` forecast slots stay marked ``predicted`` and are never trained on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .lstm import LstmNetwork, TrainConfig, train
from .metrics import ConfusionMatrix

OBSERVED, PREDICTED, CORRECTED = 0, 1, 2
PROVENANCE_NAMES = ("observed", "predicted", "corrected")


@dataclass(frozen=True)
class WindowPlan:
    T_tr: int
    T_p: int
    dT: int

    def __post_init__(self):
        if not (0 < self.dT < self.T_p <= self.T_tr):
            raise ValueError(f"window plan needs 0 < dT < T_p <= T_tr, got {self}")

    @property
    def advance(self) -> int:
        return self.T_p - self.dT

    def required_length(self, iterations: int) -> int:
        """Evaluation samples needed to score ``iterations`` full forecasts."""
        return (iterations - 1) * self.advance + self.T_p


@dataclass
class ActivitySeries:
    device: int
    bits: np.ndarray
    provenance: np.ndarray

    @classmethod
    def observed(cls, bits, device: int = 0) -> "ActivitySeries":
        bits = np.asarray(bits).astype(np.uint8)
        if bits.ndim != 1 or (bits > 1).any():
            raise ValueError("activity must be a 1-D 0/1 sequence")
        return cls(device, bits, np.full(bits.shape, OBSERVED, dtype=np.uint8))

    def __len__(self):
        return len(self.bits)

    def training_view(self, start: int, stop: int) -> np.ndarray:
        """Bits in [start, stop); refuses any slot that is still only a forecast."""
        if start < 0 or stop > len(self.bits) or start >= stop:
            raise ValueError(f"training span [{start}, {stop}) outside series of length {len(self.bits)}")
        if (self.provenance[start:stop] == PREDICTED).any():
            raise RuntimeError("uncorrected forecast slots inside a training span")
        return self.bits[start:stop]


def make_windows(series, unroll: int):
    """Sliding windows advancing by one slot and the slot following each."""
    s = np.asarray(series, dtype=float)
    if unroll < 1:
        raise ValueError("unroll must be >= 1")
    if s.ndim != 1 or s.size <= unroll:
        raise ValueError(f"series of length {s.size} is too short for unroll {unroll}")
    windows = np.lib.stride_tricks.sliding_window_view(s, unroll)[:-1].copy()
    return windows, s[unroll:].copy()


@dataclass
class ErrorTally:
    false_active: int = 0
    false_silent: int = 0
    correct: int = 0

    @property
    def total(self) -> int:
        return self.false_active + self.false_silent + self.correct

    def __add__(self, other: "ErrorTally") -> "ErrorTally":
        return ErrorTally(self.false_active + other.false_active, self.false_silent + other.false_silent,
                          self.correct + other.correct)


def correct(forecast, truth):
    """Overwrite forecast slots with ground truth and count both error kinds.

    ``truth`` must cover exactly the forecast slots being corrected.
    Returns (corrected bits, provenance flags, tally).
    """
    forecast = np.asarray(forecast).astype(np.uint8)
    truth = np.asarray(truth).astype(np.uint8)
    if truth.shape != forecast.shape:
        raise ValueError(f"ground-truth span {truth.shape} does not match forecast span {forecast.shape}")
    tally = ErrorTally(
        false_active=int(((forecast == 1) & (truth == 0)).sum()),
        false_silent=int(((forecast == 0) & (truth == 1)).sum()),
        correct=int((forecast == truth).sum()),
    )
    return truth.copy(), np.full(truth.shape, CORRECTED, dtype=np.uint8), tally


class PersistenceForecaster:
    """Repeats the last training bit; a baseline and a test double."""

    def fit(self, bits):
        self.last = int(np.asarray(bits)[-1])
        return self

    def forecast(self, context, n: int) -> np.ndarray:
        return np.full(n, int(np.asarray(context)[-1]), dtype=np.uint8)


class LstmForecaster:
    """Next-step LSTM rolled forward on its own thresholded outputs.

    The first ``fit`` trains for ``config.epochs``; later fits warm-start
    from the current weights for ``refit_epochs``.
    """

    def __init__(self, config: TrainConfig, refit_epochs: int = 2, threshold: float = 0.5):
        self.config = config
        self.refit_epochs = refit_epochs
        self.threshold = threshold
        self.net = LstmNetwork(1, config.hidden_sizes, config.dropout, seed=config.seed)
        self.fits = 0
        self.history = []

    def fit(self, bits):
        windows, targets = make_windows(bits, self.config.unroll)
        epochs = self.config.epochs if self.fits == 0 else self.refit_epochs
        cfg = TrainConfig(**{**self.config.__dict__, "epochs": epochs, "seed": self.config.seed + self.fits})
        self.history.extend(train(self.net, windows, targets, cfg))
        self.fits += 1
        return self

    def forecast(self, context, n: int) -> np.ndarray:
        ctx = list(np.asarray(context, dtype=float)[-self.config.unroll:])
        out = np.empty(n, dtype=np.uint8)
        for k in range(n):
            p = self.net.predict_proba(np.array(ctx)[None, :])[0]
            out[k] = 1 if p >= self.threshold else 0
            ctx = ctx[1:] + [float(out[k])]
        return out


@dataclass
class IterationRecord:
    iteration: int
    train_start: int
    forecast_start: int
    forecast: np.ndarray
    truth: np.ndarray
    tally: ErrorTally

    @property
    def accuracy(self) -> float:
        return float((self.forecast == self.truth).mean())


@dataclass
class RollingResult:
    plan: WindowPlan
    series: ActivitySeries
    records: list = field(default_factory=list)

    def tally(self) -> ErrorTally:
        out = ErrorTally()
        for r in self.records:
            out = out + r.tally
        return out

    def confusion(self) -> ConfusionMatrix:
        """Every emitted forecast slot scored against the truth stream."""
        f = np.concatenate([r.forecast for r in self.records])
        t = np.concatenate([r.truth for r in self.records])
        return ConfusionMatrix.from_labels(t, f)

    def write_forecasts(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["device_id", "slot", "predicted", "truth", "provenance"])
            adv = self.plan.advance
            for r in self.records:
                for k in range(len(r.forecast)):
                    prov = PROVENANCE_NAMES[CORRECTED if k < adv else PREDICTED]
                    w.writerow([self.series.device, r.forecast_start + k, int(r.forecast[k]), int(r.truth[k]), prov])

    def write_report(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "train_start", "forecast_start", "accuracy", "false_active",
                        "false_silent", "correct"])
            for r in self.records:
                w.writerow([r.iteration, r.train_start, r.forecast_start, f"{r.accuracy:.6f}",
                            r.tally.false_active, r.tally.false_silent, r.tally.correct])


def rolling_predict(plan: WindowPlan, history: ActivitySeries, trainer, truth, iterations: int) -> RollingResult:
    """Run ``iterations`` train/predict/correct rounds after ``history``.

    ``trainer`` provides ``fit(bits)`` and ``forecast(context, n)``. ``truth``
    is the ground-truth stream that follows ``history``; its first
    ``plan.required_length(iterations)`` bits are used.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if len(history) < plan.T_tr:
        raise ValueError(f"history of {len(history)} slots is shorter than T_tr={plan.T_tr}")
    truth = np.asarray(truth).astype(np.uint8)
    need = plan.required_length(iterations)
    if truth.size < need:
        raise ValueError(f"truth stream has {truth.size} slots, {need} needed for {iterations} iterations")
    n0 = len(history)
    size = n0 + iterations * plan.advance + plan.dT
    bits = np.zeros(size, dtype=np.uint8)
    prov = np.full(size, PREDICTED, dtype=np.uint8)
    bits[:n0] = history.bits
    prov[:n0] = history.provenance
    series = ActivitySeries(history.device, bits, prov)
    result = RollingResult(plan, series)
    frontier = n0
    for it in range(iterations):
        start = frontier - plan.T_tr
        train_bits = series.training_view(start, frontier)
        trainer.fit(train_bits)
        fc = np.asarray(trainer.forecast(train_bits, plan.T_p)).astype(np.uint8)
        if fc.shape != (plan.T_p,):
            raise ValueError(f"forecaster returned {fc.shape}, expected ({plan.T_p},)")
        bits[frontier:frontier + plan.T_p] = fc
        prov[frontier:frontier + plan.T_p] = PREDICTED
        off = frontier - n0
        seg_truth = truth[off:off + plan.T_p]
        fixed, flags, tally = correct(fc[:plan.advance], seg_truth[:plan.advance])
        bits[frontier:frontier + plan.advance] = fixed
        prov[frontier:frontier + plan.advance] = flags
        result.records.append(IterationRecord(it, start, frontier, fc, seg_truth.copy(), tally))
        frontier += plan.advance
    return result
