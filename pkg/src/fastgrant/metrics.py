"""Channel model and evaluation math.

Covers flat Rayleigh fading, the per-resource transmission rate, access-delay
decomposition, throughput accounting over an allocation log, and binary
classification reports (confusion matrix, accuracy, precision, recall, f1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# symbol uses carried by one resource in one slot
DEFAULT_SYMBOLS_PER_SLOT = 15000
DEFAULT_SNR_DB = 10.0


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class ChannelDraw:
    snr: float
    h_sq: float

    def __post_init__(self):
        if not (self.snr >= 0 and self.h_sq >= 0):
            raise ValueError(f"snr and h_sq must be non-negative, got {self.snr}, {self.h_sq}")


def rate(draw: ChannelDraw) -> float:
    """Achievable rate in bits per channel use, log2(1 + snr*|h|^2)."""
    return math.log2(1.0 + draw.snr * draw.h_sq)


def rate_array(snr: float, h_sq: np.ndarray) -> np.ndarray:
    return np.log2(1.0 + snr * np.asarray(h_sq, dtype=float))


def sample_fading(rng: np.random.Generator, size=None):
    """|h|^2 for a unit-power Rayleigh envelope, i.e. Exponential(1)."""
    return rng.exponential(1.0, size=size)


def bytes_per_slot(snr: float, h_sq, symbols_per_slot: int = DEFAULT_SYMBOLS_PER_SLOT):
    return rate_array(snr, h_sq) * symbols_per_slot / 8.0


def transmit_slots(nbytes, snr: float, h_sq, symbols_per_slot: int = DEFAULT_SYMBOLS_PER_SLOT):
    """Consecutive slots needed to push ``nbytes`` through one resource.

    A zero-rate draw never finishes; it is reported as a very large duration
    rather than infinity so the result stays integral.
    """
    per_slot = bytes_per_slot(snr, h_sq, symbols_per_slot)
    nbytes = np.asarray(nbytes, dtype=float)
    with np.errstate(divide="ignore"):
        slots = np.where(per_slot > 0, np.ceil(nbytes / np.where(per_slot > 0, per_slot, 1.0)), np.iinfo(np.int32).max)
    return np.maximum(slots, 1).astype(np.int64)


@dataclass(frozen=True)
class DelayRecord:
    """Delay components of one packet, in seconds."""

    t_overhead: float = 0.0
    t_queue: float = 0.0
    t_transmit: float = 0.0
    t_hardware: float = 0.0

    def __add__(self, other: "DelayRecord") -> "DelayRecord":
        return DelayRecord(
            self.t_overhead + other.t_overhead,
            self.t_queue + other.t_queue,
            self.t_transmit + other.t_transmit,
            self.t_hardware + other.t_hardware,
        )

    @property
    def total(self) -> float:
        return self.t_hardware + self.t_overhead + self.t_queue + self.t_transmit


def access_delay(record: DelayRecord) -> float:
    """Time from packet-ready to grant: total minus transmission time.

    Hardware delay is neglected, so the result is overhead plus queueing.
    """
    for name in ("t_overhead", "t_queue", "t_transmit", "t_hardware"):
        if getattr(record, name) < 0:
            raise ValueError(f"negative delay component {name}={getattr(record, name)}")
    return record.t_overhead + record.t_queue


# -- classification -----------------------------------------------------------

CLASS_NAMES = ("data", "alarm")


@dataclass(frozen=True)
class ConfusionMatrix:
    """2x2 counts, rows = true class, columns = predicted class.

    Index 0 is the data/silent class, index 1 the alarm/active class.
    """

    counts: tuple

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.shape != (2, 2):
            raise ValueError(f"confusion matrix must be 2x2, got shape {arr.shape}")
        if (arr < 0).any() or not np.all(arr == np.round(arr)):
            raise ValueError("confusion matrix entries must be non-negative integers")
        object.__setattr__(self, "counts", tuple(tuple(int(v) for v in row) for row in arr))

    @classmethod
    def from_labels(cls, truth, predicted) -> "ConfusionMatrix":
        truth = np.asarray(truth).astype(int)
        predicted = np.asarray(predicted).astype(int)
        if truth.shape != predicted.shape:
            raise ValueError("truth and predicted must have the same shape")
        if truth.size and (truth.min() < 0 or truth.max() > 1 or predicted.min() < 0 or predicted.max() > 1):
            raise ValueError("labels must be 0/1")
        cm = np.zeros((2, 2), dtype=int)
        np.add.at(cm, (truth, predicted), 1)
        return cls(cm)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.counts, dtype=int)

    @property
    def total(self) -> int:
        return int(self.array.sum())


@dataclass
class ClassificationReport:
    accuracy: float
    precision: tuple
    recall: tuple
    f1: tuple
    support: tuple
    undefined: dict = field(default_factory=dict)

    def rows(self):
        """One row per class in Table-I column order."""
        for k, name in enumerate(CLASS_NAMES):
            yield {
                "class": name,
                "support": self.support[k],
                "accuracy": self.accuracy,
                "precision": self.precision[k],
                "recall": self.recall[k],
                "f1": self.f1[k],
            }


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * recall * precision / (recall + precision)


def classification_report(cm: ConfusionMatrix) -> ClassificationReport:
    """Accuracy plus per-class precision, recall and f1.

    Metrics whose denominator is zero are reported as 0 and flagged in
    ``undefined`` (keys like ``"precision_alarm"``).
    """
    a = cm.array
    total = a.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    undefined = {}
    precision, recall, f1 = [], [], []
    for k, name in enumerate(CLASS_NAMES):
        tp = a[k, k]
        predicted = a[:, k].sum()
        actual = a[k, :].sum()
        if predicted == 0:
            undefined[f"precision_{name}"] = True
            p = 0.0
        else:
            p = tp / predicted
        if actual == 0:
            undefined[f"recall_{name}"] = True
            r = 0.0
        else:
            r = tp / actual
        if p + r == 0:
            undefined[f"f1_{name}"] = True
        precision.append(float(p))
        recall.append(float(r))
        f1.append(f1_score(p, r))
    return ClassificationReport(
        accuracy=float(np.trace(a) / total),
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        support=tuple(int(s) for s in a.sum(axis=1)),
        undefined=undefined,
    )


# -- throughput ---------------------------------------------------------------


def throughput_report(log, h_sq=None, snr: float | None = None, symbols_per_slot: int | None = None) -> float:
    """Total bytes of packets whose transmission completed within the run.

    ``h_sq`` holds one fading draw per packet of the traced run (the same
    draws the scheduler used). When omitted the draws stored in the log are
    used. Completion is recomputed from grant slot and channel rate.
    """
    packets = log.packets
    if packets.n == 0:
        return 0.0
    if h_sq is None:
        h_sq = packets.h_sq
    snr = log.snr if snr is None else snr
    symbols_per_slot = log.symbols_per_slot if symbols_per_slot is None else symbols_per_slot
    granted = packets.grant_slot >= 0
    if not granted.any():
        return 0.0
    dur = transmit_slots(packets.nbytes[granted], snr, np.asarray(h_sq)[granted], symbols_per_slot)
    done = packets.grant_slot[granted] + dur
    ok = done <= log.n_slots
    return float(packets.nbytes[granted][ok].sum())
