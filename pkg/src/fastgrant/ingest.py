"""Sensor time-series loading and conversion to binary activity.

Input files use the two-column ``timestamp,value`` CSV layout of the
Numenta Anomaly Benchmark. Slots index samples, not wall-clock time, so
irregular gaps between timestamps are accepted as long as time moves forward.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from .predictor import ActivitySeries, WindowPlan

# native sampling interval of the benchmark's machine-temperature file
NAB_SAMPLE_MINUTES = 5
NAB_RELATIVE_PATH = Path("realKnownCause") / "machine_temperature_system_failure.csv"
NAB_ENV = "FASTGRANT_NAB_DIR"


class LoadError(ValueError):
    pass


@dataclass
class RawSeries:
    timestamps: np.ndarray   # datetime64[s]
    values: np.ndarray

    def __post_init__(self):
        if len(self.timestamps) != len(self.values):
            raise ValueError("timestamps and values differ in length")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class BinarizeRule:
    mode: str = "statistical"
    threshold: float = 0.0
    k: float = 1.5
    train_span: int | None = None   # statistical mode: samples used for mean/std

    def __post_init__(self):
        if self.mode not in ("absolute", "statistical"):
            raise ValueError(f"unknown binarize mode {self.mode!r}")
        if self.mode == "statistical" and self.k < 0:
            raise ValueError("k must be >= 0")


def _parse_time(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text)


def load_series(path) -> RawSeries:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"{path}: no such file")
    stamps, values = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["timestamp", "value"]:
            raise LoadError(f"{path}:1: expected header 'timestamp,value', got {header}")
        prev = None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise LoadError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                ts = _parse_time(row[0])
                val = float(row[1])
            except ValueError as exc:
                raise LoadError(f"{path}:{lineno}: {exc}") from None
            if not np.isfinite(val):
                raise LoadError(f"{path}:{lineno}: non-finite value {row[1]!r}")
            if prev is not None and ts <= prev:
                raise LoadError(f"{path}:{lineno}: timestamp {row[0]} does not increase")
            prev = ts
            stamps.append(np.datetime64(ts.replace(tzinfo=None), "s"))
            values.append(val)
    return RawSeries(np.array(stamps, dtype="datetime64[s]"), np.array(values))


def threshold_for(values, rule: BinarizeRule) -> float:
    values = np.asarray(values, dtype=float)
    if rule.mode == "absolute":
        return float(rule.threshold)
    span = values if rule.train_span is None else values[:rule.train_span]
    if span.size == 0:
        raise ValueError("empty training span")
    std = span.std()
    if std == 0:
        raise ValueError("zero variance over the training span; statistical threshold undefined")
    return float(span.mean() + rule.k * std)


def binarize(series: RawSeries | np.ndarray, rule: BinarizeRule, device: int = 0) -> ActivitySeries:
    """Activity bit 1 iff the value exceeds the rule's threshold."""
    values = np.asarray(series.values if isinstance(series, RawSeries) else series, dtype=float)
    if values.size == 0:
        raise ValueError("empty series")
    thr = threshold_for(values, rule)
    return ActivitySeries.observed((values > thr).astype(np.uint8), device)


def split_train(series: ActivitySeries, train_span: int, plan: WindowPlan):
    """Contiguous split into an initial training history and the evaluation stream.

    The stream must allow at least one full prediction iteration.
    """
    if train_span < plan.T_tr:
        raise ValueError(f"train_span {train_span} shorter than T_tr={plan.T_tr}")
    if len(series) < train_span + plan.required_length(1):
        raise ValueError(f"series of {len(series)} samples too short for train_span {train_span} "
                         f"plus one iteration of {plan.T_p}")
    history = ActivitySeries(series.device, series.bits[:train_span].copy(),
                             series.provenance[:train_span].copy())
    return history, series.bits[train_span:].copy()


def available_iterations(stream_length: int, plan: WindowPlan) -> int:
    if stream_length < plan.T_p:
        return 0
    return (stream_length - plan.T_p) // plan.advance + 1


def samples_for_days(days: float, minutes_per_sample: float = NAB_SAMPLE_MINUTES) -> int:
    return int(round(days * 24 * 60 / minutes_per_sample))


def write_activity(path, series: ActivitySeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "bit"])
        for i, b in enumerate(series.bits):
            w.writerow([i, int(b)])


def read_activity(path, device: int = 0) -> ActivitySeries:
    bits = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["index", "bit"]:
            raise LoadError(f"{path}:1: expected header 'index,bit'")
        for lineno, row in enumerate(reader, start=2):
            try:
                idx, bit = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise LoadError(f"{path}:{lineno}: malformed row {row}") from None
            if idx != len(bits) or bit not in (0, 1):
                raise LoadError(f"{path}:{lineno}: expected index {len(bits)} with bit 0/1, got {row}")
            bits.append(bit)
    return ActivitySeries.observed(np.array(bits, dtype=np.uint8), device)


def nab_path(root=None) -> Path:
    """Location of the machine-temperature file, honouring ``FASTGRANT_NAB_DIR``."""
    if root is None:
        root = os.environ.get(NAB_ENV) or Path(__file__).resolve().parents[2] / "data" / "nab"
    return Path(root) / NAB_RELATIVE_PATH
