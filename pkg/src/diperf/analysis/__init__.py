"""Offline metric pipeline over invocation records.

Maps records to global time, derives the five aggregate metrics
(response time, throughput, offered load, per-client utilization and
fairness), and fits moving-average / polynomial trends.  Everything is
a pure function over an immutable record set; analyzing the same input
twice produces identical output.

Service response time is the request duration minus the network latency
(both legs by default) minus the calibrated client overhead, clamped at
zero.  Offered load at second t counts the requests in flight at t.
A client's utilization is its completed jobs divided by everything the
service completed while that client was active; fairness is jobs divided
by utilization, which lands on that same service-wide total.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..model import (
    ClientStats,
    ClockOffset,
    InvocationRecord,
    MetricSeries,
    Outcome,
    parse_record_line,
)
from ..timesync import offset_for, to_global
from . import kernels

DEFAULT_THROUGHPUT_QUANTUM = 60
DEFAULT_LOAD_QUANTUM = 1
DEFAULT_RESPONSE_QUANTUM = 60
DEFAULT_MA_WINDOW = 160
DEFAULT_POLY_DEGREE = 6
LATENCY_LEGS = 2  # subtract request + reply legs; set 1 for one-way only

KNEE_GAIN_THRESHOLD = 0.05  # relative throughput gain per added unit of load


@dataclass(frozen=True)
class GlobalRecord:
    """An invocation on the reconciled global clock."""

    tester_id: int
    sequence: int
    start_global: int  # ms
    end_global: int    # ms
    outcome: Outcome
    response_time: int | None  # ms, successes only

    @property
    def duration_ms(self) -> int:
        return self.end_global - self.start_global


@dataclass
class Diagnostics:
    """Tallies of records the pipeline had to skip or repair."""

    skipped_no_offset: int = 0
    clamped_negative: int = 0


def _response_time(record: InvocationRecord, latency_legs: int,
                   diagnostics: Diagnostics) -> int | None:
    if record.outcome is not Outcome.SUCCESS:
        return None
    value = record.duration_ms
    if record.latency_estimate is not None:
        value -= latency_legs * record.latency_estimate
    if record.client_overhead is not None:
        value -= record.client_overhead
    if value < 0:
        diagnostics.clamped_negative += 1
        value = 0
    return value


def normalize(records: Sequence[InvocationRecord],
              offsets: Mapping[int, Sequence[ClockOffset]],
              latency_legs: int = LATENCY_LEGS) -> tuple[list[GlobalRecord], Diagnostics]:
    """Map local-time records to global time via each tester's offset history.

    Each record uses the latest offset measured at or before its start;
    records with no preceding offset are excluded and tallied.
    """
    diagnostics = Diagnostics()
    out = []
    for record in records:
        offset = offset_for(offsets.get(record.tester_id, ()), record.start_ms)
        if offset is None:
            diagnostics.skipped_no_offset += 1
            continue
        out.append(GlobalRecord(
            record.tester_id, record.sequence,
            to_global(record.start_ms, offset), to_global(record.end_ms, offset),
            record.outcome, _response_time(record, latency_legs, diagnostics)))
    out.sort(key=lambda r: (r.start_global, r.tester_id, r.sequence))
    return out, diagnostics


def from_global(records: Iterable[InvocationRecord],
                latency_legs: int = LATENCY_LEGS) -> tuple[list[GlobalRecord], Diagnostics]:
    """Adopt records whose timestamps are already global (record files)."""
    diagnostics = Diagnostics()
    out = [GlobalRecord(r.tester_id, r.sequence, r.start_ms, r.end_ms, r.outcome,
                        _response_time(r, latency_legs, diagnostics))
           for r in records]
    out.sort(key=lambda r: (r.start_global, r.tester_id, r.sequence))
    return out, diagnostics


def load_record_file(path: str | Path,
                     latency_legs: int = LATENCY_LEGS) -> tuple[list[GlobalRecord], Diagnostics]:
    records = []
    with open(path, "r", encoding="ascii") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(parse_record_line(line))
    return from_global(records, latency_legs=latency_legs)


# -- series -------------------------------------------------------------

def _success_ends(records: Sequence[GlobalRecord]) -> np.ndarray:
    return np.array([r.end_global for r in records if r.outcome is Outcome.SUCCESS],
                    dtype=np.int64)


def throughput_series(records: Sequence[GlobalRecord], quantum: int = DEFAULT_THROUGHPUT_QUANTUM) -> MetricSeries:
    """Successful completions per quantum, zero-filled across the span."""
    ends = _success_ends(records)
    if ends.size == 0:
        return MetricSeries(quantum, ())
    step = 1000 * quantum
    idx = ends // step
    first, last = int(idx.min()), int(idx.max())
    counts = kernels.bin_counts(idx - first, last - first + 1)
    points = tuple(((first + k) * quantum, float(counts[k]))
                   for k in range(counts.shape[0]))
    return MetricSeries(quantum, points)


def load_series(records: Sequence[GlobalRecord], quantum: int = DEFAULT_LOAD_QUANTUM) -> MetricSeries:
    """Requests in flight sampled at each quantum boundary across the span.

    A record [start, end) is in flight at sample T when
    start <= T*1000 < end; all outcomes count, since failed requests
    occupy the service until they end.
    """
    if not records:
        return MetricSeries(quantum, ())
    starts = np.array([r.start_global for r in records], dtype=np.int64)
    ends = np.array([r.end_global for r in records], dtype=np.int64)
    step = 1000 * quantum
    first = int(starts.min() // step)
    last = int(-(-int(ends.max()) // step)) - 1  # last sample strictly inside a record
    if last < first:
        last = first
    n = last - first + 1
    lo = np.clip(-(-starts // step) - first, 0, n)
    hi = np.clip(-(-ends // step) - first, 0, n)
    counts = kernels.concurrency(lo, hi, n)
    points = tuple(((first + k) * quantum, float(counts[k])) for k in range(n))
    return MetricSeries(quantum, points)


def response_series(records: Sequence[GlobalRecord], quantum: int = DEFAULT_RESPONSE_QUANTUM) -> MetricSeries:
    """Mean response time of successes completing in each quantum; empty quanta omitted."""
    successes = [r for r in records if r.outcome is Outcome.SUCCESS]
    if not successes:
        return MetricSeries(quantum, ())
    ends = np.array([r.end_global for r in successes], dtype=np.int64)
    values = np.array([r.response_time for r in successes], dtype=np.float64)
    step = 1000 * quantum
    idx = ends // step
    first = int(idx.min())
    n = int(idx.max()) - first + 1
    sums, counts = kernels.bin_sums(idx - first, values, n)
    points = tuple(((first + k) * quantum, float(sums[k] / counts[k]))
                   for k in range(n) if counts[k] > 0)
    return MetricSeries(quantum, points)


# -- per-client statistics ------------------------------------------------

def active_windows(records: Sequence[GlobalRecord]) -> dict[int, tuple[int, int]]:
    """Per tester: [first start, last end) in global ms."""
    windows: dict[int, tuple[int, int]] = {}
    for r in records:
        lo, hi = windows.get(r.tester_id, (r.start_global, r.end_global))
        windows[r.tester_id] = (min(lo, r.start_global), max(hi, r.end_global))
    return windows


def detect_peak_window(records: Sequence[GlobalRecord]) -> tuple[int, int]:
    """Longest interval during which the active-tester count is at its maximum."""
    if not records:
        raise ValueError("cannot detect a peak window without records")
    deltas: dict[int, int] = {}
    for lo, hi in active_windows(records).values():
        deltas[lo] = deltas.get(lo, 0) + 1
        deltas[hi] = deltas.get(hi, 0) - 1
    times = sorted(deltas)
    count = 0
    peak = 0
    for t in times:
        count += deltas[t]
        peak = max(peak, count)
    best: tuple[int, int] | None = None
    count = 0
    run_start: int | None = None
    for t in times:  # deltas at one instant apply together, so abutting runs merge
        count += deltas[t]
        if count == peak and run_start is None:
            run_start = t
        elif count != peak and run_start is not None:
            if best is None or t - run_start > best[1] - best[0]:
                best = (run_start, t)
            run_start = None
    assert best is not None
    return best


def client_stats(records: Sequence[GlobalRecord],
                 peak_window: tuple[int, int] | None = None) -> list[ClientStats]:
    """Jobs, utilization, and fairness per tester over its share of the peak window.

    Exact rationals keep fairness * utilization == jobs free of float
    rounding.  A tester with nothing completed inside its window gets
    utilization 0 and no fairness value.
    """
    if not records:
        return []
    windows = active_windows(records)
    peak = peak_window if peak_window is not None else detect_peak_window(records)
    success_ends = np.sort(_success_ends(records))
    per_tester_ends = {
        tid: np.sort(np.array([r.end_global for r in records
                               if r.tester_id == tid and r.outcome is Outcome.SUCCESS],
                              dtype=np.int64))
        for tid in windows
    }

    def count_in(sorted_ends: np.ndarray, lo: int, hi: int) -> int:
        return int(np.searchsorted(sorted_ends, hi, side="left")
                   - np.searchsorted(sorted_ends, lo, side="left"))

    stats = []
    for tid in sorted(windows):
        win_lo = max(windows[tid][0], peak[0])
        win_hi = min(windows[tid][1], peak[1])
        if win_lo >= win_hi:
            jobs = total = 0
        else:
            jobs = count_in(per_tester_ends[tid], win_lo, win_hi)
            total = count_in(success_ends, win_lo, win_hi)
        if jobs == 0:
            utilization, fairness = Fraction(0), None
        else:
            utilization, fairness = Fraction(jobs, total), total
        stats.append(ClientStats(tid, jobs, windows[tid], utilization, fairness))
    return stats


# -- trend fitting ----------------------------------------------------------

@dataclass(frozen=True)
class MovingAverageFit:
    window: int  # seconds

    def __post_init__(self):
        if self.window <= 0:
            raise ValueError("window must be > 0")


@dataclass(frozen=True)
class PolynomialFit:
    """Least-squares polynomial over time normalized to [0, 1]."""

    degree: int
    coefficients: tuple[float, ...]  # ascending powers
    rms_residual: float
    time_origin: int  # seconds
    time_span: int    # seconds, >= 1

    def __post_init__(self):
        if not all(np.isfinite(c) for c in self.coefficients):
            raise ValueError("polynomial coefficients must be finite")

    def predict(self, times: Sequence[int]) -> np.ndarray:
        x = (np.asarray(times, dtype=np.float64) - self.time_origin) / self.time_span
        return np.polynomial.polynomial.polyval(x, np.asarray(self.coefficients))


def moving_average(series: MetricSeries,
                   window: int = DEFAULT_MA_WINDOW) -> tuple[MovingAverageFit, MetricSeries]:
    """Trailing-window mean: each point averages inputs within (t-window, t]."""
    fit = MovingAverageFit(window)
    if not series.points:
        return fit, MetricSeries(series.quantum, ())
    times = np.array(series.times(), dtype=np.int64)
    values = np.array(series.values(), dtype=np.float64)
    smoothed = kernels.trailing_mean(times, values, window)
    points = tuple((int(t), float(v)) for t, v in zip(times, smoothed))
    return fit, MetricSeries(series.quantum, points)


def polyfit_series(series: MetricSeries, degree: int = DEFAULT_POLY_DEGREE) -> PolynomialFit:
    """Least-squares fit over [0,1]-normalized time; needs more points than the degree."""
    if len(series) <= degree:
        raise ValueError(f"need more than {degree} points, got {len(series)}")
    times = np.array(series.times(), dtype=np.float64)
    values = np.array(series.values(), dtype=np.float64)
    origin = int(times[0])
    span = max(int(times[-1]) - origin, 1)
    x = (times - origin) / span
    coeffs = np.polynomial.polynomial.polyfit(x, values, degree)
    residuals = np.polynomial.polynomial.polyval(x, coeffs) - values
    return PolynomialFit(
        degree=degree,
        coefficients=tuple(float(c) for c in coeffs),
        rms_residual=float(np.sqrt(np.mean(residuals ** 2))),
        time_origin=origin,
        time_span=span,
    )


# -- saturation ------------------------------------------------------------

def join_on_time(throughput: MetricSeries, load: MetricSeries) -> list[tuple[float, float]]:
    """(mean load, throughput) per throughput quantum where both series exist."""
    load_times = np.array(load.times(), dtype=np.int64)
    load_values = np.array(load.values(), dtype=np.float64)
    csum = np.concatenate(([0.0], np.cumsum(load_values)))
    pairs = []
    for t, tp in throughput.points:
        lo = int(np.searchsorted(load_times, t, side="left"))
        hi = int(np.searchsorted(load_times, t + throughput.quantum, side="left"))
        if hi > lo:
            pairs.append(((csum[hi] - csum[lo]) / (hi - lo), tp))
    return pairs


def saturation_estimate(throughput: MetricSeries, load: MetricSeries) -> float | None:
    """Smallest load beyond which throughput gains stay under 5% per unit of load.

    Returns None when the curve never flattens (service unsaturated in
    the observed range).
    """
    if not throughput.points or not load.points:
        raise ValueError("both series must be non-empty")
    pairs = join_on_time(throughput, load)
    if not pairs:
        raise ValueError("series do not overlap in time")
    by_level: dict[int, list[float]] = {}
    for level, tp in pairs:
        by_level.setdefault(int(round(level)), []).append(tp)
    levels = sorted(by_level)
    curve = [float(np.mean(by_level[k])) for k in levels]
    if len(levels) < 2:
        return None
    gains = []
    for j in range(len(levels) - 1):
        base = max(curve[j], 1e-12)
        gains.append((curve[j + 1] - curve[j]) / ((levels[j + 1] - levels[j]) * base))
    for i in range(len(gains)):  # knee must still be followed by observed gains
        if all(g < KNEE_GAIN_THRESHOLD for g in gains[i:]):
            return float(levels[i])
    return None
