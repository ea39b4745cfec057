"""Independent brute-force recomputations of every aggregate metric.

These deliberately avoid the pipeline's event/prefix-sum tricks: each
value is recounted from scratch per quantum or per sample, so they stay
meaningful as an oracle no matter how the pipeline is optimized.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from diperf.analysis import GlobalRecord
from diperf.model import MetricSeries, Outcome
from diperf.timesync import offset_for, to_global


def brute_normalize(records, offsets, latency_legs=2):
    """Record-by-record offset application and response-time arithmetic."""
    out = []
    skipped = clamped = 0
    for r in records:
        off = offset_for(offsets.get(r.tester_id, ()), r.start_ms)
        if off is None:
            skipped += 1
            continue
        rt = None
        if r.outcome is Outcome.SUCCESS:
            rt = (r.end_ms - r.start_ms)
            rt -= latency_legs * (r.latency_estimate or 0)
            rt -= r.client_overhead or 0
            if rt < 0:
                clamped += 1
                rt = 0
        out.append(GlobalRecord(r.tester_id, r.sequence,
                                to_global(r.start_ms, off), to_global(r.end_ms, off),
                                r.outcome, rt))
    out.sort(key=lambda g: (g.start_global, g.tester_id, g.sequence))
    return out, skipped, clamped


def brute_throughput(records, quantum):
    ends = [r.end_global for r in records if r.outcome is Outcome.SUCCESS]
    if not ends:
        return MetricSeries(quantum, ())
    step = 1000 * quantum
    first = min(ends) // step
    last = max(ends) // step
    points = []
    for k in range(first, last + 1):
        count = sum(1 for e in ends if k * step <= e < (k + 1) * step)
        points.append((k * quantum, float(count)))
    return MetricSeries(quantum, tuple(points))


def brute_load(records, quantum=1):
    if not records:
        return MetricSeries(quantum, ())
    starts = np.array([r.start_global for r in records])
    ends = np.array([r.end_global for r in records])
    step = 1000 * quantum
    first = int(starts.min()) // step
    last = -(-int(ends.max()) // step) - 1
    last = max(last, first)
    points = []
    for k in range(first, last + 1):
        t_ms = k * step
        count = int(np.count_nonzero((starts <= t_ms) & (t_ms < ends)))
        points.append((k * quantum, float(count)))
    return MetricSeries(quantum, tuple(points))


def brute_response(records, quantum):
    successes = [r for r in records if r.outcome is Outcome.SUCCESS]
    if not successes:
        return MetricSeries(quantum, ())
    step = 1000 * quantum
    first = min(r.end_global for r in successes) // step
    last = max(r.end_global for r in successes) // step
    points = []
    for k in range(first, last + 1):
        values = [r.response_time for r in successes
                  if k * step <= r.end_global < (k + 1) * step]
        if values:
            points.append((k * quantum, sum(values) / len(values)))
    return MetricSeries(quantum, tuple(points))


def brute_windows(records):
    windows = {}
    for r in records:
        tid = r.tester_id
        if tid not in windows:
            windows[tid] = [r.start_global, r.end_global]
        windows[tid][0] = min(windows[tid][0], r.start_global)
        windows[tid][1] = max(windows[tid][1], r.end_global)
    return {tid: tuple(w) for tid, w in windows.items()}


def brute_peak_window(records, resolution_ms=1):
    """Millisecond scan over the record span; small inputs only."""
    windows = list(brute_windows(records).values())
    t0 = min(w[0] for w in windows)
    t1 = max(w[1] for w in windows)
    counts = {}
    for t in range(t0, t1 + 1, resolution_ms):
        counts[t] = sum(1 for lo, hi in windows if lo <= t < hi)
    peak = max(counts.values())
    best = None
    run_start = None
    ticks = sorted(counts)
    for t in ticks:
        if counts[t] == peak and run_start is None:
            run_start = t
        elif counts[t] != peak and run_start is not None:
            if best is None or t - run_start > best[1] - best[0]:
                best = (run_start, t)
            run_start = None
    if run_start is not None:
        end = ticks[-1] + resolution_ms
        if best is None or end - run_start > best[1] - best[0]:
            best = (run_start, end)
    return best


def brute_client_stats(records, peak_window):
    windows = brute_windows(records)
    stats = {}
    for tid in sorted(windows):
        lo = max(windows[tid][0], peak_window[0])
        hi = min(windows[tid][1], peak_window[1])
        jobs = total = 0
        if lo < hi:
            for r in records:
                if r.outcome is Outcome.SUCCESS and lo <= r.end_global < hi:
                    total += 1
                    if r.tester_id == tid:
                        jobs += 1
        utilization = Fraction(jobs, total) if jobs else Fraction(0)
        fairness = total if jobs else None
        stats[tid] = (jobs, windows[tid], utilization, fairness)
    return stats


def brute_moving_average(series, window):
    points = []
    for t, _ in series.points:
        inside = [v for u, v in series.points if t - window < u <= t]
        points.append((t, sum(inside) / len(inside)))
    return MetricSeries(series.quantum, tuple(points))
