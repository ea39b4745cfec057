"""Report bundling: series CSVs, per-client stats, fit coefficients, summary.

Every CSV has a header row and a strictly increasing time (or tester id)
column, plain enough for gnuplot (``set datafile separator ','``).
The whole bundle is a deterministic function of the record file:
re-running the analysis yields byte-identical output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis
from .model import ClientStats, MetricSeries, Outcome


@dataclass(frozen=True)
class ReportBundle:
    out_dir: Path
    series_files: dict[str, Path]
    client_stats_file: Path
    bubble_file: Path
    fit_file: Path
    summary_file: Path


def _fmt(value: float) -> str:
    as_float = float(value)
    if as_float.is_integer():
        return str(int(as_float))
    return repr(as_float)


def write_series_csv(path: str | Path, series: MetricSeries) -> None:
    lines = ["time,value"]
    lines += [f"{t},{_fmt(v)}" for t, v in series.points]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_series_csv(path: str | Path, quantum: int) -> MetricSeries:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    points = []
    for line in lines[1:]:
        t, v = line.split(",")
        points.append((int(t), float(v)))
    return MetricSeries(quantum, tuple(points))


def write_client_stats_csv(path: str | Path, stats: Sequence[ClientStats]) -> None:
    lines = ["tester_id,jobs,utilization,fairness"]
    for cs in stats:
        fairness = "" if cs.fairness is None else str(cs.fairness)
        lines.append(f"{cs.tester_id},{cs.jobs_completed},{_fmt(cs.utilization)},{fairness}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def bubble_data(stats: Sequence[ClientStats],
                load: MetricSeries) -> list[tuple[int, float, int]]:
    """(tester_id, mean offered load over its active window, jobs completed)."""
    times = np.array(load.times(), dtype=np.int64)
    values = np.array(load.values(), dtype=np.float64)
    rows = []
    for cs in stats:
        lo_ms, hi_ms = cs.active_window
        lo = int(np.searchsorted(times * 1000, lo_ms, side="left"))
        hi = int(np.searchsorted(times * 1000, hi_ms, side="left"))
        mean_load = float(values[lo:hi].mean()) if hi > lo else 0.0
        rows.append((cs.tester_id, mean_load, cs.jobs_completed))
    return rows


def write_bubble_csv(path: str | Path, rows: Sequence[tuple[int, float, int]]) -> None:
    lines = ["tester_id,mean_load,jobs"]
    lines += [f"{tid},{_fmt(mean_load)},{jobs}" for tid, mean_load, jobs in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def fit_payload(fit: analysis.PolynomialFit) -> dict:
    return {
        "degree": fit.degree,
        "coefficients": list(fit.coefficients),
        "rms_residual": fit.rms_residual,
        "time_origin": fit.time_origin,
        "time_span": fit.time_span,
    }


def run_analysis(records_path: str | Path, out_dir: str | Path, *,
                 quantum_throughput: int = analysis.DEFAULT_THROUGHPUT_QUANTUM,
                 quantum_load: int = analysis.DEFAULT_LOAD_QUANTUM,
                 quantum_response: int = analysis.DEFAULT_RESPONSE_QUANTUM,
                 ma_window: int = analysis.DEFAULT_MA_WINDOW,
                 poly_degree: int = analysis.DEFAULT_POLY_DEGREE,
                 latency_legs: int = analysis.LATENCY_LEGS,
                 peak_window: tuple[int, int] | None = None) -> ReportBundle:
    """Analyze a record file into a report bundle under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, diagnostics = analysis.load_record_file(records_path, latency_legs=latency_legs)

    throughput = analysis.throughput_series(records, quantum_throughput)
    load = analysis.load_series(records, quantum_load)
    response = analysis.response_series(records, quantum_response)
    _, throughput_ma = analysis.moving_average(throughput, ma_window)
    _, response_ma = analysis.moving_average(response, ma_window)
    stats = analysis.client_stats(records, peak_window) if records else []

    series_files = {}
    for name, series in [
        ("throughput", throughput),
        ("load", load),
        ("response_time", response),
        ("throughput_smoothed", throughput_ma),
        ("response_time_smoothed", response_ma),
    ]:
        path = out / f"{name}.csv"
        write_series_csv(path, series)
        series_files[name] = path

    stats_path = out / "client_stats.csv"
    write_client_stats_csv(stats_path, stats)
    bubble_path = out / "bubble.csv"
    write_bubble_csv(bubble_path, bubble_data(stats, load))

    fits = {}
    for name, series in [("throughput", throughput), ("response_time", response)]:
        if len(series) > poly_degree:
            fits[name] = fit_payload(analysis.polyfit_series(series, poly_degree))
    fit_path = out / "fit.json"
    fit_path.write_text(json.dumps(fits, sort_keys=True, indent=2) + "\n",
                        encoding="ascii")

    saturation_label = "n/a"
    if throughput.points and load.points:
        try:
            saturation = analysis.saturation_estimate(throughput, load)
        except ValueError:
            saturation = None
        saturation_label = "unsaturated" if saturation is None else _fmt(saturation)

    outcomes = {outcome: 0 for outcome in Outcome}
    for r in records:
        outcomes[r.outcome] += 1
    span_s = ((max(r.end_global for r in records) - records[0].start_global) / 1000
              if records else 0.0)
    summary_lines = [
        f"records: {len(records)}",
        f"span_seconds: {span_s:.1f}",
        *(f"outcome_{o.wire}: {n}" for o, n in outcomes.items()),
        f"skipped_no_offset: {diagnostics.skipped_no_offset}",
        f"clamped_negative_response: {diagnostics.clamped_negative}",
        f"saturation_load: {saturation_label}",
    ]
    summary_path = out / "summary.txt"
    summary_path.write_text("\n".join(summary_lines) + "\n", encoding="ascii")

    return ReportBundle(out, series_files, stats_path, bubble_path, fit_path, summary_path)
