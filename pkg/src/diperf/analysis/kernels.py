"""Hot numeric loops of the offline analysis pass.

A record file from a long run holds tens of thousands of records swept
at one-second resolution, so binning and concurrency counting are the
only compute-bound parts of the pipeline.  Each kernel exists twice:
a pure-numpy version (always available) and a numba ``@njit`` version
used by default when numba imports.  Set ``DIPERF_NUMBA=0`` to force
the numpy path; both produce bit-identical results.

``benchmarks/bench_kernels.py`` times one against the other.
"""

from __future__ import annotations

import os

import numpy as np


def numba_requested() -> bool:
    return os.environ.get("DIPERF_NUMBA", "1").strip().lower() not in (
        "0", "false", "no", "off")


# -- pure numpy ---------------------------------------------------------

def np_bin_counts(bin_idx: np.ndarray, n_bins: int) -> np.ndarray:
    """Occurrences per bin for indices already clipped to [0, n_bins)."""
    return np.bincount(bin_idx, minlength=n_bins).astype(np.int64)[:n_bins]


def np_bin_sums(bin_idx: np.ndarray, values: np.ndarray,
                n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin (sum, count) for indices already clipped to [0, n_bins)."""
    sums = np.bincount(bin_idx, weights=values, minlength=n_bins)[:n_bins]
    counts = np.bincount(bin_idx, minlength=n_bins).astype(np.int64)[:n_bins]
    return sums, counts


def np_concurrency(lo: np.ndarray, hi: np.ndarray, n_samples: int) -> np.ndarray:
    """Active-interval count per sample; interval i covers samples [lo[i], hi[i])."""
    diff = np.zeros(n_samples + 1, dtype=np.int64)
    mask = lo < hi
    np.add.at(diff, lo[mask], 1)
    np.add.at(diff, hi[mask], -1)
    return np.cumsum(diff)[:n_samples]


def np_trailing_mean(times: np.ndarray, values: np.ndarray, window: int) -> np.ndarray:
    """Mean of values whose time lies in (t_i - window, t_i], per point i."""
    csum = np.concatenate(([0.0], np.cumsum(values)))
    lo = np.searchsorted(times, times - window, side="right")
    idx = np.arange(len(times))
    return (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)


# -- numba --------------------------------------------------------------

_HAVE_NUMBA = False
if numba_requested():
    try:
        from numba import njit

        @njit(cache=True)
        def _nb_bin_counts(bin_idx, n_bins):
            out = np.zeros(n_bins, dtype=np.int64)
            for i in range(bin_idx.shape[0]):
                out[bin_idx[i]] += 1
            return out

        @njit(cache=True)
        def _nb_bin_sums(bin_idx, values, n_bins):
            sums = np.zeros(n_bins, dtype=np.float64)
            counts = np.zeros(n_bins, dtype=np.int64)
            for i in range(bin_idx.shape[0]):
                sums[bin_idx[i]] += values[i]
                counts[bin_idx[i]] += 1
            return sums, counts

        @njit(cache=True)
        def _nb_concurrency(lo, hi, n_samples):
            diff = np.zeros(n_samples + 1, dtype=np.int64)
            for i in range(lo.shape[0]):
                if lo[i] < hi[i]:
                    diff[lo[i]] += 1
                    diff[hi[i]] -= 1
            out = np.empty(n_samples, dtype=np.int64)
            running = 0
            for k in range(n_samples):
                running += diff[k]
                out[k] = running
            return out

        @njit(cache=True)
        def _nb_trailing_mean(times, values, window):
            n = times.shape[0]
            out = np.empty(n, dtype=np.float64)
            lo = 0
            acc = 0.0
            for i in range(n):
                acc += values[i]
                while times[lo] <= times[i] - window:
                    acc -= values[lo]
                    lo += 1
                out[i] = acc / (i - lo + 1)
            return out

        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - environment without numba
        _HAVE_NUMBA = False

if _HAVE_NUMBA:
    def bin_counts(bin_idx, n_bins):
        return _nb_bin_counts(np.ascontiguousarray(bin_idx, dtype=np.int64), n_bins)

    def bin_sums(bin_idx, values, n_bins):
        return _nb_bin_sums(np.ascontiguousarray(bin_idx, dtype=np.int64),
                            np.ascontiguousarray(values, dtype=np.float64), n_bins)

    def concurrency(lo, hi, n_samples):
        return _nb_concurrency(np.ascontiguousarray(lo, dtype=np.int64),
                               np.ascontiguousarray(hi, dtype=np.int64), n_samples)

    def trailing_mean(times, values, window):
        return _nb_trailing_mean(np.ascontiguousarray(times, dtype=np.int64),
                                 np.ascontiguousarray(values, dtype=np.float64),
                                 window)
else:
    bin_counts = np_bin_counts
    bin_sums = np_bin_sums
    concurrency = np_concurrency
    trailing_mean = np_trailing_mean


def active_backend() -> str:
    return "numba" if _HAVE_NUMBA else "numpy"
