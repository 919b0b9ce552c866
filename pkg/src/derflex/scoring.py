"""Tracking-quality scores: accuracy, delay, precision, composite.

Both series are first averaged onto a 10 s grid. Accuracy is the best
Pearson correlation over response lags of 0..300 s in 10 s steps; delay
rescales the best lag to [0, 1]; precision compares instantaneous error
to the reference's own variability. A k-hour run is scored on
floor((6k-1)/4) windows of 50 minutes placed evenly over the horizon,
and each aggregate score is the minimum over windows.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UndefinedPrecisionError

GRID_S = 10.0
WINDOW_S = 3000.0
MAX_LAG_S = 300.0
LAG_STEP_S = 10.0
N_LAGS = 31


@dataclass(frozen=True)
class WindowScore:
    index: int
    t_start_s: float
    x_a: float
    x_d: float
    x_p: float
    t_k_s: float


@dataclass(frozen=True)
class ScoreReport:
    accuracy: float
    delay: float
    precision: float
    composite: float
    per_window: tuple[WindowScore, ...]
    best_lag_s: float


def resample_to_grid(series: np.ndarray, dt_s: float) -> np.ndarray:
    """Mean-downsample onto the 10 s scoring grid.

    dt must divide the grid period; a trailing partial block is dropped.
    """
    series = np.asarray(series, dtype=np.float64)
    if dt_s <= 0.0:
        raise ConfigError(f"dt_s must be positive, got {dt_s}")
    ratio = GRID_S / dt_s
    factor = int(round(ratio))
    if abs(ratio - factor) > 1e-9 or factor < 1:
        raise ConfigError(f"dt {dt_s} s does not divide the {GRID_S} s scoring grid")
    if factor == 1:
        return series.copy()
    m = len(series) // factor
    if m == 0:
        raise ConfigError("series shorter than one scoring-grid sample")
    return series[: m * factor].reshape(m, factor).mean(axis=1)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation with a degenerate-window rule.

    A window with no variation carries no trend: two flat windows count
    as perfectly correlated, a flat window against a moving one as
    uncorrelated.
    """
    da = a - a.mean()
    db = b - b.mean()
    na = float(np.sqrt(np.dot(da, da)))
    nb = float(np.sqrt(np.dot(db, db)))
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == 0.0 and nb == 0.0 else 0.0
    return float(np.dot(da, db) / (na * nb))


def accuracy(p_ref_10s: np.ndarray, p_dem_10s: np.ndarray,
             window_samples: int | None = None) -> tuple[float, float]:
    """Best correlation between the reference window and the lagged response.

    The reference spans the first window_samples grid points; the
    response is slid forward by 0..300 s in 10 s steps, so it must
    extend 30 samples past the window. Returns (x_a, t_k) with the
    smallest lag winning ties.
    """
    r = np.asarray(p_ref_10s, dtype=np.float64)
    d = np.asarray(p_dem_10s, dtype=np.float64)
    w = int(window_samples) if window_samples is not None else len(r)
    if w < 2:
        raise ConfigError("accuracy window needs at least two grid samples")
    if len(r) < w:
        raise ConfigError("reference shorter than the scoring window")
    if len(d) < w + N_LAGS - 1:
        raise ConfigError(
            f"response must cover the window plus {int(MAX_LAG_S)} s of lag")
    ref_w = r[:w]
    best = -np.inf
    best_lag = 0
    for g in range(N_LAGS):
        c = _pearson(ref_w, d[g:g + w])
        if c > best:
            best = c
            best_lag = g
    return float(best), best_lag * LAG_STEP_S


def delay_score(t_k_s: float) -> float:
    """1 for an instant response, falling linearly to 0 at a 300 s lag."""
    return min(1.0, abs(t_k_s - MAX_LAG_S) / MAX_LAG_S)


def precision(p_ref_10s: np.ndarray, p_dem_10s: np.ndarray) -> float:
    """1 minus mean absolute error relative to the reference's variability.

    The error scale is the window's mean absolute deviation from its own
    mean, so a large constant baseload does not mask tracking error. A
    constant reference falls back to its mean magnitude; an identically
    zero reference has no scale at all and raises.
    """
    r = np.asarray(p_ref_10s, dtype=np.float64)
    d = np.asarray(p_dem_10s, dtype=np.float64)
    if r.shape != d.shape:
        raise ConfigError(f"length mismatch: {r.shape} vs {d.shape}")
    scale = float(np.mean(np.abs(r - r.mean())))
    magnitude = float(np.mean(np.abs(r)))
    # resampling leaves float noise on a flat reference, so treat any
    # deviation below ppb of the magnitude as constant
    if scale <= 1e-9 * magnitude:
        scale = magnitude
    if scale == 0.0:
        raise UndefinedPrecisionError("reference is identically zero; precision has no scale")
    return 1.0 - float(np.mean(np.abs(r - d))) / scale


def windows_for_hours(k_hours: int) -> int:
    return (6 * k_hours - 1) // 4


def window_starts(horizon_s: float, n_windows: int) -> np.ndarray:
    """Start times (s) of n windows placed evenly, snapped to the grid."""
    span = horizon_s - WINDOW_S - MAX_LAG_S
    if span < 0.0:
        raise ConfigError(
            f"horizon {horizon_s} s cannot fit a {WINDOW_S} s window plus {MAX_LAG_S} s lag")
    if n_windows == 1:
        pos = np.zeros(1)
    else:
        pos = np.linspace(0.0, span, n_windows)
    return np.round(pos / GRID_S) * GRID_S


def score_series(p_ref: np.ndarray, p_dem: np.ndarray, dt_s: float,
                 k_hours: int | None = None) -> ScoreReport:
    """Score a tracking run; aggregates are minima over the windows."""
    r10 = resample_to_grid(p_ref, dt_s)
    d10 = resample_to_grid(p_dem, dt_s)
    if r10.shape != d10.shape:
        raise ConfigError("reference and response must have equal length")
    horizon_s = len(r10) * GRID_S
    if k_hours is None:
        k_hours = int(round(horizon_s / 3600.0))
        if k_hours < 1 or abs(horizon_s - k_hours * 3600.0) > GRID_S / 2:
            raise ConfigError(
                f"horizon {horizon_s} s is not a whole number of hours; pass k_hours")
    n_win = windows_for_hours(k_hours)
    starts = window_starts(horizon_s, n_win)
    w = int(round(WINDOW_S / GRID_S))
    rows = []
    for i, t0 in enumerate(starts):
        s = int(round(t0 / GRID_S))
        ref_w = r10[s:s + w]
        dem_span = d10[s:s + w + N_LAGS - 1]
        x_a, t_k = accuracy(ref_w, dem_span, w)
        x_d = delay_score(t_k)
        x_p = precision(ref_w, d10[s:s + w])
        rows.append(WindowScore(index=i, t_start_s=float(t0),
                                x_a=x_a, x_d=x_d, x_p=x_p, t_k_s=t_k))
    x_a = min(rw.x_a for rw in rows)
    x_d = min(rw.x_d for rw in rows)
    x_p = min(rw.x_p for rw in rows)
    worst_delay = min(rows, key=lambda rw: (rw.x_d, rw.index))
    return ScoreReport(accuracy=x_a, delay=x_d, precision=x_p,
                       composite=(x_a + x_d + x_p) / 3.0,
                       per_window=tuple(rows),
                       best_lag_s=worst_delay.t_k_s)


def score_trace(trace) -> ScoreReport:
    """Score a FleetTrace (reference vs demand on the simulation grid)."""
    return score_series(trace.p_ref_kw, trace.p_dem_kw, trace.dt_s)


def write_score_csv(report: ScoreReport, path: str) -> None:
    """Per-window rows plus an aggregate summary row."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["window_index", "t_start_s", "x_a", "x_d", "x_p"])
        for rw in report.per_window:
            wr.writerow([rw.index, f"{rw.t_start_s:.10g}", f"{rw.x_a:.10g}",
                         f"{rw.x_d:.10g}", f"{rw.x_p:.10g}"])
        wr.writerow(["aggregate", "", f"{report.accuracy:.10g}",
                     f"{report.delay:.10g}", f"{report.precision:.10g}"])
