from __future__ import annotations

import numpy as np
import pytest

from derflex.errors import ConfigError, UndefinedPrecisionError
from derflex.scoring import (
    accuracy,
    delay_score,
    precision,
    resample_to_grid,
    score_series,
    window_starts,
    windows_for_hours,
)

GRID = 10.0
WIN = 300  # 50 min window in grid samples
LAGS = 31


def _hour_pair(shift_steps=0, seed=0):
    """Reference and a demand copy delayed by shift_steps 2 s samples."""
    rng = np.random.default_rng(seed)
    n = 1800
    base = np.cumsum(rng.normal(0.0, 1.0, n + shift_steps))
    base = base - base.mean()
    return base[shift_steps:shift_steps + n], base[:n].copy()


def test_perfect_tracking_scores_ones():
    ref, dem = _hour_pair()
    rep = score_series(ref, dem, dt_s=2.0)
    assert rep.accuracy == pytest.approx(1.0, abs=1e-12)
    assert rep.delay == pytest.approx(1.0, abs=1e-12)
    assert rep.precision == pytest.approx(1.0, abs=1e-12)
    assert rep.composite == pytest.approx(1.0, abs=1e-12)
    assert rep.best_lag_s == 0.0


def test_pure_delay_shows_up_in_the_lag_and_delay_score():
    # response identical but 120 s late: t_k = 120, x_d = |120-300|/300 = 0.6
    ref, dem = _hour_pair(shift_steps=60, seed=1)
    rep = score_series(ref, dem, dt_s=2.0)
    assert rep.best_lag_s == pytest.approx(120.0)
    assert rep.delay == pytest.approx(0.6, abs=1e-12)
    assert rep.accuracy == pytest.approx(1.0, abs=1e-9)


def test_delay_score_line():
    assert delay_score(0.0) == pytest.approx(1.0)
    assert delay_score(120.0) == pytest.approx(0.6)
    assert delay_score(300.0) == pytest.approx(0.0)
    assert delay_score(150.0) == pytest.approx(0.5)


def test_precision_oracle_ninety_percent():
    # alternating +-1 tracked by +-0.9: mad = 1, mae = 0.1
    ref = np.tile([1.0, -1.0], 200)
    dem = 0.9 * ref
    assert precision(ref, dem) == pytest.approx(0.9, abs=1e-12)


def test_precision_complete_miss_scores_zero():
    ref = np.tile([1.0, -1.0], 200)
    assert precision(ref, np.zeros_like(ref)) == pytest.approx(0.0, abs=1e-12)


def test_precision_constant_reference_uses_mean_magnitude():
    ref = np.full(100, 4.0)
    assert precision(ref, np.full(100, 3.0)) == pytest.approx(0.75)


def test_precision_zero_reference_is_undefined():
    with pytest.raises(UndefinedPrecisionError):
        precision(np.zeros(100), np.ones(100))


def test_precision_ignores_shared_baseload():
    ref = np.tile([1.0, -1.0], 200)
    assert precision(ref + 100.0, 0.9 * ref + 100.0) == pytest.approx(0.9, abs=1e-12)


def test_accuracy_matches_bruteforce_lag_scan():
    rng = np.random.default_rng(42)
    for _ in range(100):
        ref = rng.normal(size=WIN)
        dem = rng.normal(size=WIN + LAGS - 1)
        x_a, t_k = accuracy(ref, dem, WIN)
        best, best_g = -np.inf, 0
        for g in range(LAGS):
            w = dem[g:g + WIN]
            c = np.corrcoef(ref, w)[0, 1]
            if c > best:
                best, best_g = c, g
        assert x_a == pytest.approx(best, abs=1e-12)
        assert t_k == pytest.approx(best_g * GRID)


def test_accuracy_is_scale_and_shift_invariant():
    rng = np.random.default_rng(3)
    ref = rng.normal(size=WIN)
    dem = rng.normal(size=WIN + LAGS - 1)
    a0, t0 = accuracy(ref, dem, WIN)
    a1, t1 = accuracy(ref, 7.5 * dem + 40.0, WIN)
    assert a1 == pytest.approx(a0, abs=1e-12)
    assert t1 == t0


def test_accuracy_flat_window_rules():
    flat = np.ones(WIN)
    pad = np.ones(WIN + LAGS - 1)
    x_a, _ = accuracy(flat, pad, WIN)
    assert x_a == 1.0  # two trendless windows agree
    moving = np.linspace(0.0, 1.0, WIN + LAGS - 1)
    x_a, _ = accuracy(flat, moving, WIN)
    assert x_a == 0.0  # flat against moving carries no information


def test_accuracy_validates_lengths():
    with pytest.raises(ConfigError):
        accuracy(np.ones(WIN), np.ones(WIN), WIN)  # no room for the lag scan
    with pytest.raises(ConfigError):
        accuracy(np.ones(1), np.ones(LAGS), 1)


def test_inverted_response_scores_negative_accuracy():
    ref, _ = _hour_pair(seed=5)
    rep = score_series(ref, -ref, dt_s=2.0)
    # the lag scan keeps the best of 31 lags, so the result is the least
    # negative correlation, still far below zero for an inverted response
    assert rep.accuracy < -0.8


def test_window_count_formula():
    assert windows_for_hours(1) == 1
    assert windows_for_hours(2) == 2
    assert windows_for_hours(3) == 4
    assert windows_for_hours(4) == 5
    assert windows_for_hours(6) == 8
    for k in range(1, 12):
        assert windows_for_hours(k) == (6 * k - 1) // 4


def test_window_starts_are_even_grid_snapped():
    starts = window_starts(2 * 3600.0, 2)
    assert starts[0] == 0.0
    assert starts[-1] == 2 * 3600.0 - 3000.0 - 300.0
    assert np.all(starts % GRID == 0.0)
    span = starts[-1] - starts[0]
    gaps = np.diff(window_starts(6 * 3600.0, 8))
    assert np.all(np.abs(gaps - gaps.mean()) <= GRID)
    assert span > 0.0


def test_window_starts_need_room():
    with pytest.raises(ConfigError):
        window_starts(3000.0, 1)


def test_resample_means_blocks():
    series = np.arange(10.0)
    out = resample_to_grid(series, dt_s=2.0)
    assert out == pytest.approx([2.0, 7.0])
    assert resample_to_grid(series, dt_s=10.0) == pytest.approx(series)


def test_resample_rejects_incompatible_dt():
    with pytest.raises(ConfigError):
        resample_to_grid(np.ones(100), dt_s=3.0)
    with pytest.raises(ConfigError):
        resample_to_grid(np.ones(2), dt_s=2.0)


def test_aggregates_are_minima_over_windows():
    # two-hour run: perfect first hour, sign-flipped second hour
    ref, _ = _hour_pair(seed=7)
    ref2 = np.concatenate([ref, ref])
    dem2 = np.concatenate([ref, -ref])
    rep = score_series(ref2, dem2, dt_s=2.0)
    assert len(rep.per_window) == 2
    assert rep.accuracy == min(w.x_a for w in rep.per_window)
    assert rep.precision == min(w.x_p for w in rep.per_window)
    assert rep.accuracy < 0.5


def test_score_series_infers_whole_hours_only():
    rng = np.random.default_rng(11)
    base = np.cumsum(rng.normal(0.0, 1.0, 2700))
    # 1.5 h is not a whole number of hours, so the caller must say k_hours
    with pytest.raises(ConfigError):
        score_series(base, base, dt_s=2.0)
    rep = score_series(base, base, dt_s=2.0, k_hours=1)
    assert rep.accuracy == pytest.approx(1.0, abs=1e-12)
