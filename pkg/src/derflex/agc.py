"""Normalized regulation signals: loading, statistics, selection, synthesis.

Signals are dimensionless samples in [-1, 1] at a fixed sample period
(2 s by default). References handed to fleet simulations are built by
scaling a one-hour signal to MW and adding a baseload.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ._rng import derive_seed
from .errors import ConfigError, DataError, MalformedSignalError, SelectionError

DEFAULT_DT_S = 2.0

# Shape parameters of the synthesized signal: a mean-reverting random
# walk smoothed by a short moving average, reflected into [-1, 1]. The
# relaxation time keeps the dominant energy well below 1/60 Hz.
_OU_RELAX_S = 180.0
_OU_STATIONARY_SD = 0.32
_SMOOTH_S = 30.0
_MEAN_TOL = 1.0e-6


@dataclass(frozen=True)
class AgcTrace:
    """A normalized regulation signal sampled on a uniform grid."""

    samples: np.ndarray
    dt_s: float = DEFAULT_DT_S

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    @property
    def samples_per_hour(self) -> int:
        return int(round(3600.0 / self.dt_s))

    @property
    def n_hours(self) -> int:
        return len(self.samples) // self.samples_per_hour

    def hour(self, index: int) -> "AgcTrace":
        spH = self.samples_per_hour
        if not 0 <= index < self.n_hours:
            raise DataError(f"hour index {index} out of range (have {self.n_hours} whole hours)")
        return AgcTrace(self.samples[index * spH:(index + 1) * spH].copy(), self.dt_s)


@dataclass(frozen=True)
class AgcStats:
    """Hourly statistics of a regulation signal.

    mu and sigma are the mean and population standard deviation of the
    hourly means; hourly_stds are within-hour population deviations.
    """

    hourly_means: np.ndarray
    hourly_stds: np.ndarray
    mu: float
    sigma: float
    n_hours: int

    def representative_targets(self) -> list[float]:
        """Hourly-mean targets for the six standard study signals."""
        s = self.sigma
        return [2 * s, 2 * s, -2 * s, -2 * s, 3 * s, -3 * s]


@dataclass(frozen=True)
class ReferenceSignal:
    """A power reference in MW on the same grid as the fleet simulation."""

    samples_mw: np.ndarray
    dt_s: float = DEFAULT_DT_S

    def __post_init__(self):
        object.__setattr__(self, "samples_mw", np.asarray(self.samples_mw, dtype=np.float64))

    @property
    def samples_kw(self) -> np.ndarray:
        return self.samples_mw * 1000.0

    @property
    def duration_s(self) -> float:
        return len(self.samples_mw) * self.dt_s

    @classmethod
    def from_kw(cls, samples_kw, dt_s: float = DEFAULT_DT_S) -> "ReferenceSignal":
        return cls(samples_mw=np.asarray(samples_kw, dtype=np.float64) / 1000.0,
                   dt_s=dt_s)


@dataclass(frozen=True)
class SelectedHour:
    target_mean: float
    hour_index: int
    realized_mean: float
    trace: AgcTrace = field(repr=False)


def load_agc(path: str, dt_s: float = DEFAULT_DT_S) -> AgcTrace:
    """Read a signal file: one float per line, '#' starts a comment."""
    values: list[float] = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open signal file {path!r}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                v = float(text)
            except ValueError:
                raise MalformedSignalError(
                    f"{path}:{lineno}: not a number: {text!r}", line_number=lineno)
            if not np.isfinite(v) or v < -1.0 or v > 1.0:
                raise MalformedSignalError(
                    f"{path}:{lineno}: sample {v!r} outside [-1, 1]", line_number=lineno)
            values.append(v)
    if not values:
        raise DataError(f"signal file {path!r} contains no samples")
    return AgcTrace(np.array(values, dtype=np.float64), dt_s)


def hourly_stats(trace: AgcTrace) -> AgcStats:
    """Per-hour means/deviations; a trailing partial hour is dropped."""
    spH = trace.samples_per_hour
    n_hours = len(trace.samples) // spH
    if n_hours < 1:
        raise DataError(
            f"need at least one whole hour of samples ({spH}), got {len(trace.samples)}")
    used = trace.samples[:n_hours * spH].reshape(n_hours, spH)
    means = used.mean(axis=1)
    stds = used.std(axis=1)  # population
    return AgcStats(
        hourly_means=means,
        hourly_stds=stds,
        mu=float(means.mean()),
        sigma=float(means.std()),
        n_hours=n_hours,
    )


def select_representative(
    trace: AgcTrace,
    seed: int,
    targets: list[float] | None = None,
    provenance_path: str | None = None,
) -> list[SelectedHour]:
    """Pick one distinct hour per target mean, closest-band first.

    Qualifiers are hours whose mean lies within a tolerance band of the
    target; the band starts at 0.1 sigma and doubles until at least one
    unused hour qualifies. Ties are broken uniformly at random under the
    seed. An hour is never selected twice.
    """
    stats = hourly_stats(trace)
    if targets is None:
        targets = stats.representative_targets()
    means = stats.hourly_means
    chosen: list[SelectedHour] = []
    used: set[int] = set()
    for t_ix, target in enumerate(targets):
        tol = 0.1 * stats.sigma if stats.sigma > 0 else 0.1
        qualifiers = np.array([], dtype=np.intp)
        # A band of 4 sigma around any target covers every hour; beyond
        # that widening cannot reveal new candidates.
        while tol <= 64 * max(stats.sigma, 0.1):
            ok = np.abs(means - target) <= tol
            ok_ix = [i for i in np.flatnonzero(ok) if i not in used]
            if ok_ix:
                qualifiers = np.array(ok_ix, dtype=np.intp)
                break
            tol *= 2.0
        if qualifiers.size == 0:
            raise SelectionError(
                f"no unused hour qualifies for target mean {target:+.4f} "
                f"(dataset has {stats.n_hours} hours)")
        rng = np.random.default_rng(derive_seed(seed, t_ix))
        pick = int(qualifiers[rng.integers(0, qualifiers.size)])
        used.add(pick)
        chosen.append(SelectedHour(
            target_mean=float(target),
            hour_index=pick,
            realized_mean=float(means[pick]),
            trace=trace.hour(pick),
        ))
    if provenance_path is not None:
        with open(provenance_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["target_mean", "hour_index", "realized_mean"])
            for sel in chosen:
                writer.writerow([f"{sel.target_mean:.10g}", sel.hour_index,
                                 f"{sel.realized_mean:.10g}"])
    return chosen


def synthesize_agc(
    seed: int,
    target_means: list[float],
    dt_s: float = DEFAULT_DT_S,
) -> AgcTrace:
    """Generate one hour per target mean, stacked into a single trace.

    Each hour is an independent mean-reverting walk, smoothed, reflected
    into [-1, 1], then shift-clipped until its mean matches the target
    to within 1e-6.
    """
    if not target_means:
        raise ConfigError("need at least one target hourly mean")
    hours = [_synthesize_hour(seed, ix, m, dt_s) for ix, m in enumerate(target_means)]
    return AgcTrace(np.concatenate(hours), dt_s)


def _synthesize_hour(seed: int, hour_ix: int, target: float, dt_s: float) -> np.ndarray:
    if not -1.0 < target < 1.0:
        raise SelectionError(f"target hourly mean {target} not attainable inside [-1, 1]")
    n = int(round(3600.0 / dt_s))
    rng = np.random.default_rng(derive_seed(seed, hour_ix))
    theta = dt_s / _OU_RELAX_S
    noise_sd = _OU_STATIONARY_SD * np.sqrt(2.0 * theta)
    shocks = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = target + _OU_STATIONARY_SD * shocks[0]
    for i in range(1, n):
        x[i] = x[i - 1] + theta * (target - x[i - 1]) + noise_sd * shocks[i]
    win = max(1, int(round(_SMOOTH_S / dt_s)))
    if win > 1:
        kernel = np.ones(win) / win
        x = np.convolve(np.pad(x, (win // 2, win - 1 - win // 2), mode="edge"),
                        kernel, mode="valid")
    x = _reflect(x)
    for _ in range(200):
        err = target - x.mean()
        if abs(err) <= 0.5 * _MEAN_TOL:
            break
        x = np.clip(x + err, -1.0, 1.0)
    if abs(x.mean() - target) > _MEAN_TOL:
        raise SelectionError(
            f"cannot realize hourly mean {target:+.4f} inside [-1, 1]")
    return x


def _reflect(x: np.ndarray) -> np.ndarray:
    """Fold values into [-1, 1] by reflection at the boundaries."""
    y = np.mod(x + 1.0, 4.0)
    y = np.where(y > 2.0, 4.0 - y, y)
    return y - 1.0


def make_reference(
    hour: AgcTrace,
    scale_mw: float,
    k_hours: int = 1,
    baseload_mw: float = 0.0,
) -> ReferenceSignal:
    """Tile a one-hour signal k times, scale to MW, add baseload."""
    spH = hour.samples_per_hour
    if len(hour.samples) != spH:
        raise DataError(
            f"make_reference needs exactly one hour ({spH} samples), got {len(hour.samples)}")
    if k_hours < 1:
        raise ConfigError(f"k_hours must be >= 1, got {k_hours}")
    tiled = np.tile(hour.samples, int(k_hours))
    return ReferenceSignal(baseload_mw + scale_mw * tiled, hour.dt_s)
