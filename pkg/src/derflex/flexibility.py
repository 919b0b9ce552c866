"""Minimum-fleet-size search and the experiment drivers built on it.

The central quantity is kW-per-device: scale a fleet up by fixed steps
until its tracking precision clears a threshold on every reference
signal, then report zeta = 1000 kW / n_min. Drivers cover parameter
sweeps, diurnal water-heater runs, device mixtures, and multi-hour
horizons.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import derive_seed
from .agc import ReferenceSignal
from .cc import simulate_cc
from .devices import (
    DEFAULT_DRAW_PROFILE,
    DeviceParams,
    EssParams,
    EwhParams,
    build_fleet,
    water_draw,
)
from .errors import CapExceededError, ConfigError
from .pem import PemParams, simulate_pem
from .scoring import score_series

MW_KW = 1000.0


@dataclass(frozen=True)
class FlexQuery:
    """One minimum-fleet-size question: device, coordinator, signals."""

    der_kind: str = "ess"
    params: DeviceParams | None = None
    coordinator: str = "pem"
    pem_params: PemParams | None = None
    k_hours: int = 1
    signals: tuple[ReferenceSignal, ...] = ()
    x_p_des: float = 0.70
    n_start: int = 100
    delta_n: int = 100
    seeds: int = 3
    heterogeneity: float = 0.0
    start_hour: int = 0
    burn_in_s: float = 900.0
    n_max: int | None = None
    base_seed: int = 0
    draw_profile: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.der_kind not in ("ess", "ewh"):
            raise ConfigError(f"der_kind must be 'ess' or 'ewh', got {self.der_kind!r}")
        if self.coordinator not in ("cc", "pem"):
            raise ConfigError(f"coordinator must be 'cc' or 'pem', got {self.coordinator!r}")
        if len(self.signals) < 1:
            raise ConfigError("need at least one reference signal")
        if self.n_start < 1 or self.delta_n < 1:
            raise ConfigError("n_start and delta_n must be at least 1")
        if not (0.0 < self.x_p_des <= 1.0):
            raise ConfigError(f"x_p_des must be in (0, 1], got {self.x_p_des}")
        if self.seeds < 1:
            raise ConfigError("seeds must be at least 1")

    def device_params(self) -> DeviceParams:
        if self.params is not None:
            return self.params
        return EssParams() if self.der_kind == "ess" else EwhParams()

    def cap(self) -> int:
        if self.n_max is not None:
            return self.n_max
        rate = self.device_params().p_charge_kw
        return int(100 * math.ceil(MW_KW / rate))


@dataclass(frozen=True)
class FlexResult:
    n_min: int
    kw_per_device: float
    per_signal_n_min: tuple[int, ...]
    score_trajectory: tuple[tuple[int, int, float], ...]  # (signal, N, x_p)


def fleet_baseload_kw(fleet, draw_lps: float) -> float:
    """Aggregate kW that exactly holds every heater at its set point."""
    if not fleet.is_ewh:
        return 0.0
    hold_f_per_s = (fleet.loss_per_s * (fleet.x_set - fleet.x_amb)
                    + draw_lps * fleet.inv_tank * (fleet.x_set - fleet.inlet_temp))
    kw = hold_f_per_s * fleet.p_charge_kw / fleet.chg_x_per_s
    return float(np.sum(np.maximum(kw, 0.0)))


def _build_evaluator(query: FlexQuery):
    """Default evaluator: simulate, score, median precision over seeds.

    Water-heater fleets track baseload + signal, with the baseload
    recomputed for every candidate fleet so it scales with N.
    """
    params = query.device_params()
    pem = query.pem_params or PemParams()
    profile = query.draw_profile
    if profile is None and query.der_kind == "ewh":
        profile = DEFAULT_DRAW_PROFILE

    def evaluator(n: int, signal: ReferenceSignal, signal_index: int) -> float:
        scores = []
        for rep in range(query.seeds):
            fseed = derive_seed(query.base_seed, 0xF1EE7, signal_index, n, rep)
            fleet = build_fleet(query.der_kind, n, seed=fseed,
                                nominal=params,
                                heterogeneity=query.heterogeneity,
                                water_draw_profile=profile)
            ref = signal
            if query.der_kind == "ewh":
                base = fleet_baseload_kw(fleet, water_draw(profile, query.start_hour))
                ref = ReferenceSignal.from_kw(signal.samples_kw + base, signal.dt_s)
            sseed = derive_seed(query.base_seed, 0x51A, signal_index, n, rep)
            if query.coordinator == "cc":
                trace = simulate_cc(fleet, ref, seed=sseed,
                                    start_hour=query.start_hour)
            else:
                trace = simulate_pem(fleet, ref, pem, seed=sseed,
                                     burn_in_s=query.burn_in_s,
                                     start_hour=query.start_hour)
            report = score_series(trace.p_ref_kw, trace.p_dem_kw, trace.dt_s,
                                  k_hours=query.k_hours)
            scores.append(report.precision)
        return float(np.median(scores))

    return evaluator


def find_n_min(query: FlexQuery, evaluator=None, threads: int = 1) -> FlexResult:
    """Grow the fleet by delta_n until precision clears the threshold.

    Each signal runs its own search from n_start; the fleet-size answer
    is the largest per-signal requirement. The search aborts past the
    hard cap with the score trajectory attached for diagnosis.
    """
    if evaluator is None:
        evaluator = _build_evaluator(query)
    cap = query.cap()
    want_s = query.k_hours * 3600.0
    for i, sig in enumerate(query.signals):
        if isinstance(sig, ReferenceSignal) and abs(sig.duration_s - want_s) > 1e-9:
            raise ConfigError(
                f"signal {i} spans {sig.duration_s:.0f} s but the query "
                f"scores {query.k_hours} hour(s); tile it to match")

    def search(i: int):
        sig = query.signals[i]
        rows = []
        n = query.n_start
        while True:
            if n > cap:
                raise CapExceededError(
                    f"signal {i}: fleet size {n} exceeds cap {cap} "
                    f"without reaching precision {query.x_p_des}",
                    trajectory=tuple(rows))
            x_p = evaluator(n, sig, i)
            rows.append((i, n, x_p))
            if x_p > query.x_p_des:
                return n, rows
            n += query.delta_n

    m = len(query.signals)
    if threads > 1 and m > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(search, range(m)))
    else:
        results = [search(i) for i in range(m)]
    per_signal = tuple(r[0] for r in results)
    trajectory = tuple(row for r in results for row in r[1])
    n_min = max(per_signal)
    return FlexResult(n_min=n_min, kw_per_device=MW_KW / n_min,
                      per_signal_n_min=per_signal,
                      score_trajectory=trajectory)


def hourly_ewh_flexibility(signals: tuple[ReferenceSignal, ...],
                           hours=range(24),
                           *,
                           params: EwhParams | None = None,
                           pem_params: PemParams | None = None,
                           draw_profile: np.ndarray | None = None,
                           n_start_peak: int = 2500,
                           n_start_offpeak: int = 5000,
                           delta_n: int = 500,
                           seeds: int = 3,
                           x_p_des: float = 0.70,
                           base_seed: int = 0,
                           threads: int = 1,
                           n_max: int | None = None) -> dict[int, FlexResult]:
    """Per-hour kW-per-device for a water-heater fleet.

    An hour with above-average hot-water draw starts the search small
    (high flexibility expected); quiet hours start it large.
    """
    profile = DEFAULT_DRAW_PROFILE if draw_profile is None else np.asarray(draw_profile, dtype=np.float64)
    mean_draw = float(profile.mean())
    out: dict[int, FlexResult] = {}
    for hour in hours:
        n_start = n_start_peak if profile[hour % 24] >= mean_draw else n_start_offpeak
        q = FlexQuery(der_kind="ewh", params=params, coordinator="pem",
                      pem_params=pem_params, signals=tuple(signals),
                      x_p_des=x_p_des, n_start=n_start, delta_n=delta_n,
                      seeds=seeds, start_hour=int(hour) % 24,
                      base_seed=derive_seed(base_seed, 0xD1, hour),
                      draw_profile=profile, n_max=n_max)
        out[int(hour)] = find_n_min(q, threads=threads)
    return out


def mixture_fleet(z_ess: float, z_ewh: float,
                  zeta_ess_kw: float, zeta_ewh_kw: float) -> tuple[int, int]:
    """Device counts for a 1 MW product split between two fleets.

    n = round-half-up(1000 * share / zeta) for each kind.
    """
    if abs(z_ess + z_ewh - 1.0) > 1e-9:
        raise ConfigError(f"shares must sum to 1, got {z_ess} + {z_ewh}")
    if min(z_ess, z_ewh) < 0.0:
        raise ConfigError("shares must be nonnegative")
    if zeta_ess_kw <= 0.0 or zeta_ewh_kw <= 0.0:
        raise ConfigError("kW-per-device values must be positive")
    n_ess = int(math.floor(MW_KW * z_ess / zeta_ess_kw + 0.5))
    n_ewh = int(math.floor(MW_KW * z_ewh / zeta_ewh_kw + 0.5))
    return n_ess, n_ewh


def mixture_precision(z_ewh: float, zeta_ess_kw: float, zeta_ewh_kw: float,
                      signal: ReferenceSignal,
                      *,
                      ess_params: EssParams | None = None,
                      ewh_params: EwhParams | None = None,
                      pem_params: PemParams | None = None,
                      draw_profile: np.ndarray | None = None,
                      start_hour: int = 8,
                      seeds: int = 3,
                      base_seed: int = 0,
                      burn_in_s: float = 900.0,
                      k_hours: int = 1) -> float:
    """Simulated precision of a sized battery + water-heater mixture.

    The two sub-fleets are sized by mixture_fleet from their standalone
    kW-per-device figures, then run together under one packetized
    coordinator against signal plus the water-heater baseload. Returns
    the median precision over replicate seeds.
    """
    n_ess, n_ewh = mixture_fleet(1.0 - z_ewh, z_ewh, zeta_ess_kw, zeta_ewh_kw)
    profile = DEFAULT_DRAW_PROFILE if draw_profile is None else \
        np.asarray(draw_profile, dtype=np.float64)
    pem = pem_params or PemParams()
    scores = []
    for rep in range(seeds):
        fleets = []
        if n_ess > 0:
            fleets.append(build_fleet("ess", n_ess, nominal=ess_params,
                                      seed=derive_seed(base_seed, 0x313, rep, 0)))
        base = 0.0
        if n_ewh > 0:
            ewh = build_fleet("ewh", n_ewh, nominal=ewh_params,
                              seed=derive_seed(base_seed, 0x313, rep, 1),
                              water_draw_profile=profile)
            fleets.append(ewh)
            base = fleet_baseload_kw(ewh, water_draw(profile, start_hour))
        ref = ReferenceSignal.from_kw(signal.samples_kw + base, signal.dt_s)
        trace = simulate_pem(fleets, ref, pem,
                             seed=derive_seed(base_seed, 0x51B, rep),
                             burn_in_s=burn_in_s, start_hour=start_hour)
        report = score_series(trace.p_ref_kw, trace.p_dem_kw, trace.dt_s,
                              k_hours=k_hours)
        scores.append(report.precision)
    return float(np.median(scores))


def sweep_packet_mttr(packet_lengths_min, mttrs_min, base_query: FlexQuery,
                      *, check_diagonal: bool = True,
                      threads: int = 1) -> list[tuple[float, float, FlexResult]]:
    """kW-per-device over a packet-length x MTTR grid (PEM only).

    With check_diagonal, equal-packet-equal-MTTR points must be
    nonincreasing in that shared timescale.
    """
    if base_query.coordinator != "pem":
        raise ConfigError("packet/MTTR sweep applies to the packetized coordinator only")
    rows = []
    for p_min in packet_lengths_min:
        for m_min in mttrs_min:
            pem = PemParams(packet_length_s=60.0 * p_min, mttr_s=60.0 * m_min,
                            poll_dt_s=(base_query.pem_params or PemParams()).poll_dt_s)
            q = replace(base_query, pem_params=pem)
            rows.append((float(p_min), float(m_min), find_n_min(q, threads=threads)))
    if check_diagonal:
        diag = sorted((p, r) for p, m, r in rows if p == m)
        zetas = [r.kw_per_device for _, r in diag]
        for a, b in zip(zetas, zetas[1:]):
            if b > a + 1e-12:
                raise ConfigError(
                    f"kW-per-device rose along the packet=MTTR diagonal: {zetas}")
    return rows


def sweep_heterogeneity(z_values, base_query: FlexQuery,
                        threads: int = 1) -> list[tuple[float, FlexResult]]:
    """kW-per-device across parameter-spread levels z (sigma = z * mean)."""
    rows = []
    for z in z_values:
        if not (0.0 <= z <= 1.0):
            raise ConfigError(f"heterogeneity must be in [0, 1], got {z}")
        q = replace(base_query, heterogeneity=float(z))
        rows.append((float(z), find_n_min(q, threads=threads)))
    return rows


def multi_hour_flexibility(k_values, base_query: FlexQuery,
                           threads: int = 1) -> list[tuple[int, FlexResult]]:
    """kW-per-device across horizon lengths k, in hours.

    base_query holds one-hour signals; each horizon tiles them k times
    and runs its own independent search from n_start.
    """
    rows = []
    for k in k_values:
        k = int(k)
        if k < 1:
            raise ConfigError(f"horizon must be at least 1 hour, got {k}")
        tiled = tuple(ReferenceSignal(np.tile(s.samples_mw, k), s.dt_s)
                      for s in base_query.signals)
        q = replace(base_query, signals=tiled, k_hours=k)
        rows.append((k, find_n_min(q, threads=threads)))
    return rows


def average_power(signal: ReferenceSignal) -> float:
    """Mean squared sample value, in MW^2."""
    s = np.asarray(signal.samples_mw, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ConfigError("signal contains non-finite samples")
    return float(np.mean(s * s))


def write_flex_csv(result: FlexResult, path: str) -> None:
    """Search trajectory: one row per (signal, fleet size) evaluation."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["signal_index", "n", "x_p"])
        for sig, n, x_p in result.score_trajectory:
            wr.writerow([sig, n, f"{x_p:.10g}"])


def write_zeta_summary_csv(rows: list[dict], path: str) -> None:
    """Generic labeled-zeta table, e.g. per hour or per grid point."""
    if not rows:
        raise ConfigError("no rows to write")
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(keys)
        for row in rows:
            wr.writerow([row[k] for k in keys])
