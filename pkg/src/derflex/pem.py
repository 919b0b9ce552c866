"""Packetized coordination: device-driven requests, grants, packet timers.

Devices poll their own energy state and stochastically ask for a fixed
length "packet" of charging (or discharging, for batteries). The
coordinator accepts requests only while acceptance moves aggregate
demand toward the reference. Comfort violations force an opt-out that
bypasses coordination until the device is back inside its dead-band.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine
from ._rng import DRAWS_PER_STEP, derive_seed
from .agc import ReferenceSignal
from .devices import DeviceParams, EwhParams, Fleet, Mode
from .engine import PackedFleet, pack_fleets
from .errors import ConfigError, UnsupportedDirectionError
from .trace import FleetTrace


@dataclass(frozen=True)
class PemParams:
    """Packet timing knobs shared by every device in a run."""

    packet_length_s: float = 120.0
    mttr_s: float = 120.0
    poll_dt_s: float = 2.0

    def __post_init__(self):
        for name in ("packet_length_s", "mttr_s", "poll_dt_s"):
            v = getattr(self, name)
            if not (v > 0.0) or not math.isfinite(v):
                raise ConfigError(f"{name} must be a positive finite number, got {v!r}")


@dataclass(frozen=True)
class PemRequest:
    device_index: int
    direction: Mode

    def __post_init__(self):
        if self.direction not in (Mode.CHARGE, Mode.DISCHARGE):
            raise ConfigError(f"request direction must be charge or discharge, got {self.direction}")


def charge_request_rate(x: float, params: DeviceParams, pem: PemParams) -> float:
    """Charge-request rate in 1/s: grows without bound near the low edge.

    Zero at or above the band top, infinite at or below the band bottom,
    and exactly 1/mttr at the set point (the two band ratios cancel).
    """
    lo, hi, xset = params.x_lo, params.x_hi, params.x_set
    if x >= hi:
        return 0.0
    if x <= lo:
        return math.inf
    shape = (xset - lo) / (hi - xset)
    return (1.0 / pem.mttr_s) * ((hi - x) / (x - lo)) * shape


def discharge_request_rate(x: float, params: DeviceParams, pem: PemParams) -> float:
    """Mirror of the charge rate; only meaningful for dischargeable devices."""
    if isinstance(params, EwhParams) or getattr(params, "p_discharge_kw", 0.0) <= 0.0:
        raise UnsupportedDirectionError("device kind cannot discharge")
    lo, hi, xset = params.x_lo, params.x_hi, params.x_set
    if x <= lo:
        return 0.0
    if x >= hi:
        return math.inf
    shape = (hi - xset) / (xset - lo)
    return (1.0 / pem.mttr_s) * ((x - lo) / (hi - x)) * shape


def request_probability(mu: float, dt_s: float) -> float:
    """Probability of at least one request within dt for a rate-mu clock."""
    if mu < 0.0:
        raise ConfigError(f"request rate must be nonnegative, got {mu}")
    if math.isinf(mu):
        return 1.0
    return 1.0 - math.exp(-mu * dt_s)


def pem_poll(packed: PackedFleet, pem: PemParams, seed: int, step: int = 0) -> list[PemRequest]:
    """One request round for every standby device.

    A device with both directions available races two exponential
    clocks: it requests within dt with probability 1-exp(-(mu_c+mu_d)dt)
    and the winning direction is charge with probability mu_c/(mu_c+mu_d).
    Devices outside the band request the restoring direction surely.
    """
    devices = np.arange(packed.n, dtype=np.uint64)
    base = int(step) * DRAWS_PER_STEP
    req_dir = engine.poll_requests(
        packed.x, packed.mode, packed.x_lo, packed.x_hi,
        packed.k_charge, packed.k_discharge, packed.p_discharge,
        pem.mttr_s, pem.poll_dt_s, int(seed), devices, base)
    out = []
    for i in np.flatnonzero(req_dir):
        d = Mode.CHARGE if req_dir[i] == 1 else Mode.DISCHARGE
        out.append(PemRequest(device_index=int(i), direction=d))
    return out


def pem_grant(requests: list[PemRequest], p_dem_kw: float, p_ref_kw: float,
              packed: PackedFleet, pem: PemParams) -> list[PemRequest]:
    """Accept the FIFO prefix of requests that keeps shrinking |error|.

    Charge requests are scanned before discharge requests; the scan in
    each direction stops at the first request whose grant would leave
    the absolute error no smaller. Granted devices switch mode and get
    a fresh packet timer; denied devices are untouched.
    """
    req_dir = np.zeros(packed.n, dtype=np.int8)
    for r in requests:
        req_dir[r.device_index] = 1 if r.direction == Mode.CHARGE else 2
    contrib = engine.power_contributions(
        packed.x, packed.mode, packed.p_charge, packed.p_discharge,
        packed.x_lo, packed.x_hi)
    e0 = p_ref_kw - p_dem_kw
    before = packed.mode.copy()
    engine.grant_toward_error(e0, req_dir, packed.p_charge, packed.p_discharge,
                              packed.mode, packed.packet_s, pem.packet_length_s,
                              contrib)
    granted = np.flatnonzero(packed.mode != before)
    by_index = {int(i) for i in granted}
    return [r for r in requests if r.device_index in by_index]


def pem_step_and_optout(packed: PackedFleet, pem: PemParams,
                        draw_lps: float = 0.0) -> None:
    """Advance one poll interval: physics, packet expiry, opt-out rules."""
    engine.step_and_optout(
        packed.kind, packed.x, packed.mode, packed.packet_s,
        packed.chg_x_per_s, packed.dis_x_per_s, packed.x_lo, packed.x_hi,
        packed.loss_per_s, packed.inv_tank, packed.x_amb, packed.inlet_temp,
        draw_lps, pem.poll_dt_s)


def _as_packed(fleet: Fleet | list[Fleet] | PackedFleet) -> PackedFleet:
    if isinstance(fleet, PackedFleet):
        return fleet
    return pack_fleets(fleet)


def _resample_x0(packed: PackedFleet, seed: int) -> None:
    rng = np.random.default_rng(derive_seed(seed, 0xA11CE))
    u = rng.random(packed.n)
    packed.x[:] = packed.x_lo + u * (packed.x_hi - packed.x_lo)
    packed.mode[:] = 0
    packed.packet_s[:] = 0.0


def simulate_pem(fleet: Fleet | list[Fleet] | PackedFleet,
                 ref: ReferenceSignal,
                 pem: PemParams | None = None,
                 seed: int = 0,
                 *,
                 burn_in_s: float = 900.0,
                 burn_in_ref_kw: float | None = None,
                 start_hour: int = 0,
                 x0: np.ndarray | None = None,
                 track: bool = True,
                 beta_charge: float = 0.0,
                 beta_discharge: float = 0.0,
                 backend: str | None = None) -> FleetTrace:
    """Closed-loop packetized run; returns the trace of the scored window.

    The fleet first settles for burn_in_s seconds against a constant
    reference (the first sample of ref unless burn_in_ref_kw is given),
    then tracks ref itself. Initial states are resampled uniformly over
    each device's dead-band from seed unless x0 is supplied. With
    track=False grants ignore the reference and are instead accepted
    independently with the given per-direction fractions.
    """
    pem = pem or PemParams()
    if abs(ref.dt_s - pem.poll_dt_s) > 1e-12:
        raise ConfigError(
            f"reference dt {ref.dt_s} s must equal the poll interval {pem.poll_dt_s} s")
    packed = _as_packed(fleet)
    if x0 is not None:
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape != (packed.n,):
            raise ConfigError(f"x0 must have shape ({packed.n},), got {x0.shape}")
        packed.x[:] = x0
        packed.mode[:] = 0
        packed.packet_s[:] = 0.0
    else:
        _resample_x0(packed, seed)
    dt = pem.poll_dt_s
    n_burn = int(round(burn_in_s / dt))
    ref_kw = np.asarray(ref.samples_kw, dtype=np.float64)
    n_steps = ref_kw.shape[0]
    draw = engine.draw_series(packed, n_steps, dt, start_hour)
    sim_seed = derive_seed(seed, 0x9EC)
    if n_burn > 0:
        hold = float(ref_kw[0]) if burn_in_ref_kw is None else float(burn_in_ref_kw)
        burn_ref = np.full(n_burn, hold)
        burn_draw = np.full(n_burn, draw[0])
        engine.run_pem(packed, burn_ref, burn_draw, dt,
                       pem.packet_length_s, pem.mttr_s, sim_seed,
                       step0=0, track=track,
                       beta_charge=beta_charge, beta_discharge=beta_discharge,
                       backend=backend)
    p_dem, mode_counts, pem_counts = engine.run_pem(
        packed, ref_kw, draw, dt,
        pem.packet_length_s, pem.mttr_s, sim_seed,
        step0=n_burn, track=track,
        beta_charge=beta_charge, beta_discharge=beta_discharge,
        backend=backend)
    t_s = np.arange(n_steps) * dt
    return FleetTrace(t_s=t_s, p_ref_kw=ref_kw, p_dem_kw=p_dem,
                      mode_counts=mode_counts, dt_s=dt, pem_counts=pem_counts)
