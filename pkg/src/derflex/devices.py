"""Device models and fleet construction.

Two device kinds share one state convention: x is the stored-energy
coordinate (state of charge in [0, 1] for a battery, tank temperature in
deg F for a water heater), with a comfort dead-band [x_lo, x_hi] around
a setpoint x_set. Mode semantics are identical across kinds; a water
heater simply has no discharge direction.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from ._rng import derive_seed
from .errors import ConfigError, DataError, UnsupportedDirectionError

# Thermal conversion, fixed once: 1 kWh = 3412 BTU, water is 2.2046 lb/L
# at 1 BTU/(lb degF). A 1 kW element heats `tank_liters` of water at
# 3412 / 3600 / (2.2046 * tank_liters) degF per second.
BTU_PER_KWH = 3412.0
LB_PER_LITER = 2.2046


class Mode(enum.IntEnum):
    STANDBY = 0
    CHARGE = 1
    DISCHARGE = 2
    OPT_OUT = 3


@dataclass(frozen=True)
class EssParams:
    """Battery parameters; defaults describe a 5 kW / 13.5 kWh unit."""

    p_charge_kw: float = 5.0
    p_discharge_kw: float = 5.0
    eta_c: float = 0.95
    eta_d: float = 0.95
    e_cap_kwh: float = 13.5
    x_set: float = 0.5
    x_lo: float = 0.1
    x_hi: float = 0.9


@dataclass(frozen=True)
class EwhParams:
    """Electric water heater; defaults describe a 4 kW, 303 L tank."""

    p_charge_kw: float = 4.0
    tank_liters: float = 303.0
    x_amb: float = 70.0
    inlet_temp: float = 60.0
    loss_per_s: float = 2.0e-6
    x_set: float = 130.0
    x_lo: float = 120.0
    x_hi: float = 140.0


DeviceParams = EssParams | EwhParams


@dataclass
class DeviceState:
    x: float
    mode: Mode = Mode.STANDBY
    packet_remaining_s: float = 0.0
    rng_stream: int = 0


def ess_charge_rate_x_per_s(p: EssParams) -> float:
    """SoC gained per second while charging."""
    return p.eta_c * p.p_charge_kw / (p.e_cap_kwh * 3600.0)


def ess_discharge_rate_x_per_s(p: EssParams) -> float:
    """SoC lost per second while discharging (grid sees p_discharge_kw)."""
    return p.p_discharge_kw / (p.eta_d * p.e_cap_kwh * 3600.0)


def ewh_heat_rate_f_per_s(p: EwhParams) -> float:
    """Temperature rise per second with the element on, losses aside."""
    return p.p_charge_kw * BTU_PER_KWH / 3600.0 / (LB_PER_LITER * p.tank_liters)


def ewh_kw_per_f_per_s(p: EwhParams) -> float:
    """Electrical power equivalent of 1 degF/s for this tank."""
    return LB_PER_LITER * p.tank_liters * 3600.0 / BTU_PER_KWH


def ewh_holding_power_kw(p: EwhParams, draw_lps: float) -> float:
    """Average power that holds the tank at x_set under a given draw."""
    need_f_per_s = (p.loss_per_s * (p.x_set - p.x_amb)
                    + (draw_lps / p.tank_liters) * (p.x_set - p.inlet_temp))
    return max(0.0, need_f_per_s) * ewh_kw_per_f_per_s(p)


def ewh_stability_limit_s(p: EwhParams, max_draw_lps: float) -> float:
    """Largest forward-Euler step that keeps the thermal update contractive."""
    rate = p.loss_per_s + max_draw_lps / p.tank_liters
    if rate <= 0.0:
        return math.inf
    return 0.1 / rate


def ess_step(p: EssParams, s: DeviceState, dt_s: float) -> DeviceState:
    """Advance one battery by dt. Opt-out drives x back toward the band."""
    x = s.x
    if s.mode == Mode.CHARGE:
        x += ess_charge_rate_x_per_s(p) * dt_s
    elif s.mode == Mode.DISCHARGE:
        x -= ess_discharge_rate_x_per_s(p) * dt_s
    elif s.mode == Mode.OPT_OUT:
        if s.x < p.x_lo:
            x += ess_charge_rate_x_per_s(p) * dt_s
        elif s.x > p.x_hi:
            x -= ess_discharge_rate_x_per_s(p) * dt_s
    x = min(1.0, max(0.0, x))
    return replace(s, x=x)


def ewh_step(p: EwhParams, s: DeviceState, dt_s: float, draw_lps: float = 0.0) -> DeviceState:
    """Advance one water heater by dt under a hot-water draw in L/s."""
    if s.mode == Mode.DISCHARGE:
        raise UnsupportedDirectionError("a water heater cannot discharge")
    limit = ewh_stability_limit_s(p, draw_lps)
    if dt_s > limit:
        raise ConfigError(
            f"dt={dt_s:g} s exceeds thermal stability limit {limit:g} s")
    heating = s.mode == Mode.CHARGE or (s.mode == Mode.OPT_OUT and s.x < p.x_lo)
    dxdt = (-p.loss_per_s * (s.x - p.x_amb)
            - (draw_lps / p.tank_liters) * (s.x - p.inlet_temp))
    if heating:
        dxdt += ewh_heat_rate_f_per_s(p)
    return replace(s, x=s.x + dt_s * dxdt)


@dataclass
class Fleet:
    """A homogeneous-kind fleet stored as parallel arrays.

    Scalar parameter arrays all have length n. For a battery fleet the
    thermal columns are zero; for a water heater fleet the discharge
    columns are zero.
    """

    kind: str  # "ess" | "ewh"
    n: int
    dt_s: float
    nominal: EssParams | EwhParams
    heterogeneity: float
    seed: int
    p_charge_kw: np.ndarray
    p_discharge_kw: np.ndarray
    chg_x_per_s: np.ndarray
    dis_x_per_s: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    x_set: np.ndarray
    loss_per_s: np.ndarray
    inv_tank: np.ndarray
    x_amb: np.ndarray
    inlet_temp: np.ndarray
    x0: np.ndarray
    water_draw_profile: np.ndarray | None = None
    e_cap_kwh: np.ndarray | None = None

    @property
    def is_ewh(self) -> bool:
        return self.kind == "ewh"

    def device(self, i: int) -> tuple[EssParams | EwhParams, DeviceState]:
        """Materialize one (params, state) pair; intended for inspection."""
        if self.kind == "ess":
            p = EssParams(
                p_charge_kw=float(self.p_charge_kw[i]),
                p_discharge_kw=float(self.p_discharge_kw[i]),
                eta_c=float(self.chg_x_per_s[i] * self.e_cap_kwh[i] * 3600.0
                            / self.p_charge_kw[i]),
                eta_d=float(self.p_discharge_kw[i]
                            / (self.dis_x_per_s[i] * self.e_cap_kwh[i] * 3600.0)),
                e_cap_kwh=float(self.e_cap_kwh[i]),
                x_set=float(self.x_set[i]),
                x_lo=float(self.x_lo[i]),
                x_hi=float(self.x_hi[i]),
            )
        else:
            p = EwhParams(
                p_charge_kw=float(self.p_charge_kw[i]),
                tank_liters=float(1.0 / self.inv_tank[i]),
                x_amb=float(self.x_amb[i]),
                inlet_temp=float(self.inlet_temp[i]),
                loss_per_s=float(self.loss_per_s[i]),
                x_set=float(self.x_set[i]),
                x_lo=float(self.x_lo[i]),
                x_hi=float(self.x_hi[i]),
            )
        return p, DeviceState(x=float(self.x0[i]), rng_stream=i)

    def devices(self):
        return [self.device(i) for i in range(self.n)]


def _sample_positive(rng, nominal, z, n, upper=None, lower=0.0):
    if z == 0.0:
        return np.full(n, float(nominal))
    out = rng.normal(nominal, z * abs(nominal), n)
    bad = ~np.isfinite(out) | (out <= lower)
    if upper is not None:
        bad |= out > upper
    while bad.any():
        out[bad] = rng.normal(nominal, z * abs(nominal), int(bad.sum()))
        bad = ~np.isfinite(out) | (out <= lower)
        if upper is not None:
            bad |= out > upper
    return out


def build_fleet(
    kind: str,
    n: int,
    nominal: EssParams | EwhParams | None = None,
    heterogeneity: float = 0.0,
    seed: int = 0,
    dt_s: float = 2.0,
    water_draw_profile: np.ndarray | None = None,
) -> Fleet:
    """Construct a fleet of n devices around nominal parameters.

    With heterogeneity z > 0 every numeric parameter is drawn from
    Normal(nominal, z * nominal), rejection-resampled until physically
    valid (positive rates and capacities, efficiencies in (0, 1],
    ordered dead-band). z = 0 reproduces the nominal values exactly.
    Initial x is uniform inside each device's dead-band.
    """
    if kind not in ("ess", "ewh"):
        raise ConfigError(f"unknown device kind {kind!r}")
    if n < 1:
        raise ConfigError(f"fleet size must be >= 1, got {n}")
    z = float(heterogeneity)
    if z < 0.0:
        raise ConfigError(f"heterogeneity must be >= 0, got {z}")
    rng = np.random.default_rng(derive_seed(seed, 0x51EE7))
    zeros = np.zeros(n)

    if kind == "ess":
        p = nominal if nominal is not None else EssParams()
        if not isinstance(p, EssParams):
            raise ConfigError("nominal parameters do not match kind 'ess'")
        pc = _sample_positive(rng, p.p_charge_kw, z, n)
        pd = _sample_positive(rng, p.p_discharge_kw, z, n)
        ec = _sample_positive(rng, p.e_cap_kwh, z, n)
        etac = _sample_positive(rng, p.eta_c, z, n, upper=1.0)
        etad = _sample_positive(rng, p.eta_d, z, n, upper=1.0)
        lo, st, hi = _sample_band(rng, p.x_lo, p.x_set, p.x_hi, z, n,
                                  floor=0.0, ceil=1.0)
        fleet = Fleet(
            kind="ess", n=n, dt_s=dt_s, nominal=p, heterogeneity=z, seed=seed,
            p_charge_kw=pc, p_discharge_kw=pd,
            chg_x_per_s=etac * pc / (ec * 3600.0),
            dis_x_per_s=pd / (etad * ec * 3600.0),
            x_lo=lo, x_hi=hi, x_set=st,
            loss_per_s=zeros.copy(), inv_tank=zeros.copy(),
            x_amb=zeros.copy(), inlet_temp=zeros.copy(),
            x0=np.empty(n),
            e_cap_kwh=ec,
        )
    else:
        p = nominal if nominal is not None else EwhParams()
        if not isinstance(p, EwhParams):
            raise ConfigError("nominal parameters do not match kind 'ewh'")
        profile = (np.asarray(water_draw_profile, dtype=np.float64)
                   if water_draw_profile is not None else DEFAULT_DRAW_PROFILE.copy())
        if profile.shape != (24,) or (profile < 0).any():
            raise ConfigError("water draw profile must be 24 nonnegative L/s values")
        pc = _sample_positive(rng, p.p_charge_kw, z, n)
        tank = _sample_positive(rng, p.tank_liters, z, n)
        loss = _sample_positive(rng, p.loss_per_s, z, n) if p.loss_per_s > 0 \
            else np.full(n, p.loss_per_s)
        amb = _sample_positive(rng, p.x_amb, z, n)
        inlet = _sample_positive(rng, p.inlet_temp, z, n)
        lo, st, hi = _sample_band(rng, p.x_lo, p.x_set, p.x_hi, z, n,
                                  floor=None, ceil=None)
        # Keep the forcing physically sensible: supply water and ambient
        # air must sit below the setpoint or a tank could never cool.
        bad = (inlet >= st) | (amb >= st)
        while bad.any():
            k = int(bad.sum())
            inlet[bad] = rng.normal(p.inlet_temp, max(z * p.inlet_temp, 1e-12), k) \
                if z > 0 else p.inlet_temp
            amb[bad] = rng.normal(p.x_amb, max(z * p.x_amb, 1e-12), k) if z > 0 else p.x_amb
            bad = (inlet >= st) | (amb >= st)
        limit = 0.1 / max(loss.max() + profile.max() / tank.min(), 1e-30)
        if dt_s > limit:
            raise ConfigError(
                f"dt={dt_s:g} s violates thermal stability limit {limit:g} s")
        fleet = Fleet(
            kind="ewh", n=n, dt_s=dt_s, nominal=p, heterogeneity=z, seed=seed,
            p_charge_kw=pc, p_discharge_kw=zeros.copy(),
            chg_x_per_s=pc * BTU_PER_KWH / 3600.0 / (LB_PER_LITER * tank),
            dis_x_per_s=zeros.copy(),
            x_lo=lo, x_hi=hi, x_set=st,
            loss_per_s=loss, inv_tank=1.0 / tank,
            x_amb=amb, inlet_temp=inlet,
            x0=np.empty(n),
            water_draw_profile=profile,
        )
    fleet.x0[:] = fleet.x_lo + (fleet.x_hi - fleet.x_lo) * rng.random(n)
    return fleet


def _sample_band(rng, lo0, set0, hi0, z, n, floor=None, ceil=None):
    if z == 0.0:
        return np.full(n, lo0), np.full(n, set0), np.full(n, hi0)
    lo = rng.normal(lo0, z * abs(lo0), n)
    st = rng.normal(set0, z * abs(set0), n)
    hi = rng.normal(hi0, z * abs(hi0), n)
    bad = ~(np.isfinite(lo) & np.isfinite(st) & np.isfinite(hi)) | \
        (lo >= st) | (st >= hi)
    if floor is not None:
        bad |= lo < floor
    if ceil is not None:
        bad |= hi > ceil
    while bad.any():
        k = int(bad.sum())
        lo[bad] = rng.normal(lo0, z * abs(lo0), k)
        st[bad] = rng.normal(set0, z * abs(set0), k)
        hi[bad] = rng.normal(hi0, z * abs(hi0), k)
        bad = ~(np.isfinite(lo) & np.isfinite(st) & np.isfinite(hi)) | \
            (lo >= st) | (st >= hi)
        if floor is not None:
            bad |= lo < floor
        if ceil is not None:
            bad |= hi > ceil
    return lo, st, hi


# Household hot-water draw in L/s per device, by hour of day: morning
# and evening peaks, afternoon trough.  Integrates to roughly 70 L/day.
DEFAULT_DRAW_PROFILE = np.array([
    0.00016, 0.00016, 0.00016, 0.00016, 0.00016, 0.00016,   # 0-5
    0.00060, 0.00120,                                       # 6-7
    0.00190, 0.00190, 0.00190,                              # 8-10 morning peak
    0.00120, 0.00080, 0.00070, 0.00040,                     # 11-14
    0.00012, 0.00012,                                       # 15-16 trough
    0.00040, 0.00080, 0.00120,                              # 17-19
    0.00170, 0.00170, 0.00170,                              # 20-22 evening peak
    0.00050,                                                # 23
])


def water_draw(profile: np.ndarray, hour: float) -> float:
    """Draw rate in L/s at a (possibly fractional) hour of day."""
    prof = np.asarray(profile, dtype=np.float64)
    if prof.shape != (24,):
        raise ConfigError("draw profile must have 24 entries")
    return float(prof[int(hour) % 24])


def load_draw_profile(path: str) -> np.ndarray:
    """Read a draw profile CSV with columns hour,liters_per_s."""
    rows: dict[int, float] = {}
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot open draw profile {path!r}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or \
                {"hour", "liters_per_s"} - set(reader.fieldnames):
            raise DataError(f"{path}: expected header hour,liters_per_s")
        for lineno, row in enumerate(reader, start=2):
            try:
                h = int(row["hour"])
                v = float(row["liters_per_s"])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: bad row {row!r}")
            if not 0 <= h <= 23 or v < 0 or h in rows:
                raise DataError(f"{path}:{lineno}: invalid or duplicate hour {h}")
            rows[h] = v
    if len(rows) != 24:
        raise DataError(f"{path}: need all 24 hours, got {len(rows)}")
    return np.array([rows[h] for h in range(24)])
