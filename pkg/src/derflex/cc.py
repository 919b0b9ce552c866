"""Centralized coordination: full-state greedy dispatch each interval.

The coordinator sees every device's energy state. Each step it switches
the lowest-x standby devices on (or the extreme-x active devices off)
until flipping one more device would stop shrinking the tracking error.
Comfort is not protected; only hard physical limits force a device idle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from ._rng import derive_seed
from .agc import ReferenceSignal
from .devices import Fleet, Mode
from .engine import PackedFleet, pack_fleets
from .errors import ConfigError
from .trace import FleetTrace


@dataclass(frozen=True)
class CcCommand:
    device_index: int
    target_mode: Mode

    def __post_init__(self):
        if self.target_mode == Mode.OPT_OUT:
            raise ConfigError("central dispatch never commands opt-out")


def cc_dispatch(packed: PackedFleet, p_ref_kw: float, p_dem_kw: float) -> list[CcCommand]:
    """Mode-change commands that greedily shrink |p_ref - p_dem|.

    Surplus demand need (e > 0) recruits standby devices to charge in
    ascending x order, then relieves discharging devices in the same
    order; deficit mirrors both scans in descending x. A device is
    flipped only while the flip strictly reduces the absolute error
    (equivalently, its rate is under twice the remaining error), and
    each scan stops at the first eligible device that fails the test.
    Ties in x break by ascending device index. Does not mutate state.
    """
    x = packed.x
    mode = packed.mode
    pc = packed.p_charge
    pd = packed.p_discharge
    e0 = p_ref_kw - p_dem_kw
    cmds: list[CcCommand] = []
    if e0 > 0.0:
        order = np.argsort(x, kind="mergesort")
        acc = 0.0
        for i in order:
            if mode[i] == 0 and x[i] < packed.safe_hi[i]:
                r = pc[i]
                if r < 2.0 * (e0 - acc):
                    acc += r
                    cmds.append(CcCommand(int(i), Mode.CHARGE))
                else:
                    break
        e1 = e0 - acc
        acc2 = 0.0
        for i in order:
            if mode[i] == 2:
                r = pd[i]
                if r < 2.0 * (e1 - acc2):
                    acc2 += r
                    cmds.append(CcCommand(int(i), Mode.STANDBY))
                else:
                    break
    elif e0 < 0.0:
        order = np.argsort(-x, kind="mergesort")
        acc = 0.0
        for i in order:
            if mode[i] == 0 and pd[i] > 0.0 and x[i] > packed.safe_lo[i]:
                r = pd[i]
                if r < -2.0 * (e0 + acc):
                    acc += r
                    cmds.append(CcCommand(int(i), Mode.DISCHARGE))
                else:
                    break
        e1 = e0 + acc
        acc2 = 0.0
        for i in order:
            if mode[i] == 1:
                r = pc[i]
                if r < -2.0 * (e1 + acc2):
                    acc2 += r
                    cmds.append(CcCommand(int(i), Mode.STANDBY))
                else:
                    break
    return cmds


def apply_commands(packed: PackedFleet, commands: list[CcCommand]) -> None:
    for c in commands:
        packed.mode[c.device_index] = int(c.target_mode)


def simulate_cc(fleet: Fleet | list[Fleet] | PackedFleet,
                ref: ReferenceSignal,
                seed: int = 0,
                *,
                start_hour: int = 0,
                x0: np.ndarray | None = None,
                backend: str | None = None) -> FleetTrace:
    """Closed-loop central dispatch over the whole reference signal.

    Randomness enters only through the initial states, resampled
    uniformly over each device's dead-band from seed unless x0 is
    given. Devices found at hard limits are force-idled before each
    dispatch; the dispatch interval equals the reference sample period.
    """
    if isinstance(fleet, PackedFleet):
        packed = fleet
    else:
        packed = pack_fleets(fleet)
    if x0 is not None:
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape != (packed.n,):
            raise ConfigError(f"x0 must have shape ({packed.n},), got {x0.shape}")
        packed.x[:] = x0
    else:
        rng = np.random.default_rng(derive_seed(seed, 0xA11CE))
        u = rng.random(packed.n)
        packed.x[:] = packed.x_lo + u * (packed.x_hi - packed.x_lo)
    packed.mode[:] = 0
    packed.packet_s[:] = 0.0
    ref_kw = np.asarray(ref.samples_kw, dtype=np.float64)
    n_steps = ref_kw.shape[0]
    dt = ref.dt_s
    draw = engine.draw_series(packed, n_steps, dt, start_hour)
    p_dem, mode_counts = engine.run_cc(packed, ref_kw, draw, dt, backend=backend)
    t_s = np.arange(n_steps) * dt
    return FleetTrace(t_s=t_s, p_ref_kw=ref_kw, p_dem_kw=p_dem,
                      mode_counts=mode_counts, dt_s=dt, pem_counts=None)
