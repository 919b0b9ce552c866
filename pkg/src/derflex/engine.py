"""Simulation engine with two interchangeable backends.

The same fleet-stepping semantics are implemented twice: a per-device
loop compiled with numba, and a vectorized pure-numpy fallback. The
backend is chosen by the DERFLEX_BACKEND environment variable ("numba"
or "numpy"; default numba when importable). Both paths draw randomness
from the counter-based generator in _rng, and arithmetic is ordered so
results agree bit for bit, so the choice is about speed only.

Hot-loop layout: fleets are packed into parallel float64/int8 arrays
(struct of arrays). Aggregate power is always reduced with np.dot so
both backends share one summation order.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ._rng import DRAWS_PER_STEP, uniform_array, uniform_scalar
from .devices import Fleet, Mode
from .errors import ConfigError

KIND_ESS = 0
KIND_EWH = 1

_SB = int(Mode.STANDBY)
_CHG = int(Mode.CHARGE)
_DIS = int(Mode.DISCHARGE)
_OPT = int(Mode.OPT_OUT)

_ENV_FLAG = "DERFLEX_BACKEND"


def _env_backend() -> str:
    value = os.environ.get(_ENV_FLAG, "").strip().lower()
    if value in ("numba", "numpy"):
        return value
    if value:
        raise ConfigError(f"{_ENV_FLAG} must be 'numba' or 'numpy', got {value!r}")
    return "numba" if _numba_available() else "numpy"


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def active_backend() -> str:
    """Backend that run_pem / run_cc will use for this process."""
    backend = _env_backend()
    if backend == "numba" and not _numba_available():
        return "numpy"
    return backend


def _pick_backend(requested: str | None) -> str:
    if requested is None:
        return active_backend()
    if requested not in ("numba", "numpy"):
        raise ConfigError(f"backend must be 'numba' or 'numpy', got {requested!r}")
    return requested


@dataclass
class PackedFleet:
    """Parallel-array form of one or more fleets (concatenated)."""

    kind: np.ndarray          # int8, KIND_ESS or KIND_EWH
    p_charge: np.ndarray      # kW drawn while charging
    p_discharge: np.ndarray   # kW injected while discharging
    chg_x_per_s: np.ndarray   # x gained per second charging / heating
    dis_x_per_s: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    k_charge: np.ndarray      # (x_set - x_lo) / (x_hi - x_set)
    k_discharge: np.ndarray
    safe_lo: np.ndarray       # hard/forced-idle bounds for central control
    safe_hi: np.ndarray
    loss_per_s: np.ndarray
    inv_tank: np.ndarray
    x_amb: np.ndarray
    inlet_temp: np.ndarray
    x: np.ndarray             # mutable state
    mode: np.ndarray          # int8
    packet_s: np.ndarray
    draw_profile: np.ndarray | None = None  # 24 h fleet-level L/s, EWH only

    @property
    def n(self) -> int:
        return len(self.x)

    def copy_state(self) -> "PackedFleet":
        out = PackedFleet(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        out.x = self.x.copy()
        out.mode = self.mode.copy()
        out.packet_s = self.packet_s.copy()
        return out


def pack_fleets(fleets: Fleet | list[Fleet]) -> PackedFleet:
    """Concatenate one or more fleets into kernel-ready arrays."""
    if isinstance(fleets, Fleet):
        fleets = [fleets]
    if not fleets:
        raise ConfigError("need at least one fleet")
    parts = []
    for fl in fleets:
        kind = np.full(fl.n, KIND_EWH if fl.is_ewh else KIND_ESS, dtype=np.int8)
        safe_lo = np.zeros(fl.n) if not fl.is_ewh else np.full(fl.n, -np.inf)
        safe_hi = np.ones(fl.n) if not fl.is_ewh else fl.x_hi.copy()
        parts.append(dict(
            kind=kind,
            p_charge=fl.p_charge_kw, p_discharge=fl.p_discharge_kw,
            chg_x_per_s=fl.chg_x_per_s, dis_x_per_s=fl.dis_x_per_s,
            x_lo=fl.x_lo, x_hi=fl.x_hi,
            k_charge=(fl.x_set - fl.x_lo) / (fl.x_hi - fl.x_set),
            k_discharge=(fl.x_hi - fl.x_set) / (fl.x_set - fl.x_lo),
            safe_lo=safe_lo, safe_hi=safe_hi,
            loss_per_s=fl.loss_per_s, inv_tank=fl.inv_tank,
            x_amb=fl.x_amb, inlet_temp=fl.inlet_temp,
            x=fl.x0.copy(),
        ))
    cat = {key: np.ascontiguousarray(np.concatenate([p[key] for p in parts]))
           for key in parts[0]}
    n = len(cat["x"])
    profile = None
    for fl in fleets:
        if fl.is_ewh and fl.water_draw_profile is not None:
            profile = np.asarray(fl.water_draw_profile, dtype=np.float64)
            break
    return PackedFleet(
        mode=np.full(n, _SB, dtype=np.int8),
        packet_s=np.zeros(n),
        draw_profile=profile,
        **cat,
    )


def draw_series(fleets: Fleet | list[Fleet] | PackedFleet, n_steps: int,
                dt_s: float, start_hour: float) -> np.ndarray:
    """Fleet-level hot-water draw (L/s) per step from the 24 h profile."""
    if isinstance(fleets, PackedFleet):
        profile = fleets.draw_profile
    else:
        if isinstance(fleets, Fleet):
            fleets = [fleets]
        profile = None
        for fl in fleets:
            if fl.is_ewh and fl.water_draw_profile is not None:
                profile = fl.water_draw_profile
                break
    if profile is None:
        return np.zeros(n_steps)
    hours = (start_hour + np.arange(n_steps) * dt_s / 3600.0).astype(np.int64) % 24
    return profile[hours].astype(np.float64)


# ---------------------------------------------------------------------------
# PEM backend implementations.
#
# The two functions below must stay semantically identical; the loop
# version mirrors the numpy version's accumulation order (cumsum-style
# running sums, np.dot reductions) so outputs match bit for bit.
# ---------------------------------------------------------------------------

def _pem_loop_impl(kind, pc, pd, chg_xps, dis_xps, xlo, xhi, kc, kd,
                   loss, invtank, amb, inlet,
                   x, mode, pkt,
                   ref_kw, draw_lps, dt, pkt_len, mttr, seed, step0,
                   track, beta_c, beta_d):
    n = x.shape[0]
    n_steps = ref_kw.shape[0]
    p_dem = np.zeros(n_steps)
    mode_counts = np.zeros((n_steps, 4), dtype=np.int64)
    pem_counts = np.zeros((n_steps, 4), dtype=np.int64)
    contrib = np.zeros(n)
    ones = np.ones(n)
    req_dir = np.zeros(n, dtype=np.int8)
    u_draws = np.uint64(DRAWS_PER_STEP)
    for t in range(n_steps):
        base = (step0 + np.uint64(t)) * u_draws
        c0 = base
        c1 = base + np.uint64(1)
        c2 = base + np.uint64(2)
        n_req_c = 0
        n_req_d = 0
        for i in range(n):
            req_dir[i] = 0
            if mode[i] != 0:
                continue
            xi = x[i]
            if xi <= xlo[i]:
                req_dir[i] = 1
                n_req_c += 1
            elif xi >= xhi[i]:
                if pd[i] > 0.0:
                    req_dir[i] = 2
                    n_req_d += 1
            else:
                mu_c = (xhi[i] - xi) / (xi - xlo[i]) * kc[i] / mttr
                if pd[i] > 0.0:
                    mu_d = (xi - xlo[i]) / (xhi[i] - xi) * kd[i] / mttr
                else:
                    mu_d = 0.0
                total = mu_c + mu_d
                if total > 0.0:
                    u0 = uniform_scalar(seed, np.uint64(i), c0)
                    p_any = 1.0 - np.exp(-total * dt)
                    if u0 < p_any:
                        u1 = uniform_scalar(seed, np.uint64(i), c1)
                        if u1 * total < mu_c:
                            req_dir[i] = 1
                            n_req_c += 1
                        else:
                            req_dir[i] = 2
                            n_req_d += 1
        for i in range(n):
            m = mode[i]
            if m == 1:
                contrib[i] = pc[i]
            elif m == 2:
                contrib[i] = -pd[i]
            elif m == 3:
                if x[i] < xlo[i]:
                    contrib[i] = pc[i]
                elif x[i] > xhi[i]:
                    contrib[i] = -pd[i]
                else:
                    contrib[i] = 0.0
            else:
                contrib[i] = 0.0
        p_before = np.dot(contrib, ones)
        e0 = ref_kw[t] - p_before
        n_grant_c = 0
        n_grant_d = 0
        if track == 1:
            acc = 0.0
            for i in range(n):
                if req_dir[i] == 1:
                    r = pc[i]
                    if r < 2.0 * (e0 - acc):
                        acc = acc + r
                        mode[i] = 1
                        pkt[i] = pkt_len
                        contrib[i] = pc[i]
                        n_grant_c += 1
                    else:
                        break
            e1 = e0 - acc
            acc2 = 0.0
            for i in range(n):
                if req_dir[i] == 2:
                    r = pd[i]
                    if r < -2.0 * (e1 + acc2):
                        acc2 = acc2 + r
                        mode[i] = 2
                        pkt[i] = pkt_len
                        contrib[i] = -pd[i]
                        n_grant_d += 1
                    else:
                        break
        else:
            for i in range(n):
                if req_dir[i] == 1:
                    u2 = uniform_scalar(seed, np.uint64(i), c2)
                    if u2 < beta_c:
                        mode[i] = 1
                        pkt[i] = pkt_len
                        contrib[i] = pc[i]
                        n_grant_c += 1
                elif req_dir[i] == 2:
                    u2 = uniform_scalar(seed, np.uint64(i), c2)
                    if u2 < beta_d:
                        mode[i] = 2
                        pkt[i] = pkt_len
                        contrib[i] = -pd[i]
                        n_grant_d += 1
        p_dem[t] = np.dot(contrib, ones)
        n_sb = 0
        n_chg = 0
        n_dis = 0
        n_opt = 0
        for i in range(n):
            m = mode[i]
            if m == 0:
                n_sb += 1
            elif m == 1:
                n_chg += 1
            elif m == 2:
                n_dis += 1
            else:
                n_opt += 1
        mode_counts[t, 0] = n_chg
        mode_counts[t, 1] = n_dis
        mode_counts[t, 2] = n_sb
        mode_counts[t, 3] = n_opt
        pem_counts[t, 0] = n_req_c
        pem_counts[t, 1] = n_req_d
        pem_counts[t, 2] = n_grant_c
        pem_counts[t, 3] = n_grant_d
        d = draw_lps[t]
        for i in range(n):
            m = mode[i]
            xi = x[i]
            if kind[i] == 0:
                if m == 1:
                    xn = xi + chg_xps[i] * dt
                elif m == 2:
                    xn = xi - dis_xps[i] * dt
                elif m == 3:
                    if xi < xlo[i]:
                        xn = xi + chg_xps[i] * dt
                    elif xi > xhi[i]:
                        xn = xi - dis_xps[i] * dt
                    else:
                        xn = xi
                else:
                    xn = xi
                if xn > 1.0:
                    xn = 1.0
                if xn < 0.0:
                    xn = 0.0
            else:
                heating = (m == 1) or (m == 3 and xi < xlo[i])
                dxdt = -loss[i] * (xi - amb[i]) - d * invtank[i] * (xi - inlet[i])
                if heating:
                    dxdt = dxdt + chg_xps[i]
                xn = xi + dt * dxdt
            x[i] = xn
            if m == 1 or m == 2:
                pkt[i] = pkt[i] - dt
                if pkt[i] <= 1e-9:
                    pkt[i] = 0.0
                    mode[i] = 0
            if mode[i] == 3:
                if xn >= xlo[i] and xn <= xhi[i]:
                    mode[i] = 0
            elif xn < xlo[i] or xn > xhi[i]:
                mode[i] = 3
                pkt[i] = 0.0
    return p_dem, mode_counts, pem_counts


def poll_requests(x, mode, xlo, xhi, kc, kd, pd, mttr, dt, seed, devices,
                  counter_base):
    """Request directions for one poll: 0 none, 1 charge, 2 discharge.

    Standby devices race two exponential clocks whose rates diverge at
    the dead-band edges; at or beyond an edge the matching direction is
    requested with probability one.
    """
    standby = mode == 0
    at_lo = x <= xlo
    at_hi = x >= xhi
    can_dis = pd > 0.0
    interior = standby & ~at_lo & ~at_hi
    n = x.shape[0]
    mu_c = np.zeros(n)
    mu_d = np.zeros(n)
    np.divide(xhi - x, x - xlo, out=mu_c, where=interior)
    mu_c = mu_c * kc / mttr
    np.divide(x - xlo, xhi - x, out=mu_d, where=interior & can_dis)
    mu_d = mu_d * kd / mttr
    total = mu_c + mu_d
    u0 = uniform_array(seed, devices, counter_base)
    u1 = uniform_array(seed, devices, counter_base + 1)
    p_any = 1.0 - np.exp(-total * dt)
    want = interior & (total > 0.0) & (u0 < p_any)
    dir_charge = u1 * total < mu_c
    req_dir = np.zeros(n, dtype=np.int8)
    req_dir[want & dir_charge] = 1
    req_dir[want & ~dir_charge] = 2
    req_dir[standby & at_lo] = 1
    req_dir[standby & ~at_lo & at_hi & can_dis] = 2
    return req_dir


def power_contributions(x, mode, pc, pd, xlo, xhi):
    """Per-device signed kW by mode; opt-out direction follows x."""
    opt_mask = mode == 3
    contrib = np.where(mode == 1, pc, 0.0) - np.where(mode == 2, pd, 0.0)
    contrib = np.where(opt_mask & (x < xlo), pc, contrib)
    contrib = np.where(opt_mask & (x > xhi), -pd, contrib)
    return contrib


def grant_toward_error(e0, req_dir, pc, pd, mode, pkt, pkt_len, contrib):
    """Grant the FIFO prefix of requests while each grant shrinks |e|.

    Charge requests are considered first, then discharge; each scan
    stops at the first request whose grant would not reduce the error.
    Mutates mode/pkt/contrib; returns (n_grant_c, n_grant_d).
    """
    n_grant_c = 0
    n_grant_d = 0
    cand_c = np.flatnonzero(req_dir == 1)
    acc = 0.0
    if cand_c.size:
        rates = pc[cand_c]
        csum = np.cumsum(rates)
        acc_before = np.concatenate((np.zeros(1), csum[:-1]))
        ok = rates < 2.0 * (e0 - acc_before)
        k = int(np.argmin(ok)) if not ok.all() else cand_c.size
        if k:
            grant = cand_c[:k]
            mode[grant] = 1
            pkt[grant] = pkt_len
            contrib[grant] = pc[grant]
            acc = float(csum[k - 1])
            n_grant_c = k
    e1 = e0 - acc
    cand_d = np.flatnonzero(req_dir == 2)
    if cand_d.size:
        rates = pd[cand_d]
        csum = np.cumsum(rates)
        acc_before = np.concatenate((np.zeros(1), csum[:-1]))
        ok = rates < -2.0 * (e1 + acc_before)
        k = int(np.argmin(ok)) if not ok.all() else cand_d.size
        if k:
            grant = cand_d[:k]
            mode[grant] = 2
            pkt[grant] = pkt_len
            contrib[grant] = -pd[grant]
            n_grant_d = k
    return n_grant_c, n_grant_d


def grant_fractions(req_dir, u2, beta_c, beta_d, pc, pd, mode, pkt, pkt_len,
                    contrib):
    """Grant each request independently with a fixed acceptance fraction."""
    g_c = (req_dir == 1) & (u2 < beta_c)
    g_d = (req_dir == 2) & (u2 < beta_d)
    mode[g_c] = 1
    mode[g_d] = 2
    pkt[g_c | g_d] = pkt_len
    contrib[g_c] = pc[g_c]
    contrib[g_d] = -pd[g_d]
    return int(np.count_nonzero(g_c)), int(np.count_nonzero(g_d))


def step_and_optout(kind, x, mode, pkt, chg_xps, dis_xps, xlo, xhi,
                    loss, invtank, amb, inlet, draw_lps_t, dt):
    """Advance physics one step, expire packets, apply opt-out rules.

    Packets run out after their fixed length; any device found outside
    its dead-band enters opt-out and drives back toward the band at its
    physical rate (a heater above band simply coasts), returning to
    standby once inside.
    """
    is_ess = kind == KIND_ESS
    d = draw_lps_t
    charging = mode == 1
    discharging = mode == 2
    opt_now = mode == 3
    opt_chg = opt_now & (x < xlo)
    opt_dis = opt_now & (x > xhi)
    xn = np.where(charging | opt_chg, x + chg_xps * dt, x)
    xn = np.where(discharging | opt_dis, x - dis_xps * dt, xn)
    xn_ess = np.minimum(1.0, np.maximum(0.0, xn))
    heating = charging | opt_chg
    dxdt = -loss * (x - amb) - d * invtank * (x - inlet)
    dxdt = np.where(heating, dxdt + chg_xps, dxdt)
    xn_ewh = x + dt * dxdt
    xn = np.where(is_ess, xn_ess, xn_ewh)
    x[:] = xn
    active = charging | discharging
    pkt[active] = pkt[active] - dt
    expired = active & (pkt <= 1e-9)
    pkt[expired] = 0.0
    mode[expired] = 0
    inside = (xn >= xlo) & (xn <= xhi)
    mode[opt_now & inside] = 0
    enter = ~opt_now & ~inside
    mode[enter] = 3
    pkt[enter] = 0.0


def _pem_numpy(kind, pc, pd, chg_xps, dis_xps, xlo, xhi, kc, kd,
               loss, invtank, amb, inlet,
               x, mode, pkt,
               ref_kw, draw_lps, dt, pkt_len, mttr, seed, step0,
               track, beta_c, beta_d):
    n = x.shape[0]
    n_steps = ref_kw.shape[0]
    p_dem = np.zeros(n_steps)
    mode_counts = np.zeros((n_steps, 4), dtype=np.int64)
    pem_counts = np.zeros((n_steps, 4), dtype=np.int64)
    ones = np.ones(n)
    devices = np.arange(n, dtype=np.uint64)
    seed_i = int(seed)
    step0_i = int(step0)
    for t in range(n_steps):
        base = (step0_i + t) * DRAWS_PER_STEP
        req_dir = poll_requests(x, mode, xlo, xhi, kc, kd, pd, mttr, dt,
                                seed_i, devices, base)
        contrib = power_contributions(x, mode, pc, pd, xlo, xhi)
        p_before = float(np.dot(contrib, ones))
        e0 = ref_kw[t] - p_before
        if track == 1:
            n_grant_c, n_grant_d = grant_toward_error(
                e0, req_dir, pc, pd, mode, pkt, pkt_len, contrib)
        else:
            u2 = uniform_array(seed_i, devices, base + 2)
            n_grant_c, n_grant_d = grant_fractions(
                req_dir, u2, beta_c, beta_d, pc, pd, mode, pkt, pkt_len, contrib)
        p_dem[t] = np.dot(contrib, ones)
        mode_counts[t, 0] = np.count_nonzero(mode == 1)
        mode_counts[t, 1] = np.count_nonzero(mode == 2)
        mode_counts[t, 2] = np.count_nonzero(mode == 0)
        mode_counts[t, 3] = np.count_nonzero(mode == 3)
        pem_counts[t, 0] = np.count_nonzero(req_dir == 1)
        pem_counts[t, 1] = np.count_nonzero(req_dir == 2)
        pem_counts[t, 2] = n_grant_c
        pem_counts[t, 3] = n_grant_d
        step_and_optout(kind, x, mode, pkt, chg_xps, dis_xps, xlo, xhi,
                        loss, invtank, amb, inlet, draw_lps[t], dt)
    return p_dem, mode_counts, pem_counts


# ---------------------------------------------------------------------------
# Centralized-control backend implementations.
# ---------------------------------------------------------------------------

def _cc_loop_impl(kind, pc, pd, chg_xps, dis_xps, xlo, xhi,
                  safe_lo, safe_hi, loss, invtank, amb, inlet,
                  x, mode, ref_kw, draw_lps, dt):
    n = x.shape[0]
    n_steps = ref_kw.shape[0]
    p_dem = np.zeros(n_steps)
    mode_counts = np.zeros((n_steps, 4), dtype=np.int64)
    contrib = np.zeros(n)
    ones = np.ones(n)
    for t in range(n_steps):
        for i in range(n):
            if mode[i] == 1 and x[i] >= safe_hi[i]:
                mode[i] = 0
            elif mode[i] == 2 and x[i] <= safe_lo[i]:
                mode[i] = 0
        for i in range(n):
            m = mode[i]
            if m == 1:
                contrib[i] = pc[i]
            elif m == 2:
                contrib[i] = -pd[i]
            else:
                contrib[i] = 0.0
        p_now = np.dot(contrib, ones)
        e0 = ref_kw[t] - p_now
        if e0 > 0.0:
            order = np.argsort(x, kind="mergesort")
            acc = 0.0
            for oi in range(n):
                i = order[oi]
                if mode[i] == 0 and x[i] < safe_hi[i]:
                    r = pc[i]
                    if r < 2.0 * (e0 - acc):
                        acc = acc + r
                        mode[i] = 1
                        contrib[i] = pc[i]
                    else:
                        break
            e1 = e0 - acc
            acc2 = 0.0
            for oi in range(n):
                i = order[oi]
                if mode[i] == 2:
                    r = pd[i]
                    if r < 2.0 * (e1 - acc2):
                        acc2 = acc2 + r
                        mode[i] = 0
                        contrib[i] = 0.0
                    else:
                        break
        elif e0 < 0.0:
            order = np.argsort(-x, kind="mergesort")
            acc = 0.0
            for oi in range(n):
                i = order[oi]
                if mode[i] == 0 and pd[i] > 0.0 and x[i] > safe_lo[i]:
                    r = pd[i]
                    if r < -2.0 * (e0 + acc):
                        acc = acc + r
                        mode[i] = 2
                        contrib[i] = -pd[i]
                    else:
                        break
            e1 = e0 + acc
            acc2 = 0.0
            for oi in range(n):
                i = order[oi]
                if mode[i] == 1:
                    r = pc[i]
                    if r < -2.0 * (e1 + acc2):
                        acc2 = acc2 + r
                        mode[i] = 0
                        contrib[i] = 0.0
                    else:
                        break
        p_dem[t] = np.dot(contrib, ones)
        n_sb = 0
        n_chg = 0
        n_dis = 0
        for i in range(n):
            m = mode[i]
            if m == 0:
                n_sb += 1
            elif m == 1:
                n_chg += 1
            else:
                n_dis += 1
        mode_counts[t, 0] = n_chg
        mode_counts[t, 1] = n_dis
        mode_counts[t, 2] = n_sb
        d = draw_lps[t]
        for i in range(n):
            m = mode[i]
            xi = x[i]
            if kind[i] == 0:
                if m == 1:
                    xn = xi + chg_xps[i] * dt
                elif m == 2:
                    xn = xi - dis_xps[i] * dt
                else:
                    xn = xi
                if xn > 1.0:
                    xn = 1.0
                if xn < 0.0:
                    xn = 0.0
            else:
                dxdt = -loss[i] * (xi - amb[i]) - d * invtank[i] * (xi - inlet[i])
                if m == 1:
                    dxdt = dxdt + chg_xps[i]
                xn = xi + dt * dxdt
            x[i] = xn
    return p_dem, mode_counts


def _cc_numpy(kind, pc, pd, chg_xps, dis_xps, xlo, xhi,
              safe_lo, safe_hi, loss, invtank, amb, inlet,
              x, mode, ref_kw, draw_lps, dt):
    n = x.shape[0]
    n_steps = ref_kw.shape[0]
    p_dem = np.zeros(n_steps)
    mode_counts = np.zeros((n_steps, 4), dtype=np.int64)
    ones = np.ones(n)
    is_ess = kind == KIND_ESS
    for t in range(n_steps):
        mode[(mode == 1) & (x >= safe_hi)] = 0
        mode[(mode == 2) & (x <= safe_lo)] = 0
        contrib = np.where(mode == 1, pc, 0.0) - np.where(mode == 2, pd, 0.0)
        p_now = float(np.dot(contrib, ones))
        e0 = ref_kw[t] - p_now
        if e0 > 0.0:
            order = np.argsort(x, kind="mergesort")
            elig = order[(mode[order] == 0) & (x[order] < safe_hi[order])]
            acc = _prefix_toggle(elig, pc, e0, 1, mode, contrib, sign=1.0)
            e1 = e0 - acc
            dis_on = order[mode[order] == 2]
            _prefix_toggle(dis_on, pd, e1, 0, mode, contrib, sign=1.0)
        elif e0 < 0.0:
            order = np.argsort(-x, kind="mergesort")
            elig = order[(mode[order] == 0) & (pd[order] > 0.0) & (x[order] > safe_lo[order])]
            acc = _prefix_toggle(elig, pd, e0, 2, mode, contrib, sign=-1.0)
            e1 = e0 + acc
            chg_on = order[mode[order] == 1]
            _prefix_toggle(chg_on, pc, e1, 0, mode, contrib, sign=-1.0)
        p_dem[t] = np.dot(contrib, ones)
        mode_counts[t, 0] = np.count_nonzero(mode == 1)
        mode_counts[t, 1] = np.count_nonzero(mode == 2)
        mode_counts[t, 2] = np.count_nonzero(mode == 0)
        d = draw_lps[t]
        xn = np.where(mode == 1, x + chg_xps * dt, x)
        xn = np.where(mode == 2, x - dis_xps * dt, xn)
        xn_ess = np.minimum(1.0, np.maximum(0.0, xn))
        dxdt = -loss * (x - amb) - d * invtank * (x - inlet)
        dxdt = np.where(mode == 1, dxdt + chg_xps, dxdt)
        xn_ewh = x + dt * dxdt
        x[:] = np.where(is_ess, xn_ess, xn_ewh)
    return p_dem, mode_counts


def _prefix_toggle(candidates, rates_all, e_start, new_mode, mode, contrib, sign):
    """Toggle a prefix of candidates while each toggle shrinks |error|.

    sign=+1 covers surplus error (each toggle removes its rate from e),
    sign=-1 covers deficit error (each toggle adds its rate). Returns
    the accumulated rate of the toggled prefix.
    """
    if candidates.size == 0:
        return 0.0
    rates = rates_all[candidates]
    csum = np.cumsum(rates)
    acc_before = np.concatenate((np.zeros(1), csum[:-1]))
    if sign > 0:
        ok = rates < 2.0 * (e_start - acc_before)
    else:
        ok = rates < -2.0 * (e_start + acc_before)
    k = int(np.argmin(ok)) if not ok.all() else candidates.size
    if k == 0:
        return 0.0
    sel = candidates[:k]
    mode[sel] = new_mode
    if new_mode == 1:
        contrib[sel] = rates_all[sel]
    elif new_mode == 2:
        contrib[sel] = -rates_all[sel]
    else:
        contrib[sel] = 0.0
    return float(csum[k - 1])


# ---------------------------------------------------------------------------
# Backend dispatch.
# ---------------------------------------------------------------------------

_numba_pem = None
_numba_cc = None


def _compile_numba():
    global _numba_pem, _numba_cc
    if _numba_pem is None:
        from numba import njit
        _numba_pem = njit(cache=True, nogil=True)(_pem_loop_impl)
        _numba_cc = njit(cache=True, nogil=True)(_cc_loop_impl)
    return _numba_pem, _numba_cc


def run_pem(packed: PackedFleet, ref_kw: np.ndarray, draw_lps: np.ndarray,
            dt_s: float, packet_len_s: float, mttr_s: float, seed: int,
            step0: int = 0, track: bool = True,
            beta_charge: float = 0.0, beta_discharge: float = 0.0,
            backend: str | None = None):
    """Run the packetized coordinator over ref_kw, mutating packed state.

    Returns (p_dem_kw[T], mode_counts[T,4], pem_counts[T,4]) where mode
    counts are ordered (charge, discharge, standby, optout) and pem
    counts (req_c, req_d, grant_c, grant_d).
    """
    args = (packed.kind, packed.p_charge, packed.p_discharge,
            packed.chg_x_per_s, packed.dis_x_per_s,
            packed.x_lo, packed.x_hi, packed.k_charge, packed.k_discharge,
            packed.loss_per_s, packed.inv_tank, packed.x_amb, packed.inlet_temp,
            packed.x, packed.mode, packed.packet_s,
            np.ascontiguousarray(ref_kw, dtype=np.float64),
            np.ascontiguousarray(draw_lps, dtype=np.float64),
            float(dt_s), float(packet_len_s), float(mttr_s),
            np.uint64(seed), np.uint64(step0),
            1 if track else 0, float(beta_charge), float(beta_discharge))
    be = _pick_backend(backend)
    if be == "numba":
        fn, _ = _compile_numba()
        return fn(*args)
    return _pem_numpy(*args)


def run_cc(packed: PackedFleet, ref_kw: np.ndarray, draw_lps: np.ndarray,
           dt_s: float, backend: str | None = None):
    """Run the centralized dispatcher; returns (p_dem_kw, mode_counts)."""
    args = (packed.kind, packed.p_charge, packed.p_discharge,
            packed.chg_x_per_s, packed.dis_x_per_s,
            packed.x_lo, packed.x_hi, packed.safe_lo, packed.safe_hi,
            packed.loss_per_s, packed.inv_tank, packed.x_amb, packed.inlet_temp,
            packed.x, packed.mode,
            np.ascontiguousarray(ref_kw, dtype=np.float64),
            np.ascontiguousarray(draw_lps, dtype=np.float64),
            float(dt_s))
    be = _pick_backend(backend)
    if be == "numba":
        _, fn = _compile_numba()
        return fn(*args)
    return _cc_numpy(*args)
