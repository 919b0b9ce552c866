"""Population (state-bin Markov) model of a packetized battery fleet.

Fleet occupancy lives on four mode blocks (charge, discharge, standby,
opt-out), each split into n_b uniform energy bins over the dead-band.
One step applies, in device order: opt-out flush, request/grant flow,
physical drift with boundary overflow, and packet expiry. The map is
linear in the occupancy for fixed acceptance fractions, so a step is a
column-stochastic matrix, steady states are fixed points, and mean
behavior of large fleets can be studied without simulating devices.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .devices import EssParams
from .errors import ConfigError, InfeasibleError
from .pem import PemParams

MW_KW = 1000.0

_CHG, _DIS, _SB, _OPT = 0, 1, 2, 3


@dataclass(frozen=True)
class ControlFractions:
    """Acceptance fractions per direction, plus packet-expiry fractions."""

    beta_chg: float
    beta_dis: float
    beta_minus_chg: float
    beta_minus_dis: float

    def __post_init__(self):
        for name in ("beta_chg", "beta_dis", "beta_minus_chg", "beta_minus_dis"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class SocWeights:
    q_v: np.ndarray  # bin-center SoC, tiled over the four mode blocks


def build_bins(params: EssParams, n_b: int) -> tuple[np.ndarray, SocWeights]:
    """Uniform bin edges over the dead-band and tiled center weights."""
    if n_b < 2:
        raise ConfigError(f"need at least 2 bins, got {n_b}")
    edges = np.linspace(params.x_lo, params.x_hi, n_b + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return edges, SocWeights(q_v=np.tile(centers, 4))


class MacroModel:
    """Transition-matrix builder and solvers for one battery design.

    The step matrix is affine in the acceptance fractions,
    T(beta) = T0 + beta_chg * A + beta_dis * B, which makes dense
    grid sweeps over beta cheap.
    """

    def __init__(self, params: EssParams | None = None,
                 pem: PemParams | None = None,
                 n_b: int = 20, dt_s: float | None = None):
        if params is not None and not isinstance(params, EssParams):
            raise ConfigError("the population model covers battery fleets only")
        self.params = params or EssParams()
        self.pem = pem or PemParams()
        self.dt_s = float(dt_s) if dt_s is not None else self.pem.poll_dt_s
        self.n_b = int(n_b)
        p = self.params
        self.edges, self.weights = build_bins(p, self.n_b)
        self.centers = 0.5 * (self.edges[:-1] + self.edges[1:])
        self.bin_width = (p.x_hi - p.x_lo) / self.n_b
        chg_rate = p.eta_c * p.p_charge_kw / (p.e_cap_kwh * 3600.0)
        dis_rate = p.p_discharge_kw / (p.eta_d * p.e_cap_kwh * 3600.0)
        self.alpha_c = min(1.0, chg_rate * self.dt_s / self.bin_width)
        self.alpha_d = min(1.0, dis_rate * self.dt_s / self.bin_width)
        lo, hi, xset = p.x_lo, p.x_hi, p.x_set
        kc = (xset - lo) / (hi - xset)
        kd = (hi - xset) / (xset - lo)
        mu_c = (hi - self.centers) / (self.centers - lo) * kc / self.pem.mttr_s
        mu_d = (self.centers - lo) / (hi - self.centers) * kd / self.pem.mttr_s
        total = mu_c + mu_d
        p_any = 1.0 - np.exp(-total * self.dt_s)
        self.p_req_c = p_any * mu_c / total
        self.p_req_d = p_any * mu_d / total
        self._t0, self._ta, self._tb = self._affine_parts()
        self._grid_cache: dict = {}

    @property
    def dim(self) -> int:
        return 4 * self.n_b

    def default_control(self, beta_chg: float, beta_dis: float) -> ControlFractions:
        """Geometric packet expiry: mean dwell equals the packet length."""
        bm = min(1.0, self.dt_s / self.pem.packet_length_s)
        return ControlFractions(beta_chg, beta_dis, bm, bm)

    @staticmethod
    def _displacement_weights(alpha: float, p_expire: float) -> np.ndarray:
        """Distribution of whole-packet drift, in bins, at expiry.

        Dwell is geometric with per-step hazard p_expire, so mass
        leaving the active block has drifted alpha * dwell bins; with a
        uniform sub-bin starting position a real displacement d spreads
        over floor(d) and ceil(d). Tracking mass by its entry bin and
        applying the whole displacement at expiry avoids the spurious
        per-step diffusion of an upwind shift, which otherwise widens
        the standby distribution by more than the physical packet noise.
        """
        if p_expire >= 1.0:
            k_max = 1
        else:
            k_max = max(1, int(math.ceil(math.log(1e-18) / math.log(1.0 - p_expire))))
        j_max = int(math.floor(alpha * k_max)) + 2
        w = np.zeros(j_max + 1)
        surv = 1.0
        for k in range(1, k_max + 1):
            pk = surv * p_expire
            d = alpha * k
            j = int(math.floor(d))
            f = d - j
            w[min(j, j_max)] += pk * (1.0 - f)
            w[min(j + 1, j_max)] += pk * f
            surv *= 1.0 - p_expire
        w[0] += surv  # truncated tail, vanishing by construction
        return w / w.sum()

    def _base_matrices(self):
        """Column-stochastic factors: opt-out flush and expiry-return.

        Request flow depends on beta and is built in _affine_parts.
        """
        nb = self.n_b
        d = self.dim
        eye = np.eye(d)

        def blk(m, b):
            return m * nb + b

        # Opt-out flush: all opt mass returns to the nearest standby
        # edge bin (it re-entered the dead-band during the previous
        # step's restoring drive). Lower-half opt mass was charging
        # from below, upper-half was discharging from above.
        flush = eye.copy()
        for b in range(nb):
            src = blk(_OPT, b)
            flush[:, src] = 0.0
            dest = blk(_SB, 0) if self.centers[b] <= self.params.x_set else blk(_SB, nb - 1)
            flush[dest, src] = 1.0

        # Expiry with packet-resolved drift: active mass is keyed by
        # the bin it was granted in; the fraction expiring each step
        # returns to standby displaced by its whole-packet drift, and
        # displacement past the band edge lands in opt-out.
        def expiry(bm_c, bm_d):
            e = eye.copy()
            wc = self._displacement_weights(self.alpha_c, bm_c)
            wd = self._displacement_weights(self.alpha_d, bm_d)
            for b in range(nb):
                src = blk(_CHG, b)
                e[src, src] = 1.0 - bm_c
                for j, wj in enumerate(wc):
                    if wj == 0.0:
                        continue
                    dest = blk(_SB, b + j) if b + j < nb else blk(_OPT, nb - 1)
                    e[dest, src] += bm_c * wj
                src = blk(_DIS, b)
                e[src, src] = 1.0 - bm_d
                for j, wj in enumerate(wd):
                    if wj == 0.0:
                        continue
                    dest = blk(_SB, b - j) if b - j >= 0 else blk(_OPT, 0)
                    e[dest, src] += bm_d * wj
            return e

        return flush, expiry, eye

    def _affine_parts(self):
        """T(beta) = T0 + beta_chg * A + beta_dis * B for fixed expiry.

        Requests leave standby bin b with probability beta * p_req;
        everything else (flush, expiry-return) is beta-independent.
        """
        nb = self.n_b
        flush, expiry_f, eye = self._base_matrices()
        self._flush = flush
        self._expiry_f = expiry_f

        def requests(bc, bd):
            r = eye.copy()
            for b in range(nb):
                src = _SB * nb + b
                fc = bc * self.p_req_c[b]
                fd = bd * self.p_req_d[b]
                r[src, src] = 1.0 - fc - fd
                r[_CHG * nb + b, src] = fc
                r[_DIS * nb + b, src] = fd
            return r

        self._requests_f = requests
        bm = min(1.0, self.dt_s / self.pem.packet_length_s)
        e = expiry_f(bm, bm)
        t00 = e @ requests(0.0, 0.0) @ flush
        t10 = e @ requests(1.0, 0.0) @ flush
        t01 = e @ requests(0.0, 1.0) @ flush
        return t00, t10 - t00, t01 - t00

    def transition_matrix(self, ctrl: ControlFractions) -> np.ndarray:
        bm_default = min(1.0, self.dt_s / self.pem.packet_length_s)
        if (ctrl.beta_minus_chg == bm_default
                and ctrl.beta_minus_dis == bm_default):
            return self._t0 + ctrl.beta_chg * self._ta + ctrl.beta_dis * self._tb
        nb = self.n_b
        eye = np.eye(self.dim)
        r = eye.copy()
        for b in range(nb):
            src = _SB * nb + b
            fc = ctrl.beta_chg * self.p_req_c[b]
            fd = ctrl.beta_dis * self.p_req_d[b]
            r[src, src] = 1.0 - fc - fd
            r[_CHG * nb + b, src] = fc
            r[_DIS * nb + b, src] = fd
        e = self._expiry_f(ctrl.beta_minus_chg, ctrl.beta_minus_dis)
        return e @ r @ self._flush

    def uniform_state(self) -> np.ndarray:
        return np.full(self.dim, 1.0 / self.dim)

    def standby_uniform_state(self) -> np.ndarray:
        q = np.zeros(self.dim)
        q[_SB * self.n_b:(_SB + 1) * self.n_b] = 1.0 / self.n_b
        return q

    def check_state(self, q: np.ndarray) -> None:
        q = np.asarray(q)
        if q.shape != (self.dim,):
            raise ConfigError(f"state must have shape ({self.dim},), got {q.shape}")
        if (q < -1e-10).any():
            raise ConfigError("state has negative occupancy")
        if abs(float(q.sum()) - 1.0) > 1e-9:
            raise ConfigError(f"state mass {float(q.sum())} is not 1")

    def macro_step(self, q: np.ndarray, ctrl: ControlFractions) -> np.ndarray:
        """One population step; renormalizes only float-level drift."""
        self.check_state(q)
        out = self.transition_matrix(ctrl) @ np.asarray(q, dtype=np.float64)
        out = np.maximum(out, 0.0)
        return out / out.sum()

    def aggregate_power_kw(self, q: np.ndarray, fleet_size: float = 1.0) -> float:
        """h(q): signed kW, counting opt-out mass at its physical power."""
        nb = self.n_b
        p = self.params
        chg = float(np.sum(q[_CHG * nb:(_CHG + 1) * nb]))
        dis = float(np.sum(q[_DIS * nb:(_DIS + 1) * nb]))
        opt = q[_OPT * nb:(_OPT + 1) * nb]
        low = self.centers <= p.x_set
        opt_c = float(np.sum(opt[low]))
        opt_d = float(np.sum(opt[~low]))
        per_device = (p.p_charge_kw * (chg + opt_c)
                      - p.p_discharge_kw * (dis + opt_d))
        return fleet_size * per_device

    def steady_state(self, ctrl: ControlFractions, tol: float = 1e-10,
                     max_iter: int = 200000) -> np.ndarray:
        """Fixed point q* = T q* with a residual certificate.

        A direct linear solve replaces most of the fixed-point
        iteration; if the solve is degenerate (for instance beta = 0
        makes standby absorbing and the fixed point non-unique) the
        method falls back to iterating from the uniform state, which
        also defines which fixed point is reported in degenerate cases.
        """
        t = self.transition_matrix(ctrl)
        q = self._solve_linear(t)
        if q is not None and self._residual(t, q) < tol:
            return q
        q = self.uniform_state()
        # squaring accelerates mixing: T^(2^j) q0
        tk = t.copy()
        for _ in range(60):
            q_new = tk @ q
            q_new = np.maximum(q_new, 0.0)
            q_new /= q_new.sum()
            if self._residual(t, q_new) < tol:
                return q_new
            tk = tk @ tk
            q = q_new
        for it in range(max_iter):
            q_new = t @ q
            q_new = np.maximum(q_new, 0.0)
            q_new /= q_new.sum()
            if float(np.max(np.abs(q_new - q))) < tol:
                q = q_new
                break
            q = q_new
        else:
            eig = np.sort(np.abs(np.linalg.eigvals(t)))[::-1]
            raise InfeasibleError(
                f"no fixed point within {max_iter} iterations; "
                f"leading eigenvalue magnitudes {eig[:3]}")
        return q

    @staticmethod
    def _residual(t: np.ndarray, q: np.ndarray) -> float:
        return float(np.max(np.abs(t @ q - q)))

    def _solve_linear(self, t: np.ndarray) -> np.ndarray | None:
        a = t - np.eye(self.dim)
        a[-1, :] = 1.0
        rhs = np.zeros(self.dim)
        rhs[-1] = 1.0
        try:
            q = np.linalg.solve(a, rhs)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(q)) or (q < -1e-9).any():
            return None
        q = np.maximum(q, 0.0)
        s = q.sum()
        if s <= 0.0:
            return None
        return q / s

    def mean_soc(self, q: np.ndarray) -> float:
        return float(np.dot(q, self.weights.q_v))

    # ------------------------------------------------------------------
    # Nominal-power optimization over the acceptance fractions.
    # ------------------------------------------------------------------

    def _grid(self, grid_n: int, ctrl_of) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        key = (grid_n, ctrl_of(0.0, 0.0).beta_minus_chg, ctrl_of(0.0, 0.0).beta_minus_dis)
        hit = self._grid_cache.get(key)
        if hit is not None:
            return hit
        betas = np.linspace(0.0, 1.0, grid_n)
        h = np.empty((grid_n, grid_n))
        soc = np.empty((grid_n, grid_n))
        for i, bc in enumerate(betas):
            for j, bd in enumerate(betas):
                q = self.steady_state(ctrl_of(bc, bd))
                h[i, j] = self.aggregate_power_kw(q)
                soc[i, j] = self.mean_soc(q)
        self._grid_cache[key] = (betas, h, soc)
        return betas, h, soc

    def solve_nominal(self, *, match_power_kw: float | None = None,
                      min_soc: float | None = None,
                      grid_n: int = 101,
                      refine_iters: int = 30,
                      beta_minus: tuple[float, float] | None = None,
                      ) -> tuple[tuple[float, float], float]:
        """Pick acceptance fractions by dense grid search plus refinement.

        Without match_power_kw the objective is the steady power h(q*)
        itself (the fleet's nominal floor); with it, the squared miss
        (h(q*) - match_power_kw)^2. Feasibility requires the steady
        mean SoC to reach min_soc (the device set point by default).
        Returns ((beta_chg, beta_dis), h_at_optimum).
        """
        p = self.params
        soc_floor = p.x_set if min_soc is None else float(min_soc)

        if beta_minus is None:
            ctrl_of = self.default_control
        else:
            bmc, bmd = beta_minus

            def ctrl_of(bc, bd):
                return ControlFractions(bc, bd, bmc, bmd)

        def objective(h):
            if match_power_kw is None:
                return h
            return (h - match_power_kw) ** 2

        betas, h, soc = self._grid(grid_n, ctrl_of)
        feasible = soc >= soc_floor - 1e-12
        if not feasible.any():
            raise InfeasibleError(
                f"no acceptance fractions reach mean SoC {soc_floor}; "
                f"maximum attained is {float(soc.max()):.6f}")
        obj = np.where(feasible, objective(h), np.inf)
        flat = int(np.argmin(obj))
        i0, j0 = divmod(flat, grid_n)
        best = (float(betas[i0]), float(betas[j0]))
        step = betas[1] - betas[0] if grid_n > 1 else 1.0

        def eval_point(bc, bd):
            q = self.steady_state(ctrl_of(bc, bd))
            hh = self.aggregate_power_kw(q)
            if self.mean_soc(q) < soc_floor - 1e-12:
                return math.inf, hh
            return objective(hh), hh

        best_obj, best_h = eval_point(*best)

        # one golden-section pass per axis around the grid optimum
        gr = (math.sqrt(5.0) - 1.0) / 2.0
        for axis in (0, 1):
            lo = max(0.0, best[axis] - step)
            hi = min(1.0, best[axis] + step)
            a, b = lo, hi
            c = b - gr * (b - a)
            d = a + gr * (b - a)

            def at(v):
                pt = (v, best[1]) if axis == 0 else (best[0], v)
                return eval_point(*pt), pt

            (fc, hc), pc_ = at(c)
            (fd, hd), pd_ = at(d)
            for _ in range(refine_iters):
                if fc <= fd:
                    b, d, (fd, hd), pd_ = d, c, (fc, hc), pc_
                    c = b - gr * (b - a)
                    (fc, hc), pc_ = at(c)
                else:
                    a, c, (fc, hc), pc_ = c, d, (fd, hd), pd_
                    d = a + gr * (b - a)
                    (fd, hd), pd_ = at(d)
            for f, hh, pt in ((fc, hc, pc_), (fd, hd, pd_)):
                if f < best_obj:
                    best_obj, best_h, best = f, hh, pt
        if math.isinf(best_obj):
            raise InfeasibleError("refinement left the feasible region; widen the grid")
        return best, best_h

    def steady_state_flexibility(self, signals, eps_des_kw: float = 5.0,
                                 n_start: int = 100, delta_n: int = 100,
                                 n_max: int | None = None,
                                 grid_n: int = 101) -> tuple[float, int]:
        """Smallest fleet whose steady power can sit at every signal's RMS.

        For each signal the target is sqrt(mean power) scaled to kW; a
        fleet size passes when optimized acceptance fractions bring the
        per-device steady power within eps_des of target / N for every
        signal. Returns (kW-per-device, n_min).
        """
        from .flexibility import average_power

        targets_kw = [math.sqrt(average_power(s)) * MW_KW for s in signals]
        cap = n_max if n_max is not None else int(100 * math.ceil(MW_KW / self.params.p_charge_kw))
        n = n_start
        while True:
            if n > cap:
                raise InfeasibleError(
                    f"steady-state search exceeded cap {cap} without matching "
                    f"targets within {eps_des_kw} kW")
            ok = True
            for tgt in targets_kw:
                _, h = self.solve_nominal(match_power_kw=tgt / n, grid_n=grid_n)
                if abs(h * n - tgt) > eps_des_kw:
                    ok = False
                    break
            if ok:
                return MW_KW / n, n
            n += delta_n


def sample_micro_init(model: MacroModel, q: np.ndarray, n: int,
                      seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw device states (x, mode, packet_s) from an occupancy vector.

    Positions are uniform within each bin; active devices get a uniform
    residual packet timer, the stationary residual for fixed-length
    packets. Opt-out occupancy (vanishing at steady state) maps to
    standby at the band edge.
    """
    model.check_state(q)
    rng = np.random.default_rng(seed)
    nb = model.n_b
    states = rng.choice(model.dim, size=n, p=np.asarray(q) / float(np.sum(q)))
    blk = states // nb
    b = states % nb
    x = model.centers[b] + (rng.random(n) - 0.5) * model.bin_width
    mode = np.zeros(n, dtype=np.int8)
    mode[blk == _CHG] = 1
    mode[blk == _DIS] = 2
    pkt = np.where(mode > 0, rng.random(n) * model.pem.packet_length_s, 0.0)
    return x, mode, pkt


def monte_carlo_power(model: MacroModel, beta_chg: float, beta_dis: float,
                      n: int = 10_000, seed: int = 0, hours: float = 4.0,
                      settle_hours: float = 2.0,
                      backend: str | None = None) -> tuple[float, float]:
    """Simulated vs predicted steady aggregate power, in kW.

    Runs the device simulation under constant acceptance fractions,
    initialized from the model's steady state, and time-averages the
    aggregate power once the settling span has passed. Returns
    (micro_kw, macro_kw). Hourly averages of the aggregate wander by
    several percent at n = 10^4 (grants stay correlated over a packet
    length), so the default averaging window spans several hours.
    """
    from .devices import build_fleet
    from .engine import pack_fleets, run_pem

    ctrl = model.default_control(beta_chg, beta_dis)
    q_star = model.steady_state(ctrl)
    macro_kw = model.aggregate_power_kw(q_star, fleet_size=n)
    fleet = build_fleet("ess", n, nominal=model.params, seed=seed)
    packed = pack_fleets(fleet)
    x, mode, pkt = sample_micro_init(model, q_star, n, seed=seed + 1)
    packed.x[:] = x
    packed.mode[:] = mode
    packed.packet_s[:] = pkt
    dt = model.pem.poll_dt_s
    steps = int(round((settle_hours + hours) * 3600.0 / dt))
    avg_steps = int(round(hours * 3600.0 / dt))
    p_dem, _, _ = run_pem(packed, np.zeros(steps), np.zeros(steps), dt,
                          model.pem.packet_length_s, model.pem.mttr_s,
                          seed, step0=0, track=False,
                          beta_charge=beta_chg, beta_discharge=beta_dis,
                          backend=backend)
    micro_kw = float(np.mean(p_dem[-avg_steps:]))
    return micro_kw, macro_kw


def write_macro_grid_csv(model: MacroModel, path: str, grid_n: int = 101,
                         min_soc: float | None = None) -> None:
    """Dump the beta grid: feasibility, steady power, SoC slack."""
    soc_floor = model.params.x_set if min_soc is None else float(min_soc)
    betas, h, soc = model._grid(grid_n, model.default_control)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["beta_chg", "beta_dis", "feasible", "h_kw_per_device", "soc_slack"])
        for i, bc in enumerate(betas):
            for j, bd in enumerate(betas):
                wr.writerow([f"{bc:.10g}", f"{bd:.10g}",
                             int(soc[i, j] >= soc_floor - 1e-12),
                             f"{h[i, j]:.10g}", f"{soc[i, j] - soc_floor:.10g}"])


def write_state_csv(model: MacroModel, q: np.ndarray, path: str) -> None:
    names = ["charge", "discharge", "standby", "optout"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["mode", "bin", "x_center", "occupancy"])
        for m, name in enumerate(names):
            for b in range(model.n_b):
                wr.writerow([name, b, f"{model.centers[b]:.10g}",
                             f"{q[m * model.n_b + b]:.10g}"])
