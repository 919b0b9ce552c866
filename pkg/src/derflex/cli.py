"""Command-line experiment runner: config file in, CSVs plus manifest out.

Each subcommand reads a YAML config, applies flag overrides (flags
win), runs the experiment, and writes CSV outputs with a manifest
recording the effective config, seed, and library versions. Outputs
depend only on config and seed, never on thread count or wall clock,
so a rerun reproduces them byte for byte.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import sys

import numpy as np
import yaml

from . import __version__
from .agc import (
    ReferenceSignal,
    hourly_stats,
    load_agc,
    make_reference,
    select_representative,
    synthesize_agc,
)
from .cc import simulate_cc
from .devices import (
    DEFAULT_DRAW_PROFILE,
    EssParams,
    EwhParams,
    build_fleet,
    load_draw_profile,
    water_draw,
)
from .engine import active_backend
from .errors import ConfigError, DataError, DerflexError, InfeasibleError
from .flexibility import (
    FlexQuery,
    find_n_min,
    fleet_baseload_kw,
    hourly_ewh_flexibility,
    mixture_fleet,
    mixture_precision,
    multi_hour_flexibility,
    sweep_heterogeneity,
    sweep_packet_mttr,
    write_flex_csv,
    write_zeta_summary_csv,
)
from .macromodel import MacroModel, monte_carlo_power, write_macro_grid_csv
from .pem import PemParams, simulate_pem
from .scoring import score_series
from .trace import read_trace_csv

_SIGMA_DEFAULT = 0.272


def _check_keys(mapping: dict, allowed, where: str) -> None:
    for key in mapping:
        if key not in allowed:
            prefix = where + "." if where else ""
            raise ConfigError(f"unknown config key {prefix}{key}")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path!r} is not valid YAML: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    return doc


def _device_params(kind: str, overrides: dict | None):
    nominal = EssParams() if kind == "ess" else EwhParams()
    if not overrides:
        return nominal
    names = {f.name for f in dataclasses.fields(nominal)}
    _check_keys(overrides, names, "device_params")
    return dataclasses.replace(nominal, **overrides)


def _pem_params(cfg: dict | None) -> PemParams:
    if not cfg:
        return PemParams()
    _check_keys(cfg, {"packet_length_s", "mttr_s", "poll_dt_s"}, "pem")
    return PemParams(**{k: float(v) for k, v in cfg.items()})


def _draw_profile(cfg: dict):
    path = cfg.get("draw_profile")
    return None if path is None else load_draw_profile(path)


_SIGNAL_KEYS = {"source", "path", "dt_s", "seed", "targets", "sigma",
                "hours", "scale_mw", "k_hours", "representative"}


def _build_signals(cfg: dict | None, seed: int) -> list[ReferenceSignal]:
    """Reference signals from a `signals` config block.

    Synthetic source: one hour per target mean (explicit `targets`, or
    the six standard multiples of `sigma`). File source: whole hours of
    a normalized trace, optionally reduced to representative hours.
    """
    cfg = dict(cfg or {})
    _check_keys(cfg, _SIGNAL_KEYS, "signals")
    source = cfg.get("source", "synth")
    dt_s = float(cfg.get("dt_s", 2.0))
    scale_mw = float(cfg.get("scale_mw", 1.0))
    k_hours = int(cfg.get("k_hours", 1))
    if source == "synth":
        targets = cfg.get("targets")
        if targets is None:
            s = float(cfg.get("sigma", _SIGMA_DEFAULT))
            targets = [2 * s, 2 * s, -2 * s, -2 * s, 3 * s, -3 * s]
        trace = synthesize_agc(int(cfg.get("seed", seed)),
                               [float(t) for t in targets], dt_s=dt_s)
        hours = cfg.get("hours", list(range(trace.n_hours)))
    elif source == "csv":
        if "path" not in cfg:
            raise ConfigError("signals.source csv requires signals.path")
        trace = load_agc(cfg["path"], dt_s=dt_s)
        if cfg.get("representative"):
            targets = cfg.get("targets")
            picks = select_representative(trace, int(cfg.get("seed", seed)),
                                          targets=targets)
            hours = [p.hour_index for p in picks]
        else:
            hours = cfg.get("hours", list(range(trace.n_hours)))
    else:
        raise ConfigError(f"signals.source must be 'synth' or 'csv', got {source!r}")
    return [make_reference(trace.hour(int(h)), scale_mw, k_hours=k_hours)
            for h in hours]


def _write_manifest(out_dir: str, subcommand: str, cfg: dict, seed: int) -> None:
    canonical = json.dumps({"subcommand": subcommand, "seed": seed, "config": cfg},
                           sort_keys=True, default=str)
    versions = {
        "derflex": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "backend": active_backend(),
    }
    try:
        import numba
        versions["numba"] = numba.__version__
    except ImportError:
        pass
    doc = {
        "subcommand": subcommand,
        "seed": seed,
        "config": cfg,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "versions": versions,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _write_scores_csv(path: str, rows: list[dict]) -> None:
    write_zeta_summary_csv(rows, path)


def _score_row(report, **labels) -> dict:
    row = dict(labels)
    row.update(accuracy=f"{report.accuracy:.10g}", delay=f"{report.delay:.10g}",
               precision=f"{report.precision:.10g}",
               composite=f"{report.composite:.10g}",
               best_lag_s=f"{report.best_lag_s:.10g}")
    return row


_SIM_KEYS = {"der", "n", "coordinator", "pem", "device_params", "heterogeneity",
             "start_hour", "burn_in_s", "draw_profile", "signals", "seed", "out"}


def run_simulate(cfg: dict, out_dir: str, seed: int, threads: int) -> None:
    """Closed-loop fleet runs: one trace CSV per (fleet size, signal)."""
    _check_keys(cfg, _SIM_KEYS, "")
    kind = cfg.get("der", "ess")
    if kind not in ("ess", "ewh"):
        raise ConfigError(f"der must be 'ess' or 'ewh', got {kind!r}")
    coordinator = cfg.get("coordinator", "pem")
    if coordinator not in ("cc", "pem"):
        raise ConfigError(f"coordinator must be 'cc' or 'pem', got {coordinator!r}")
    sizes = cfg.get("n", 1000)
    if isinstance(sizes, int):
        sizes = [sizes]
    params = _device_params(kind, cfg.get("device_params"))
    pem = _pem_params(cfg.get("pem"))
    profile = _draw_profile(cfg)
    if profile is None and kind == "ewh":
        profile = DEFAULT_DRAW_PROFILE
    start_hour = int(cfg.get("start_hour", 0))
    burn_in_s = float(cfg.get("burn_in_s", 900.0))
    heterogeneity = float(cfg.get("heterogeneity", 0.0))
    signals = _build_signals(cfg.get("signals"), seed)
    score_rows = []
    for n in sizes:
        n = int(n)
        fleet = build_fleet(kind, n, nominal=params, seed=seed,
                            heterogeneity=heterogeneity,
                            water_draw_profile=profile)
        for i, signal in enumerate(signals):
            ref = signal
            if kind == "ewh":
                base = fleet_baseload_kw(fleet, water_draw(profile, start_hour))
                ref = ReferenceSignal.from_kw(signal.samples_kw + base, signal.dt_s)
            if coordinator == "cc":
                trace = simulate_cc(fleet, ref, seed=seed, start_hour=start_hour)
            else:
                trace = simulate_pem(fleet, ref, pem, seed=seed,
                                     burn_in_s=burn_in_s, start_hour=start_hour)
            trace.write_csv(os.path.join(out_dir, f"trace_n{n}_sig{i}.csv"))
            report = score_series(trace.p_ref_kw, trace.p_dem_kw, trace.dt_s)
            score_rows.append(_score_row(report, n=n, signal_index=i))
    _write_scores_csv(os.path.join(out_dir, "scores.csv"), score_rows)


_SCORE_KEYS = {"trace", "k_hours", "seed", "out"}


def run_score(cfg: dict, out_dir: str, seed: int, threads: int) -> None:
    """Score an existing trace CSV against its embedded reference."""
    _check_keys(cfg, _SCORE_KEYS, "")
    if "trace" not in cfg:
        raise ConfigError("score requires config key 'trace' (path to a trace CSV)")
    trace = read_trace_csv(cfg["trace"])
    k_hours = cfg.get("k_hours")
    report = score_series(trace.p_ref_kw, trace.p_dem_kw, trace.dt_s,
                          k_hours=None if k_hours is None else int(k_hours))
    rows = [_score_row(report, window="overall", t_start_s=0)]
    for w in report.per_window:
        rows.append({"window": w.index, "t_start_s": f"{w.t_start_s:.10g}",
                     "accuracy": f"{w.x_a:.10g}", "delay": f"{w.x_d:.10g}",
                     "precision": f"{w.x_p:.10g}",
                     "composite": f"{(w.x_a + w.x_d + w.x_p) / 3.0:.10g}",
                     "best_lag_s": f"{w.t_k_s:.10g}"})
    _write_scores_csv(os.path.join(out_dir, "scores.csv"), rows)


_FLEX_KEYS = {"der", "coordinator", "pem", "device_params", "x_p_des", "n_start",
              "delta_n", "seeds", "heterogeneity", "start_hour", "burn_in_s",
              "n_max", "draw_profile", "signals", "seed", "out"}


def _flex_query(cfg: dict, seed: int) -> FlexQuery:
    kind = cfg.get("der", "ess")
    signals = _build_signals(cfg.get("signals"), seed)
    k_hours = int((cfg.get("signals") or {}).get("k_hours", 1))
    return FlexQuery(
        der_kind=kind,
        params=_device_params(kind, cfg.get("device_params")),
        coordinator=cfg.get("coordinator", "pem"),
        pem_params=_pem_params(cfg.get("pem")),
        k_hours=k_hours,
        signals=tuple(signals),
        x_p_des=float(cfg.get("x_p_des", 0.70)),
        n_start=int(cfg.get("n_start", 100)),
        delta_n=int(cfg.get("delta_n", 100)),
        seeds=int(cfg.get("seeds", 3)),
        heterogeneity=float(cfg.get("heterogeneity", 0.0)),
        start_hour=int(cfg.get("start_hour", 0)),
        burn_in_s=float(cfg.get("burn_in_s", 900.0)),
        n_max=None if cfg.get("n_max") is None else int(cfg["n_max"]),
        base_seed=seed,
        draw_profile=_draw_profile(cfg),
    )


def run_flex(cfg: dict, out_dir: str, seed: int, threads: int) -> None:
    """Minimum-fleet-size search; writes the trajectory and the answer."""
    _check_keys(cfg, _FLEX_KEYS, "")
    query = _flex_query(cfg, seed)
    result = find_n_min(query, threads=threads)
    write_flex_csv(result, os.path.join(out_dir, "flex_result.csv"))
    rows = [{"label": "fleet", "n_min": result.n_min,
             "zeta_kw": f"{result.kw_per_device:.10g}"}]
    for i, n in enumerate(result.per_signal_n_min):
        rows.append({"label": f"signal{i}", "n_min": n,
                     "zeta_kw": f"{1000.0 / n:.10g}"})
    write_zeta_summary_csv(rows, os.path.join(out_dir, "zeta_summary.csv"))


_SWEEP_KEYS = _FLEX_KEYS | {"kind", "packet_min", "mttr_min", "z_values",
                            "k_values", "hours", "n_start_peak",
                            "n_start_offpeak", "shares", "zeta_ess_kw",
                            "zeta_ewh_kw", "signal_index"}


def run_sweep(cfg: dict, out_dir: str, seed: int, threads: int) -> None:
    """Parameter sweeps: packet/MTTR grid, heterogeneity, horizons,
    water-heater hours, or device mixtures."""
    _check_keys(cfg, _SWEEP_KEYS, "")
    kind = cfg.get("kind")
    if kind == "packet_mttr":
        base = _flex_query(cfg, seed)
        rows = []
        table = sweep_packet_mttr(cfg.get("packet_min", [2, 5]),
                                  cfg.get("mttr_min", [2, 5]),
                                  base, check_diagonal=False, threads=threads)
        for p_min, m_min, res in table:
            rows.append({"packet_min": f"{p_min:.10g}", "mttr_min": f"{m_min:.10g}",
                         "n_min": res.n_min, "zeta_kw": f"{res.kw_per_device:.10g}"})
    elif kind == "heterogeneity":
        base = _flex_query(cfg, seed)
        rows = []
        for z, res in sweep_heterogeneity(cfg.get("z_values", [0.0, 0.2]), base,
                                          threads=threads):
            rows.append({"z": f"{z:.10g}", "n_min": res.n_min,
                         "zeta_kw": f"{res.kw_per_device:.10g}"})
    elif kind == "multi_hour":
        base = _flex_query(cfg, seed)
        rows = []
        for k, res in multi_hour_flexibility(cfg.get("k_values", range(1, 7)),
                                             base, threads=threads):
            rows.append({"k_hours": k, "n_min": res.n_min,
                         "zeta_kw": f"{res.kw_per_device:.10g}"})
    elif kind == "ewh_hours":
        signals = tuple(_build_signals(cfg.get("signals"), seed))
        profile = _draw_profile(cfg)
        results = hourly_ewh_flexibility(
            signals, cfg.get("hours", range(24)),
            params=_device_params("ewh", cfg.get("device_params")),
            pem_params=_pem_params(cfg.get("pem")),
            draw_profile=profile,
            n_start_peak=int(cfg.get("n_start_peak", 2500)),
            n_start_offpeak=int(cfg.get("n_start_offpeak", 5000)),
            delta_n=int(cfg.get("delta_n", 500)),
            seeds=int(cfg.get("seeds", 3)),
            x_p_des=float(cfg.get("x_p_des", 0.70)),
            base_seed=seed,
            threads=threads,
            n_max=None if cfg.get("n_max") is None else int(cfg["n_max"]))
        rows = [{"hour": h, "n_min": r.n_min,
                 "zeta_kw": f"{r.kw_per_device:.10g}"}
                for h, r in sorted(results.items())]
    elif kind == "mixture":
        if "zeta_ess_kw" not in cfg or "zeta_ewh_kw" not in cfg:
            raise ConfigError("mixture sweep requires zeta_ess_kw and zeta_ewh_kw")
        signals = _build_signals(cfg.get("signals"), seed)
        ix = int(cfg.get("signal_index", 0))
        if not 0 <= ix < len(signals):
            raise ConfigError(f"signal_index {ix} out of range ({len(signals)} signals)")
        z_ess = float(cfg["zeta_ess_kw"])
        z_ewh = float(cfg["zeta_ewh_kw"])
        rows = []
        for share in cfg.get("shares", [0.25, 0.50, 0.75]):
            share = float(share)
            n_ess, n_ewh = mixture_fleet(1.0 - share, share, z_ess, z_ewh)
            precision = mixture_precision(
                share, z_ess, z_ewh, signals[ix],
                pem_params=_pem_params(cfg.get("pem")),
                draw_profile=_draw_profile(cfg),
                start_hour=int(cfg.get("start_hour", 8)),
                seeds=int(cfg.get("seeds", 3)),
                base_seed=seed,
                burn_in_s=float(cfg.get("burn_in_s", 900.0)))
            rows.append({"z_ewh": f"{share:.10g}", "n_ess": n_ess, "n_ewh": n_ewh,
                         "precision": f"{precision:.10g}"})
    else:
        raise ConfigError(
            "sweep kind must be one of packet_mttr, heterogeneity, multi_hour, "
            f"ewh_hours, mixture; got {kind!r}")
    write_zeta_summary_csv(rows, os.path.join(out_dir, "sweep.csv"))


_MACRO_KEYS = {"device_params", "pem", "n_bins", "dt_s", "grid_n",
               "match_power_kw", "min_soc", "beta_minus", "signals",
               "eps_des_kw", "n_start", "delta_n", "n_max", "mc",
               "write_grid", "seed", "out"}


def run_macro(cfg: dict, out_dir: str, seed: int, threads: int) -> None:
    """Population-model solves: nominal control, steady power, fleet size."""
    _check_keys(cfg, _MACRO_KEYS, "")
    model = MacroModel(params=_device_params("ess", cfg.get("device_params")),
                       pem=_pem_params(cfg.get("pem")),
                       n_b=int(cfg.get("n_bins", 20)),
                       dt_s=cfg.get("dt_s"))
    grid_n = int(cfg.get("grid_n", 101))
    beta_minus = cfg.get("beta_minus")
    if beta_minus is not None:
        beta_minus = (float(beta_minus[0]), float(beta_minus[1]))
    match = cfg.get("match_power_kw")
    (bc, bd), h_opt = model.solve_nominal(
        match_power_kw=None if match is None else float(match),
        min_soc=None if cfg.get("min_soc") is None else float(cfg["min_soc"]),
        grid_n=grid_n, beta_minus=beta_minus)
    lines = [("beta_chg", f"{bc:.10g}"), ("beta_dis", f"{bd:.10g}"),
             ("h_kw_per_device", f"{h_opt:.10g}")]
    if cfg.get("signals") is not None:
        signals = _build_signals(cfg.get("signals"), seed)
        zeta_ss, n_ss = model.steady_state_flexibility(
            signals, eps_des_kw=float(cfg.get("eps_des_kw", 5.0)),
            n_start=int(cfg.get("n_start", 100)),
            delta_n=int(cfg.get("delta_n", 100)),
            n_max=None if cfg.get("n_max") is None else int(cfg["n_max"]),
            grid_n=grid_n)
        lines += [("zeta_ss_kw", f"{zeta_ss:.10g}"), ("n_ss", str(n_ss))]
    mc = cfg.get("mc")
    if mc is not None:
        _check_keys(mc, {"n", "seed", "hours", "settle_hours", "beta_chg",
                         "beta_dis"}, "mc")
        micro, macro = monte_carlo_power(
            model,
            float(mc.get("beta_chg", bc)), float(mc.get("beta_dis", bd)),
            n=int(mc.get("n", 10_000)), seed=int(mc.get("seed", seed)),
            hours=float(mc.get("hours", 4.0)),
            settle_hours=float(mc.get("settle_hours", 2.0)))
        rel = abs(micro - macro) / max(abs(macro), 1e-12)
        lines += [("mc_micro_kw", f"{micro:.10g}"), ("mc_macro_kw", f"{macro:.10g}"),
                  ("mc_rel_err", f"{rel:.10g}")]
    write_zeta_summary_csv([{"quantity": k, "value": v} for k, v in lines],
                           os.path.join(out_dir, "macro_summary.csv"))
    if cfg.get("write_grid"):
        write_macro_grid_csv(model, os.path.join(out_dir, "macro_grid.csv"),
                             grid_n=grid_n)


_AGC_KEYS = {"path", "dt_s", "synth", "representative", "targets", "seed", "out"}


def run_agc_stats(cfg: dict, out_dir: str, seed: int, threads: int) -> None:
    """Hourly statistics of a regulation signal, from file or synthesis."""
    _check_keys(cfg, _AGC_KEYS, "")
    dt_s = float(cfg.get("dt_s", 2.0))
    if "path" in cfg:
        trace = load_agc(cfg["path"], dt_s=dt_s)
    elif cfg.get("synth") is not None:
        synth = cfg["synth"]
        _check_keys(synth, {"seed", "targets", "sigma"}, "synth")
        targets = synth.get("targets")
        if targets is None:
            s = float(synth.get("sigma", _SIGMA_DEFAULT))
            targets = [2 * s, 2 * s, -2 * s, -2 * s, 3 * s, -3 * s]
        trace = synthesize_agc(int(synth.get("seed", seed)),
                               [float(t) for t in targets], dt_s=dt_s)
    else:
        raise ConfigError("agc-stats requires 'path' or a 'synth' block")
    stats = hourly_stats(trace)
    rows = [{"hour": i, "mean": f"{m:.10g}", "std": f"{sd:.10g}"}
            for i, (m, sd) in enumerate(zip(stats.hourly_means, stats.hourly_stds))]
    write_zeta_summary_csv(rows, os.path.join(out_dir, "hourly_stats.csv"))
    write_zeta_summary_csv(
        [{"mu": f"{stats.mu:.10g}", "sigma": f"{stats.sigma:.10g}",
          "n_hours": stats.n_hours}],
        os.path.join(out_dir, "stats_summary.csv"))
    if cfg.get("representative"):
        picks = select_representative(trace, seed, targets=cfg.get("targets"))
        write_zeta_summary_csv(
            [{"target": f"{p.target_mean:.10g}", "hour": p.hour_index,
              "mean": f"{p.realized_mean:.10g}"} for p in picks],
            os.path.join(out_dir, "representative_hours.csv"))
    print(f"mu={stats.mu:.6f} sigma={stats.sigma:.6f} hours={stats.n_hours}")


_RUNNERS = {
    "simulate": run_simulate,
    "score": run_score,
    "flex": run_flex,
    "sweep": run_sweep,
    "macro": run_macro,
    "agc-stats": run_agc_stats,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="derflex",
        description="Fleet-flexibility experiments: simulate, score, size, sweep.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, runner in _RUNNERS.items():
        p = sub.add_parser(name, help=runner.__doc__.splitlines()[0])
        p.add_argument("--config", metavar="PATH", help="YAML experiment config")
        p.add_argument("--seed", type=int, metavar="U64", help="master seed")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--threads", type=int, default=1, metavar="N",
                       help="worker threads (never affects results)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["out"] = args.out
        seed = int(cfg.get("seed", 0))
        if not 0 <= seed < 2 ** 64:
            raise ConfigError(f"seed must fit in an unsigned 64-bit int, got {seed}")
        if args.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {args.threads}")
        out_dir = cfg.get("out", ".")
        os.makedirs(out_dir, exist_ok=True)
        _RUNNERS[args.subcommand](cfg, out_dir, seed, args.threads)
        _write_manifest(out_dir, args.subcommand, cfg, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except DerflexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
