"""Aggregate simulation traces and their CSV form."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError

_BASE_COLS = ["t_s", "p_ref_kw", "p_dem_kw",
              "n_charge", "n_discharge", "n_standby", "n_optout"]
_PEM_COLS = ["n_req_c", "n_req_d", "n_grant_c", "n_grant_d"]


@dataclass
class FleetTrace:
    """Per-step fleet aggregates over a simulation window.

    Mode counts describe occupancy during each step; request/grant
    counts are present only for packetized runs.
    """

    t_s: np.ndarray
    p_ref_kw: np.ndarray
    p_dem_kw: np.ndarray
    mode_counts: np.ndarray           # [T, 4]: charge, discharge, standby, optout
    dt_s: float
    pem_counts: np.ndarray | None = None  # [T, 4]: req_c, req_d, grant_c, grant_d

    def __len__(self) -> int:
        return len(self.t_s)

    def write_csv(self, path: str) -> None:
        cols = list(_BASE_COLS)
        if self.pem_counts is not None:
            cols += _PEM_COLS
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for t in range(len(self)):
                row = [f"{self.t_s[t]:.10g}",
                       f"{self.p_ref_kw[t]:.10g}",
                       f"{self.p_dem_kw[t]:.10g}",
                       int(self.mode_counts[t, 0]), int(self.mode_counts[t, 1]),
                       int(self.mode_counts[t, 2]), int(self.mode_counts[t, 3])]
                if self.pem_counts is not None:
                    row += [int(self.pem_counts[t, j]) for j in range(4)]
                writer.writerow(row)


def read_trace_csv(path: str) -> FleetTrace:
    """Read a trace written by FleetTrace.write_csv."""
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot open trace {path!r}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        names = reader.fieldnames or []
        if [c for c in _BASE_COLS if c not in names]:
            raise DataError(f"{path}: missing trace columns, have {names}")
        has_pem = all(c in names for c in _PEM_COLS)
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: empty trace")
    try:
        t_s = np.array([float(r["t_s"]) for r in rows])
        dt = float(t_s[1] - t_s[0]) if len(t_s) > 1 else 1.0
        trace = FleetTrace(
            t_s=t_s,
            p_ref_kw=np.array([float(r["p_ref_kw"]) for r in rows]),
            p_dem_kw=np.array([float(r["p_dem_kw"]) for r in rows]),
            mode_counts=np.array([[int(r[c]) for c in _BASE_COLS[3:]] for r in rows],
                                 dtype=np.int64),
            dt_s=dt,
            pem_counts=(np.array([[int(r[c]) for c in _PEM_COLS] for r in rows],
                                 dtype=np.int64) if has_pem else None),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad trace cell: {exc}") from exc
    return trace
