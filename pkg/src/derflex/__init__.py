"""derflex: demand-side fleet flexibility toolkit.

Quantifies how much grid-balancing power a fleet of small devices
(batteries, electric water heaters) can deliver per device, under
either centralized dispatch or packetized request/grant coordination,
scored against regulation-style reference signals.
"""
from __future__ import annotations

from .agc import (
    AgcStats,
    AgcTrace,
    ReferenceSignal,
    SelectedHour,
    hourly_stats,
    load_agc,
    make_reference,
    select_representative,
    synthesize_agc,
)
from .cc import CcCommand, cc_dispatch, simulate_cc
from .devices import (
    DeviceState,
    EssParams,
    EwhParams,
    Fleet,
    Mode,
    build_fleet,
    ess_step,
    ewh_step,
    load_draw_profile,
)
from .engine import PackedFleet, active_backend, pack_fleets
from .errors import (
    CapExceededError,
    ConfigError,
    DataError,
    DerflexError,
    InfeasibleError,
    MalformedSignalError,
    SelectionError,
    UndefinedPrecisionError,
    UnsupportedDirectionError,
)
from .pem import (
    PemParams,
    PemRequest,
    charge_request_rate,
    discharge_request_rate,
    pem_grant,
    pem_poll,
    pem_step_and_optout,
    request_probability,
    simulate_pem,
)
from .trace import FleetTrace, read_trace_csv

__version__ = "0.1.0"

__all__ = [
    "AgcStats",
    "AgcTrace",
    "CapExceededError",
    "CcCommand",
    "ConfigError",
    "DataError",
    "DerflexError",
    "DeviceState",
    "EssParams",
    "EwhParams",
    "Fleet",
    "FleetTrace",
    "InfeasibleError",
    "MalformedSignalError",
    "Mode",
    "PackedFleet",
    "PemParams",
    "PemRequest",
    "ReferenceSignal",
    "SelectedHour",
    "SelectionError",
    "UndefinedPrecisionError",
    "UnsupportedDirectionError",
    "active_backend",
    "build_fleet",
    "cc_dispatch",
    "charge_request_rate",
    "discharge_request_rate",
    "ess_step",
    "ewh_step",
    "hourly_stats",
    "load_agc",
    "load_draw_profile",
    "make_reference",
    "pack_fleets",
    "pem_grant",
    "pem_poll",
    "pem_step_and_optout",
    "read_trace_csv",
    "request_probability",
    "select_representative",
    "simulate_cc",
    "simulate_pem",
    "synthesize_agc",
    "__version__",
]
