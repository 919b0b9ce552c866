from __future__ import annotations

import numpy as np
import pytest

from derflex.agc import ReferenceSignal
from derflex.cc import CcCommand, apply_commands, cc_dispatch, simulate_cc
from derflex.devices import Mode, build_fleet
from derflex.engine import pack_fleets
from derflex.errors import ConfigError


def _packed(n, x=0.5, seed=0):
    packed = pack_fleets(build_fleet("ess", n, seed=seed))
    packed.x[:] = x
    packed.mode[:] = 0
    packed.packet_s[:] = 0.0
    return packed


def test_two_hundred_batteries_hold_one_megawatt():
    fleet = build_fleet("ess", 200, seed=1)
    ref = ReferenceSignal(samples_mw=np.ones(150), dt_s=2.0)
    trace = simulate_cc(fleet, ref, seed=1, x0=np.full(200, 0.5))
    assert np.all(trace.p_dem_kw == pytest.approx(1000.0, abs=1e-9))


def test_one_battery_short_leaves_five_kilowatts():
    fleet = build_fleet("ess", 199, seed=1)
    ref = ReferenceSignal(samples_mw=np.ones(150), dt_s=2.0)
    trace = simulate_cc(fleet, ref, seed=1, x0=np.full(199, 0.5))
    assert np.all(trace.p_dem_kw == pytest.approx(995.0, abs=1e-9))


def test_dispatch_flips_only_while_error_shrinks_positive():
    # e = +12 with 5 kW units: third flip would grow |e| (3 > 2), so 2 flips
    packed = _packed(10)
    cmds = cc_dispatch(packed, p_ref_kw=12.0, p_dem_kw=0.0)
    assert len(cmds) == 2
    assert all(c.target_mode == Mode.CHARGE for c in cmds)


def test_dispatch_flips_only_while_error_shrinks_negative():
    # e = -7: one discharge leaves |e| = 2, a second would give 3
    packed = _packed(10)
    cmds = cc_dispatch(packed, p_ref_kw=-7.0, p_dem_kw=0.0)
    assert len(cmds) == 1
    assert cmds[0].target_mode == Mode.DISCHARGE


def test_dispatch_zero_error_is_a_no_op():
    packed = _packed(10)
    assert cc_dispatch(packed, p_ref_kw=0.0, p_dem_kw=0.0) == []


def test_dispatch_recruits_lowest_soc_first_for_charge():
    packed = _packed(6)
    packed.x[:] = np.array([0.8, 0.3, 0.6, 0.2, 0.5, 0.7])
    cmds = cc_dispatch(packed, p_ref_kw=12.0, p_dem_kw=0.0)
    assert [c.device_index for c in cmds] == [3, 1]


def test_dispatch_recruits_highest_soc_first_for_discharge():
    packed = _packed(6)
    packed.x[:] = np.array([0.8, 0.3, 0.6, 0.2, 0.5, 0.7])
    cmds = cc_dispatch(packed, p_ref_kw=-12.0, p_dem_kw=0.0)
    assert [c.device_index for c in cmds] == [0, 5]


def test_dispatch_relieves_opposing_devices_after_recruiting():
    # all ten already discharging, surplus error must idle the low-x ones
    packed = _packed(10)
    packed.x[:] = np.linspace(0.2, 0.8, 10)
    packed.mode[:] = 2
    cmds = cc_dispatch(packed, p_ref_kw=12.0, p_dem_kw=-50.0)
    # e = +62: no standby units exist, so it stands discharge units down
    assert all(c.target_mode == Mode.STANDBY for c in cmds)
    assert len(cmds) == 10  # 50 kW of relief still leaves e = 12 > 5/2


def test_dispatch_never_commands_optout():
    with pytest.raises(ConfigError):
        CcCommand(device_index=0, target_mode=Mode.OPT_OUT)


def test_apply_commands_mutates_modes():
    packed = _packed(4)
    apply_commands(packed, [CcCommand(2, Mode.CHARGE), CcCommand(0, Mode.DISCHARGE)])
    assert packed.mode[2] == 1
    assert packed.mode[0] == 2
    assert packed.mode[1] == 0


def test_simulate_cc_is_seed_deterministic():
    # heterogeneous ratings, otherwise aggregate power only reflects dispatch
    # counts and every seed collapses to the same trace
    fleet = build_fleet("ess", 40, seed=6, heterogeneity=0.2)
    ref = ReferenceSignal(samples_mw=0.1 * np.sin(np.linspace(0, 6, 300)), dt_s=2.0)
    a = simulate_cc(fleet, ref, seed=5)
    b = simulate_cc(fleet, ref, seed=5)
    c = simulate_cc(fleet, ref, seed=6)
    assert np.array_equal(a.p_dem_kw, b.p_dem_kw)
    assert not np.array_equal(a.p_dem_kw, c.p_dem_kw)


def test_simulate_cc_tracks_within_one_device_rating():
    fleet = build_fleet("ess", 300, seed=2)
    ref = ReferenceSignal(samples_mw=0.5 * np.sin(np.linspace(0, 4 * np.pi, 900)),
                          dt_s=2.0)
    trace = simulate_cc(fleet, ref, seed=2)
    # greedy half-rate rule bounds the instantaneous error by max rating / 2
    err = np.abs(trace.p_ref_kw - trace.p_dem_kw)
    assert err.max() <= 2.51


def test_simulate_cc_validates_x0_shape():
    fleet = build_fleet("ess", 10, seed=0)
    ref = ReferenceSignal(samples_mw=np.zeros(10), dt_s=2.0)
    with pytest.raises(ConfigError):
        simulate_cc(fleet, ref, x0=np.zeros(9))


def test_mode_counts_partition_the_fleet():
    fleet = build_fleet("ess", 50, seed=3)
    ref = ReferenceSignal(samples_mw=0.2 * np.ones(200), dt_s=2.0)
    trace = simulate_cc(fleet, ref, seed=3)
    assert np.all(trace.mode_counts.sum(axis=1) == 50)
    assert trace.pem_counts is None
