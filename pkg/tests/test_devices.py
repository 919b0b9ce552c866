from __future__ import annotations

import math

import numpy as np
import pytest

from derflex.devices import (
    DEFAULT_DRAW_PROFILE,
    DeviceState,
    EssParams,
    EwhParams,
    Mode,
    build_fleet,
    ess_step,
    ewh_holding_power_kw,
    ewh_stability_limit_s,
    ewh_step,
    load_draw_profile,
    water_draw,
)
from derflex.errors import ConfigError, UnsupportedDirectionError


def test_ess_charge_one_hour_from_setpoint():
    # 0.5 + 0.95 * 5 kW * 1 h / 13.5 kWh
    p = EssParams()
    s = ess_step(p, DeviceState(x=0.5, mode=Mode.CHARGE), dt_s=3600.0)
    assert s.x == pytest.approx(0.5 + 0.95 * 5.0 / 13.5, abs=1e-12)
    assert s.x == pytest.approx(0.8518518518518519, abs=1e-12)


def test_ess_discharge_one_hour_from_setpoint():
    p = EssParams()
    s = ess_step(p, DeviceState(x=0.5, mode=Mode.DISCHARGE), dt_s=3600.0)
    assert s.x == pytest.approx(0.5 - 5.0 / (0.95 * 13.5), abs=1e-12)


def test_ess_standby_holds_state():
    p = EssParams()
    s = ess_step(p, DeviceState(x=0.37, mode=Mode.STANDBY), dt_s=3600.0)
    assert s.x == 0.37


def test_ess_round_trip_is_exact_at_unit_efficiency():
    p = EssParams(eta_c=1.0, eta_d=1.0)
    s = DeviceState(x=0.42, mode=Mode.CHARGE)
    s = ess_step(p, s, dt_s=600.0)
    s = ess_step(p, DeviceState(x=s.x, mode=Mode.DISCHARGE), dt_s=600.0)
    assert s.x == pytest.approx(0.42, abs=1e-12)


def test_ess_state_clamps_to_physical_range():
    p = EssParams()
    hi = ess_step(p, DeviceState(x=0.99, mode=Mode.CHARGE), dt_s=3600.0)
    lo = ess_step(p, DeviceState(x=0.01, mode=Mode.DISCHARGE), dt_s=3600.0)
    assert hi.x == 1.0
    assert lo.x == 0.0


def test_ess_optout_restores_toward_band():
    p = EssParams()
    above = ess_step(p, DeviceState(x=0.95, mode=Mode.OPT_OUT), dt_s=60.0)
    below = ess_step(p, DeviceState(x=0.05, mode=Mode.OPT_OUT), dt_s=60.0)
    inside = ess_step(p, DeviceState(x=0.5, mode=Mode.OPT_OUT), dt_s=60.0)
    assert above.x < 0.95
    assert below.x > 0.05
    assert inside.x == 0.5


def test_ewh_cannot_discharge():
    with pytest.raises(UnsupportedDirectionError):
        ewh_step(EwhParams(), DeviceState(x=130.0, mode=Mode.DISCHARGE), dt_s=2.0)


def test_ewh_equilibrium_at_ambient_without_draw():
    p = EwhParams()
    s = ewh_step(p, DeviceState(x=p.x_amb, mode=Mode.STANDBY), dt_s=2.0)
    assert s.x == pytest.approx(p.x_amb, abs=1e-12)


def test_ewh_standby_step_matches_closed_form():
    p = EwhParams()
    draw = 0.002
    x = 131.0
    expected = x + 2.0 * (-p.loss_per_s * (x - p.x_amb)
                          - (draw / p.tank_liters) * (x - p.inlet_temp))
    s = ewh_step(p, DeviceState(x=x, mode=Mode.STANDBY), dt_s=2.0, draw_lps=draw)
    assert s.x == pytest.approx(expected, abs=1e-15)


def test_ewh_heats_band_bottom_to_top_in_about_an_hour():
    # 4 kW into 303 L lifts 20 degF in roughly 0.98 h
    p = EwhParams()
    s = DeviceState(x=p.x_lo, mode=Mode.CHARGE)
    t = 0.0
    while s.x < p.x_hi:
        s = ewh_step(p, s, dt_s=2.0)
        t += 2.0
        assert t < 2.5 * 3600.0
    assert 0.95 < t / 3600.0 < 1.02


def test_ewh_optout_reheats_only_below_band():
    p = EwhParams()
    cold = ewh_step(p, DeviceState(x=110.0, mode=Mode.OPT_OUT), dt_s=2.0)
    warm = ewh_step(p, DeviceState(x=139.0, mode=Mode.OPT_OUT), dt_s=2.0)
    assert cold.x > 110.0
    assert warm.x < 139.0  # element off, losses pull it down


def test_ewh_stability_limit_enforced():
    p = EwhParams()
    limit = ewh_stability_limit_s(p, max_draw_lps=20.0)
    assert limit < 2.0
    with pytest.raises(ConfigError):
        ewh_step(p, DeviceState(x=130.0, mode=Mode.STANDBY), dt_s=2.0, draw_lps=20.0)


def test_ewh_holding_power_is_modest_at_typical_draw():
    p = EwhParams()
    kw = ewh_holding_power_kw(p, draw_lps=water_draw(DEFAULT_DRAW_PROFILE, 8))
    assert 0.2 < kw < 0.6
    assert ewh_holding_power_kw(p, 0.0) < 0.1


def test_build_fleet_zero_heterogeneity_is_nominal():
    fleet = build_fleet("ess", 50, heterogeneity=0.0, seed=3)
    assert np.all(fleet.p_charge_kw == 5.0)
    assert np.all(fleet.e_cap_kwh == 13.5)
    assert np.all(fleet.x_lo == 0.1) and np.all(fleet.x_hi == 0.9)
    assert np.all(fleet.chg_x_per_s == pytest.approx(0.95 * 5.0 / (13.5 * 3600.0)))
    assert np.all((fleet.x0 >= 0.1) & (fleet.x0 <= 0.9))


def test_build_fleet_is_seed_deterministic():
    a = build_fleet("ess", 20, heterogeneity=0.2, seed=9)
    b = build_fleet("ess", 20, heterogeneity=0.2, seed=9)
    c = build_fleet("ess", 20, heterogeneity=0.2, seed=10)
    assert np.array_equal(a.e_cap_kwh, b.e_cap_kwh)
    assert np.array_equal(a.x0, b.x0)
    assert not np.array_equal(a.e_cap_kwh, c.e_cap_kwh)


def test_build_fleet_heterogeneity_centers_on_nominal():
    fleet = build_fleet("ess", 10_000, heterogeneity=0.2, seed=1)
    assert abs(fleet.e_cap_kwh.mean() - 13.5) / 13.5 < 0.01
    assert fleet.e_cap_kwh.std() > 0.15 * 13.5
    assert np.all(fleet.e_cap_kwh > 0.0)
    assert np.all(fleet.x_lo < fleet.x_set) and np.all(fleet.x_set < fleet.x_hi)
    assert np.all(fleet.x_lo >= 0.0) and np.all(fleet.x_hi <= 1.0)


def test_build_fleet_ewh_keeps_forcing_below_setpoint():
    fleet = build_fleet("ewh", 2000, heterogeneity=0.1, seed=2)
    assert fleet.is_ewh
    assert np.all(fleet.inlet_temp < fleet.x_set)
    assert np.all(fleet.x_amb < fleet.x_set)
    assert np.all(fleet.p_discharge_kw == 0.0)


def test_build_fleet_validates_arguments():
    with pytest.raises(ConfigError):
        build_fleet("pv", 10)
    with pytest.raises(ConfigError):
        build_fleet("ess", 0)
    with pytest.raises(ConfigError):
        build_fleet("ess", 10, heterogeneity=-0.1)
    with pytest.raises(ConfigError):
        build_fleet("ess", 10, nominal=EwhParams())
    with pytest.raises(ConfigError):
        build_fleet("ewh", 10, water_draw_profile=np.zeros(23))


def test_device_view_round_trips_parameters():
    fleet = build_fleet("ess", 5, heterogeneity=0.2, seed=4)
    p, s = fleet.device(2)
    assert p.e_cap_kwh == pytest.approx(float(fleet.e_cap_kwh[2]))
    assert p.eta_c == pytest.approx(
        float(fleet.chg_x_per_s[2] * fleet.e_cap_kwh[2] * 3600.0 / fleet.p_charge_kw[2]))
    assert s.x == float(fleet.x0[2])


def test_default_draw_profile_shape_and_peaks():
    assert DEFAULT_DRAW_PROFILE.shape == (24,)
    assert np.all(DEFAULT_DRAW_PROFILE >= 0.0)
    daily_liters = DEFAULT_DRAW_PROFILE.sum() * 3600.0
    assert 50.0 < daily_liters < 100.0
    assert water_draw(DEFAULT_DRAW_PROFILE, 8) > water_draw(DEFAULT_DRAW_PROFILE, 15)


def test_water_draw_wraps_hours_and_validates():
    prof = np.arange(24, dtype=float)
    assert water_draw(prof, 25) == 1.0
    assert water_draw(prof, 8.9) == 8.0
    with pytest.raises(ConfigError):
        water_draw(np.zeros(5), 8)


def test_load_draw_profile_round_trip(tmp_path):
    p = tmp_path / "draw.csv"
    lines = ["hour,liters_per_s"] + [f"{h},{0.001 * (h + 1):.6f}" for h in range(24)]
    p.write_text("\n".join(lines) + "\n")
    prof = load_draw_profile(str(p))
    assert prof.shape == (24,)
    assert prof[0] == pytest.approx(0.001)
    assert prof[23] == pytest.approx(0.024)


def test_ewh_stability_limit_formula():
    p = EwhParams()
    assert ewh_stability_limit_s(p, 0.0) == pytest.approx(0.1 / p.loss_per_s)
    assert math.isinf(ewh_stability_limit_s(
        EwhParams(loss_per_s=0.0), 0.0))
