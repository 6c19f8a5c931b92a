import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import twin_bound_violations
from saha_forecast import twin
from saha_forecast.twin import (
    ConfigError,
    Scenario,
    ScenarioConfig,
    TwinConstants,
    aa_gradient,
    alveolar_po2,
    arterial_saturation,
    auto_peep_fraction,
    clip,
    deadspace_fraction,
    generate_scenario,
    hill_saturation,
    observe,
    regime,
    shunt_fraction,
    simulate,
    tidal_volumes,
    ventilation_and_paco2,
)

C = TwinConstants()


def test_constants_defaults():
    assert (C.P_b, C.P_H2O, C.R, C.V_CO2, C.SvO2) == (760, 47, 0.8, 200, 0.70)
    assert (C.P50, C.hill_n, C.PBW) == (26.6, 2.7, 70)
    assert C.VD_anat == pytest.approx(154.0)
    assert (C.k_RR, C.k_CL, C.tau_sens, C.sigma_obs, C.dt) == (0.002, 0.004, 10, 0.01, 60)


@pytest.mark.parametrize("kw", [dict(P_b=-1), dict(SvO2=1.0), dict(hill_n=0), dict(sigma_obs=-0.1)])
def test_constants_reject_bad_values(kw):
    with pytest.raises(ConfigError):
        TwinConstants(**kw)


@pytest.mark.parametrize("x,a,b,expected", [(1.2, 0, 1, 1.0), (0.5, 0, 1, 0.5), (-3, -1, 1, -1)])
def test_clip(x, a, b, expected):
    assert clip(x, a, b) == expected


def test_clip_invalid_bounds():
    with pytest.raises(ValueError):
        clip(0.0, 1.0, 0.0)


def test_regime():
    assert regime(360, 360, 15) == 0.5
    assert regime(375, 360, 15) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
    assert regime(-1e6, 360, 15) == pytest.approx(0.0)
    assert regime(1e6, 360, 15) == pytest.approx(1.0)
    t = np.arange(1, 721)
    assert np.all(np.diff(regime(t, 360, 15)) > 0)


@pytest.mark.parametrize("RR,CL,expected", [(14, 35, 0.0), (30, 20, 0.08), (10, 40, 0.0)])
def test_auto_peep(RR, CL, expected):
    assert auto_peep_fraction(RR, CL, C) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("g,peep,expected", [(0, 5, 0.10), (0, 20, 0.10), (1, 5, 0.25), (1, 15, 0.20)])
def test_deadspace(g, peep, expected):
    assert deadspace_fraction(g, peep) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("VT,phi,fds,expected", [(450, 0, 0.10, (450, 251)), (160, 0, 0.05, (160, 5)),
                                                 (500, 0.08, 0.10, (460, 260))])
def test_tidal_volumes(VT, phi, fds, expected):
    assert tidal_volumes(VT, phi, fds, C) == pytest.approx(expected, abs=1e-9)


def test_ventilation_and_paco2():
    # V_A = 4.315 L/min from VT_alv=308.2142857 and RR=14
    V_A, PaCO2 = ventilation_and_paco2(4315.0 / 14, 14, C)
    assert V_A == pytest.approx(4.315)
    assert PaCO2 == pytest.approx(40.0, abs=1e-6)
    V_A, PaCO2 = ventilation_and_paco2(30.0, 10, C)  # V_A = 0.3 floors at 0.5
    assert V_A == pytest.approx(0.3) and PaCO2 == 80.0
    _, PaCO2 = ventilation_and_paco2(8630.0 / 20, 20, C)
    assert PaCO2 == 25.0


@pytest.mark.parametrize("fio2,paco2,expected", [(0.21, 40, 99.73), (1.0, 40, 663.0), (0.21, 80, 49.73)])
def test_alveolar_po2(fio2, paco2, expected):
    assert alveolar_po2(fio2, paco2, C) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("args,expected", [((0, 5, 0, 0), 10), ((1, 5, 1, 0), 41), ((1, 15, 1, 0), 21)])
def test_aa_gradient(args, expected):
    assert aa_gradient(*args) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("args,expected", [((0, 5, 0, 0), 0.05), ((1, 5, 0, 0), 0.32), ((1, 15, 1, 0), 0.11)])
def test_shunt_fraction(args, expected):
    assert shunt_fraction(*args) == pytest.approx(expected, abs=1e-12)


def test_hill_saturation():
    assert hill_saturation(26.6, C) == 0.5
    assert hill_saturation(100.0, C) == pytest.approx(100**2.7 / (100**2.7 + 26.6**2.7), abs=1e-12)
    assert hill_saturation(100.0, C) == pytest.approx(0.9728, abs=5e-5)
    assert hill_saturation(1e9, C) == pytest.approx(1.0)
    p = np.linspace(1, 600, 500)
    assert np.all(np.diff(hill_saturation(p, C)) > 0)


def test_arterial_saturation():
    assert arterial_saturation(0.05, 0.97, C) == pytest.approx(0.9565, abs=1e-12)
    for s in (0.02, 0.2, 0.45):
        assert arterial_saturation(s, 0.70, C) == pytest.approx(0.70, abs=1e-12)
    assert arterial_saturation(0.45, 0.50, C) == pytest.approx(0.59, abs=1e-12)


@given(st.floats(0.71, 1.0), st.floats(0.02, 0.44), st.floats(0.001, 0.01))
def test_arterial_saturation_decreases_with_shunt(s_cap, shunt, step):
    assert arterial_saturation(shunt + step, s_cap, C) <= arterial_saturation(shunt, s_cap, C)


def test_observe_alpha_and_fixed_point():
    assert C.alpha == pytest.approx(math.exp(-6), abs=1e-15)
    assert C.alpha == pytest.approx(0.0024788, abs=1e-7)
    quiet = TwinConstants(sigma_obs=0.0)
    out = observe(np.full(50, 0.95), quiet, np.random.default_rng(0))
    assert np.allclose(out, 0.95, atol=1e-15)


def test_observe_one_ewma_step():
    quiet = TwinConstants(sigma_obs=0.0)
    out = observe(np.array([0.95, 0.95, 0.85]), quiet)
    assert out[0] == 0.95
    assert out[2] == pytest.approx(C.alpha * 0.95 + (1 - C.alpha) * 0.85, abs=1e-15)
    assert out[2] == pytest.approx(0.85025, abs=1e-5)


def test_observe_rejects_empty():
    with pytest.raises(ValueError):
        observe(np.array([]), C)


def test_scenario_defaults_and_determinism():
    a = generate_scenario(seed=11)
    b = generate_scenario(seed=11)
    assert a.N == 720 and a.t_star == 360
    assert 12 <= a.tau_g <= 20
    for name in twin.INPUT_COLUMNS:
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.FiO2.min() >= 0.21 and a.FiO2.max() <= 1.0
    assert not np.array_equal(a.FiO2, generate_scenario(seed=12).FiO2) or a.tau_g != generate_scenario(seed=12).tau_g


def test_scenario_config_validation():
    with pytest.raises(ConfigError):
        ScenarioConfig(tau_g_range=(10, 20))
    with pytest.raises(ConfigError):
        ScenarioConfig(FiO2_init=0.1)
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"nonsense": 1})


def test_scenario_rejects_bad_trajectories():
    sc = generate_scenario(seed=0)
    kw = dict(N=sc.N, t_star=sc.t_star, tau_g=sc.tau_g, FiO2=sc.FiO2, PEEP=sc.PEEP, VT=sc.VT, RR=sc.RR,
              Prone=sc.Prone, CL=sc.CL, rng_seed=0)
    with pytest.raises(ConfigError):
        Scenario(**{**kw, "FiO2": np.full(720, 1.2)})
    with pytest.raises(ConfigError):
        Scenario(**{**kw, "PEEP": sc.PEEP[:-1]})
    with pytest.raises(ConfigError):
        Scenario(**{**kw, "tau_g": 25.0})


def test_simulate_replays_the_controller_view():
    """The closed-loop generator and the replay must see the same observations."""
    cfg = ScenarioConfig()
    sc = generate_scenario(cfg, seed=3)
    tr = simulate(sc)
    obs = tr["SpO2_obs"]
    fio2, peep = cfg.FiO2_init, cfg.PEEP_init
    for k in range(sc.N - 1):
        assert sc.FiO2[k] == fio2 and sc.PEEP[k] == peep
        if (k + 1) % cfg.titration_interval == 0:
            if obs[k] < cfg.spo2_low:
                fio2, peep = round(min(fio2 + 0.05, 1.0), 6), min(peep + 1, cfg.PEEP_cap)
            elif obs[k] > cfg.spo2_high and fio2 > 0.30 + 1e-9:
                fio2 = round(fio2 - 0.05, 6)


def test_simulate_deterministic():
    sc = generate_scenario(seed=5)
    a, b = simulate(sc), simulate(sc)
    for name in twin.TRACE_COLUMNS:
        assert np.array_equal(a[name], b[name])


def test_simulate_midpoint_and_baselines():
    tr = simulate(generate_scenario(seed=1), C.without_noise())
    assert tr["g"][359] == 0.5
    early = slice(0, 200)
    assert np.allclose(tr["shunt"][early], 0.05, atol=2e-3)
    assert np.allclose(tr["f_DS"][early], 0.10, atol=2e-3)


def test_noise_free_observation_tracks_truth():
    quiet = C.without_noise()
    tr = simulate(generate_scenario(seed=2, consts=quiet), quiet)
    obs, true = tr["SpO2_obs"], tr["SpO2_true"]
    gap = np.abs(obs[1:] - true[1:])
    jump = np.abs(obs[:-1] - true[1:])
    assert np.all(gap <= quiet.alpha * jump + 1e-15)


def test_transition_lowers_saturation():
    quiet = C.without_noise()
    tr = simulate(generate_scenario(seed=0, consts=quiet), quiet)
    s = tr["SpO2_true"]
    assert s[460:].mean() < s[:260].mean()


def test_trace_csv_roundtrip(tmp_path):
    tr = simulate(generate_scenario(seed=4))
    path = tmp_path / "trace.csv"
    twin.write_trace_csv(tr, path)
    header = path.read_text().splitlines()[0].split(",")
    assert tuple(header) == twin.TRACE_COLUMNS
    back = twin.read_trace_csv(path)
    for name in twin.TRACE_COLUMNS:
        assert np.allclose(back[name], tr[name], rtol=1e-11, atol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_trace_bounds_property(seed):
    tr = simulate(generate_scenario(seed=seed))
    assert twin_bound_violations(tr) == []

