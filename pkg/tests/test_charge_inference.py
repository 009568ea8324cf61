import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from levfano.charge_inference import (
    InferenceResult,
    VoltageSweepPoint,
    fano_parameter_prediction,
    fit_frequency_vs_voltage,
    needle_charge,
    static_force,
)
from levfano.errors import DegenerateDesign, InvalidInput, NegativeMass
from levfano.lineshape_fitting import CompositeModelParams, fit_fano, fit_lorentzian
from levfano.physics_core import E0, NeedleConfig, coulomb_slope, frequency_shift_model
from levfano.spectral_estimation import synthesize_spectrum

from conftest import rel

TWO_PI = 2 * math.pi

# [DERIVED] 40-digit evaluation of 4 pi eps0 r V, e0^2/(qQ) and qQ/(4 pi eps0 R^2)
Q_1KV_100UM = 1.1126500562018526e-11
FANO_48E_1KV = 2.9999261393057954e-10
FORCE_48E_1KV_1MM = 7.6904478432e-13
# published measurement: reference particle and force scale
REF_CHARGE_E0 = 48
REF_Q_OVER_M = 2.8
REF_FORCE_1KV = 2.7e-15

VOLTS = np.linspace(-10e3, 10e3, 21)


def sweep_points(trap, needle, q, m=None, noise=0.0, seed=0, volts=VOLTS):
    m = trap.mass if m is None else m
    rng = np.random.default_rng(seed)
    pts = []
    for v in volts:
        w = frequency_shift_model(m, q * needle_charge(v, needle.tip_radius), trap, needle)
        sigma = noise * w if noise > 0 else 1.0
        pts.append(VoltageSweepPoint(float(v), float(w * (1 + noise * rng.standard_normal())), sigma))
    return pts


def test_needle_charge():
    assert needle_charge(0.0, 1e-4) == 0.0
    assert rel(needle_charge(1e3, 100e-6), Q_1KV_100UM) < 1e-12
    assert needle_charge(2e3, 1e-4) == 2 * needle_charge(1e3, 1e-4)
    assert needle_charge(1e3, 1e-4, calibration=1.5) == pytest.approx(1.5 * Q_1KV_100UM, rel=1e-12)
    with pytest.raises(InvalidInput):
        needle_charge(1e3, 0.0)


def test_fano_prediction():
    assert abs(fano_parameter_prediction(E0, E0)) == pytest.approx(1.0, rel=1e-15)
    q = REF_CHARGE_E0 * E0
    assert rel(fano_parameter_prediction(q, Q_1KV_100UM), FANO_48E_1KV) < 1e-12
    assert fano_parameter_prediction(q, 2e-11) == pytest.approx(fano_parameter_prediction(q, 1e-11) / 2, rel=1e-15)
    assert fano_parameter_prediction(q, 1e-11, branch=-1) == -fano_parameter_prediction(q, 1e-11)
    with pytest.raises(InvalidInput):
        fano_parameter_prediction(0.0, 1e-11)
    with pytest.raises(InvalidInput):
        fano_parameter_prediction(q, 0.0)


def test_static_force():
    q = REF_CHARGE_E0 * E0
    assert rel(static_force(q, Q_1KV_100UM, 1e-3), FORCE_48E_1KV_1MM) < 1e-12
    assert static_force(0.0, 1e-11, 1e-3) == 0.0
    assert static_force(q, 1e-11, 2e-3) == pytest.approx(static_force(q, 1e-11, 1e-3) / 4, rel=1e-15)
    assert static_force(q, -1e-11, 1e-3) < 0  # attractive
    with pytest.raises(InvalidInput):
        static_force(q, 1e-11, 0.0)


def test_golden_force_at_one_kilovolt(golden_needle, golden_charge):
    Q = needle_charge(1e3, golden_needle.tip_radius)
    assert abs(static_force(golden_charge, Q, golden_needle.tip_distance) - REF_FORCE_1KV) < 1e-19


@settings(max_examples=50, deadline=None)
@given(n=st.integers(-200, 200).filter(lambda n: n != 0), volts=st.floats(-1e4, 1e4),
       distance=st.floats(1e-4, 0.1))
def test_radial_force_and_axial_slope_differ_by_sqrt2(n, volts, distance):
    needle = NeedleConfig(volts, distance, 4.55e-4)
    q = n * E0
    f = static_force(q, needle.charge, distance)
    slope = coulomb_slope(needle, q)
    assert f == pytest.approx(math.sqrt(2) * slope, rel=1e-12, abs=1e-300)


def test_exact_recovery_noiseless(golden_trap, golden_needle, golden_charge):
    res = fit_frequency_vs_voltage(sweep_points(golden_trap, golden_needle, golden_charge),
                                   golden_trap, golden_needle)
    assert rel(res.mass, golden_trap.mass) < 1e-8
    assert rel(res.charge, golden_charge) < 1e-8
    assert abs(res.charge / E0 - round(res.charge / E0)) < 0.1


def test_noisy_recovery_over_draws(golden_trap, golden_needle, golden_charge):
    # 41 points at 500 V spacing: the charge standard error is about 0.45 e0
    volts = np.linspace(-10e3, 10e3, 41)
    dq, dm, qm = [], [], []
    for seed in range(100):
        res = fit_frequency_vs_voltage(sweep_points(golden_trap, golden_needle, golden_charge,
                                                    noise=1e-3, seed=seed, volts=volts),
                                       golden_trap, golden_needle)
        dq.append(res.charge / E0 - REF_CHARGE_E0)
        dm.append(res.mass / golden_trap.mass - 1)
        qm.append(res.charge_to_mass)
    assert np.max(np.abs(dq)) < 2.0
    assert np.max(np.abs(dm)) < 0.05
    assert np.max(np.abs(np.array(qm) / REF_Q_OVER_M - 1)) < 0.10


def test_errors_match_scatter(golden_trap, golden_needle, golden_charge):
    fits = [fit_frequency_vs_voltage(sweep_points(golden_trap, golden_needle, golden_charge,
                                                  noise=1e-3, seed=s), golden_trap, golden_needle)
            for s in range(200)]
    scatter = np.std([f.charge for f in fits])
    assert 0.8 < scatter / np.mean([f.charge_error for f in fits]) < 1.2


def test_voltage_sign_equivariance(golden_trap, golden_needle, golden_charge):
    pts = sweep_points(golden_trap, golden_needle, golden_charge, noise=1e-3, seed=1,
                       volts=np.linspace(0, 10e3, 11))
    flipped = [VoltageSweepPoint(-p.voltage, p.omega_m, p.omega_m_error) for p in pts]
    a = fit_frequency_vs_voltage(pts, golden_trap, golden_needle)
    b = fit_frequency_vs_voltage(flipped, golden_trap, golden_needle)
    assert b.charge == pytest.approx(-a.charge, rel=1e-10)
    assert b.mass == pytest.approx(a.mass, rel=1e-12)


def test_degenerate_design(golden_trap, golden_needle):
    pts = [VoltageSweepPoint(1e3, golden_trap.omega0 * 1.05, 1.0)] * 4
    with pytest.raises(DegenerateDesign):
        fit_frequency_vs_voltage(pts, golden_trap, golden_needle)


def test_negative_mass(golden_trap, golden_needle):
    w0 = golden_trap.omega0
    pts = [VoltageSweepPoint(v, w0 * 0.9, 1.0) for v in (-1e3, 0.0, 1e3)]
    with pytest.raises(NegativeMass):
        fit_frequency_vs_voltage(pts, golden_trap, golden_needle)


def test_point_validation():
    with pytest.raises(InvalidInput):
        VoltageSweepPoint(0.0, -1.0, 1.0)
    with pytest.raises(InvalidInput):
        VoltageSweepPoint(0.0, 1.0, -1.0)
    with pytest.raises(InvalidInput):
        VoltageSweepPoint(0.0, 1.0, float("inf"))


def test_too_few_points(golden_trap, golden_needle):
    with pytest.raises(InvalidInput):
        fit_frequency_vs_voltage([VoltageSweepPoint(0.0, 1e5, 1.0)] * 2, golden_trap, golden_needle)


def test_result_serialization(tmp_path, golden_trap, golden_needle, golden_charge):
    res = fit_frequency_vs_voltage(sweep_points(golden_trap, golden_needle, golden_charge),
                                   golden_trap, golden_needle)
    res.to_json(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["charge_e0"] == pytest.approx(48.0, rel=1e-8)
    assert d["coulomb_force_n"]["1000"] == pytest.approx(REF_FORCE_1KV, rel=1e-4)
    assert len(d["provenance"]["points_sha256"]) == 64


def test_predicted_fano_round_trip(golden_needle, golden_charge):
    # predicted f -> synthetic spectrum -> refit, within the fit's standard error
    q = golden_charge
    Q = needle_charge(5e3, golden_needle.tip_radius)
    fano = fano_parameter_prediction(q, Q)
    om, g, g_el = TWO_PI * 32e3, TWO_PI * 300.0, TWO_PI * 3.2e9
    b0 = (om * g) ** 2
    a = fano * g_el**2
    base_p = CompositeModelParams(1e-5, b0, 0.0, om, g, 0.0, g_el)
    truth = CompositeModelParams(1e-5, 0.2 * b0, 0.8 * b0 / a**2, om * 1.01, g, fano, g_el)
    grid = np.arange(12e3, 52e3, 64.0)
    base = fit_lorentzian(synthesize_spectrum(base_p, grid, 127, 1), halfwidth_hz=20e3)
    fit = fit_fano(synthesize_spectrum(truth, grid, 127, 2), base, gamma_el=g_el, halfwidth_hz=20e3)
    assert abs(fit.params.fano_param - fano) < 3 * fit.standard_errors["fano_param"]
