import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import NANO
from ulfnmr.analysis import (
    AnalysisReport,
    EtaCurve,
    EtaSample,
    FitError,
    InsufficientCoverageError,
    LightShiftFit,
    NoCrossingError,
    SweepSettings,
    UnresolvedDoubletError,
    analyze,
    asymmetry_ratio,
    eta_point,
    eta_sweep,
    find_cross_points,
    fit_doublet,
    infer_g_sign,
    light_shift_from_power,
)
from ulfnmr.pipeline import AcquisitionConfig, CouplingConfig, SignalLines, analytic_spectrum, sensor_signal_lines, spectrum_fft, synthesize_time_signal
from ulfnmr.sensor import SensorModel
from ulfnmr.spin_system import FieldConfig, molecule_lines

CENTER = 222.2
SETTINGS = SweepSettings(CENTER)


def synthetic_curve(fields_nT, etas, valid=None) -> EtaCurve:
    valid = [True] * len(fields_nT) if valid is None else valid
    return EtaCurve(tuple(EtaSample(b * NANO, e, valid=v) for b, e, v in zip(fields_nT, etas, valid)))


def direct_eta(mol, sensor, bz, kappa=1.0):
    """eta from |S_i| of the two doublet lines, no spectrum or fit involved."""
    lines = molecule_lines(mol, FieldConfig.along_z(bz)).select(CENTER - 15, CENTER + 15)
    S = np.abs(sensor_signal_lines(lines, sensor.with_bias(bz), CouplingConfig(kappa)).amplitude)
    return (S[0] - S[1]) / (S[0] + S[1])


# -- peak fitting -------------------------------------------------------------


@pytest.mark.parametrize("split_widths", [10, 30, 100])
@pytest.mark.parametrize("S1, S2", [(1.0, 0.3j), (0.2 - 0.5j, 2.0), (1.0, 1.0)])
def test_fit_recovers_known_magnitudes(split_widths, S1, S2):
    acq = AcquisitionConfig(t2=3.0)
    split = split_widths * acq.linewidth_hz
    lines = SignalLines([CENTER - split / 2, CENTER + split / 2], [S1, S2])
    grid = np.arange(CENTER - 15, CENTER + 15, acq.linewidth_hz / 10)
    f1, f2 = fit_doublet(analytic_spectrum(lines, acq, grid), CENTER, 15.0)
    assert f1.magnitude == pytest.approx(abs(S1) * acq.t2, rel=1e-3)
    assert f2.magnitude == pytest.approx(abs(S2) * acq.t2, rel=1e-3)
    assert f1.center_hz == pytest.approx(CENTER - split / 2, abs=1e-4)
    assert f1.width_hz == pytest.approx(acq.linewidth_hz, rel=1e-3)


def test_fit_on_fft_spectrum():
    acq = AcquisitionConfig(duration=30.0, t2=3.0)
    lines = SignalLines([220.0, 224.0], [1.0, 0.5j])
    _, s = synthesize_time_signal(lines, acq)
    f1, f2 = fit_doublet(spectrum_fft(s, acq), 222.0, 10.0)
    assert f1.magnitude == pytest.approx(3.0, rel=1e-3)
    assert f2.magnitude == pytest.approx(1.5, rel=1e-3)


def test_fit_rejects_merged_doublet():
    acq = AcquisitionConfig(t2=3.0)
    lines = SignalLines([CENTER, CENTER + 0.05], [1.0, 1.0])
    grid = np.arange(CENTER - 5, CENTER + 5, 0.005)
    with pytest.raises(UnresolvedDoubletError):
        fit_doublet(analytic_spectrum(lines, acq, grid), CENTER, 5.0)


def test_fit_rejects_empty_window():
    acq = AcquisitionConfig(t2=3.0)
    lines = SignalLines([100.0], [1.0])
    spec = analytic_spectrum(lines, acq, np.arange(300, 310, 0.01))
    with pytest.raises(UnresolvedDoubletError):
        fit_doublet(spec, CENTER, 5.0)


def test_fit_error_carries_residual():
    err = FitError("did not converge", 0.25)
    assert err.residual_norm == 0.25
    assert "0.25" in str(err)


# -- eta ----------------------------------------------------------------------


def test_asymmetry_ratio_limits():
    assert asymmetry_ratio(1.0, 1.0) == 0.0
    assert asymmetry_ratio(1.0, 0.0) == 1.0
    assert asymmetry_ratio(0.0, 2.0) == -1.0
    with pytest.raises(ValueError):
        asymmetry_ratio(0.0, 0.0)
    with pytest.raises(ValueError):
        asymmetry_ratio(-1.0, 1.0)


@given(st.floats(0, 1e6), st.floats(1e-9, 1e6), st.floats(1e-6, 1e6))
def test_asymmetry_ratio_bounded_and_scale_invariant(a1, a2, c):
    eta = asymmetry_ratio(a1, a2)
    assert -1.0 <= eta <= 1.0
    assert asymmetry_ratio(c * a1, c * a2) == pytest.approx(eta, abs=1e-12)


def test_lower_peak_smaller_at_minus_146nT(formic, lab_sensor):
    s = eta_point(formic, lab_sensor, CouplingConfig(), AcquisitionConfig(), -146 * NANO, SETTINGS)
    assert s.valid and s.amp1 < s.amp2


def test_positive_asymmetry_in_region_two(formic, lab_sensor):
    s = eta_point(formic, lab_sensor, CouplingConfig(), AcquisitionConfig(), 29 * NANO, SETTINGS)
    assert s.valid and s.eta > 0


# eta from the full pipeline at the reference configuration (L = -43.7 nT,
# kappa = 1, Gamma = 2 pi 50, q = 6), frozen from the |S1|/|S2| oracle
FROZEN_ETA = {
    -200: -0.2414,
    -146: -0.2838,
    -50: -0.5094,
    -10: -0.7851,
    10: 0.6474,
    29: 0.2900,
    40: 0.0686,
    60: -0.3301,
    100: -0.7799,
    200: -0.3479,
}


@pytest.mark.parametrize("bz_nT", sorted(FROZEN_ETA))
def test_pipeline_eta_matches_direct_oracle(formic, lab_sensor, bz_nT):
    sample = eta_point(formic, lab_sensor, CouplingConfig(), AcquisitionConfig(), bz_nT * NANO, SETTINGS)
    assert sample.valid
    assert sample.eta == pytest.approx(direct_eta(formic, lab_sensor, bz_nT * NANO), abs=1e-3)
    assert sample.eta == pytest.approx(FROZEN_ETA[bz_nT], abs=2e-3)


def test_fft_method_agrees_with_analytic(formic, lab_sensor):
    acq = AcquisitionConfig(duration=30.0, t2=3.0)
    a = eta_point(formic, lab_sensor, CouplingConfig(), acq, 100 * NANO, SETTINGS)
    f = eta_point(formic, lab_sensor, CouplingConfig(), acq, 100 * NANO, SweepSettings(CENTER, method="fft"))
    assert f.amp1 == pytest.approx(a.amp1, rel=1e-3)
    assert f.amp2 == pytest.approx(a.amp2, rel=1e-3)


@pytest.mark.parametrize("bz_nT", [-120.0, 29.0, 100.0])
def test_eta_is_t2_independent(formic, lab_sensor, bz_nT):
    etas = [
        eta_point(formic, lab_sensor, CouplingConfig(), AcquisitionConfig(t2=t2, duration=10 * t2), bz_nT * NANO, SETTINGS).eta
        for t2 in (1.0, 3.0, 10.0)
    ]
    assert np.ptp(etas) < 1e-3


def test_dead_zone_points_are_flagged(formic, lab_sensor):
    s = eta_point(formic, lab_sensor, CouplingConfig(), AcquisitionConfig(), 2 * NANO, SETTINGS)
    assert not s.valid and "dead zone" in s.reason
    assert math.isnan(s.eta)


def test_window_without_lines_is_flagged(formic, lab_sensor):
    s = eta_point(formic, lab_sensor, CouplingConfig(), AcquisitionConfig(), 50 * NANO, SweepSettings(400.0))
    assert not s.valid and "fewer than two lines" in s.reason


def test_sweep_settings_validation():
    with pytest.raises(ValueError):
        SweepSettings(CENTER, method="wavelet")
    with pytest.raises(ValueError):
        SweepSettings(CENTER, window_hz=0.0)


def test_parallel_sweep_matches_serial(formic, lab_sensor):
    grid = np.linspace(-100, 100, 9) * NANO
    acq = AcquisitionConfig(noise_rms=0.0)
    serial = eta_sweep(formic, lab_sensor, CouplingConfig(), acq, grid, SETTINGS)
    parallel = eta_sweep(formic, lab_sensor, CouplingConfig(), acq, grid, SETTINGS, workers=3)
    for attr in ("bz", "eta", "amp1", "amp2", "raw_eta"):
        a = np.array([getattr(x, attr) for x in serial.samples])
        b = np.array([getattr(x, attr) for x in parallel.samples])
        assert np.array_equal(a, b, equal_nan=True)
    assert [x.reason for x in serial.samples] == [x.reason for x in parallel.samples]


def test_noisy_sweep_reproducible_under_seed(formic, lab_sensor):
    grid = np.array([-80.0, 29.0, 120.0]) * NANO
    acq = AcquisitionConfig(duration=30.0, noise_rms=2e6, seed=11)
    settings_fft = SweepSettings(CENTER, method="fft")
    a = eta_sweep(formic, lab_sensor, CouplingConfig(), acq, grid, settings_fft)
    b = eta_sweep(formic, lab_sensor, CouplingConfig(), acq, grid, settings_fft)
    assert np.array_equal(a.etas, b.etas)
    clean = eta_sweep(formic, lab_sensor, CouplingConfig(), AcquisitionConfig(), grid, SETTINGS)
    assert not np.array_equal(a.etas, clean.etas)
    np.testing.assert_allclose(a.etas, clean.etas, atol=0.05)


# -- cross points --------------------------------------------------------------


def test_cross_point_exact_on_linear_data():
    B = np.linspace(-200, 200, 41)
    curve = synthetic_curve(B, 0.01 * (B - 43.7))
    cps = find_cross_points(curve)
    assert len(cps) == 1
    assert cps[0].field / NANO == pytest.approx(43.7, rel=1e-12)
    assert not cps[0].trivial
    assert cps[0].slope == pytest.approx(0.01 / NANO, rel=1e-10)


def test_noisy_cross_point_within_two_nT():
    B = np.linspace(-200, 200, 40)
    clean = -np.sin(np.pi * (B - 43.7) / 300)
    roots = []
    for _ in range(2):
        rng = np.random.default_rng(7)
        noisy = clean + rng.normal(scale=0.01, size=B.size)
        roots.append([c.field for c in find_cross_points(synthetic_curve(B, noisy))])
    assert roots[0] == roots[1]
    assert any(abs(r / NANO - 43.7) < 2.0 for r in roots[0])


def test_trivial_flag_for_bracket_across_zero():
    B = np.array([-30, -20, -10, 10, 20, 30, 40, 50, 60])
    eta = np.array([-0.5, -0.6, -0.7, 0.6, 0.4, 0.2, 0.05, -0.1, -0.3])
    valid = [True, True, True, True, True, True, True, True, True]
    cps = find_cross_points(synthetic_curve(B, eta, valid))
    assert [c.trivial for c in cps] == [True, False]


def test_invalid_points_are_skipped():
    B = np.array([-20, -10, 0, 10, 20])
    eta = np.array([-1.0, -0.5, 99.0, 0.5, 1.0])
    cps = find_cross_points(synthetic_curve(B, eta, [True, True, False, True, True]))
    assert len(cps) == 1 and cps[0].trivial


def test_no_crossing_raises():
    with pytest.raises(NoCrossingError):
        find_cross_points(synthetic_curve([1, 2, 3], [-1, -2, -3]))
    with pytest.raises(NoCrossingError):
        find_cross_points(synthetic_curve([1], [1.0]))
    with pytest.raises(ValueError):
        find_cross_points(synthetic_curve([1, 2], [1, -1]), k=1)


# -- g sign ---------------------------------------------------------------------


def pattern_curve(signs):
    B = np.linspace(-200, 200, 41)
    eta = np.where(B < 0, signs[0], np.where(B < 43.7, signs[1], signs[2])) * (0.1 + 0.001 * np.abs(B))
    return synthetic_curve(B, eta)


def test_g_sign_patterns():
    assert infer_g_sign(pattern_curve((-1, 1, -1))).sign == 1
    assert infer_g_sign(pattern_curve((1, -1, 1))).sign == -1


def test_g_sign_region_two_only_is_undetermined():
    B = np.linspace(10, 40, 10)
    res = infer_g_sign(synthetic_curve(B, 0.3 - 0.001 * B))
    assert res.sign == 0 and res.label == "undetermined"
    with pytest.raises(InsufficientCoverageError):
        infer_g_sign(synthetic_curve(B, 0.3 - 0.001 * B), strict=True)


def test_g_sign_needs_points_in_every_region():
    B = np.array([-100, -50, 5, 50, 100, 150])
    eta = np.array([-0.3, -0.2, 0.4, -0.1, -0.2, -0.3])
    res = infer_g_sign(synthetic_curve(B, eta))
    assert res.sign == 0 and "region point counts" in res.reason


def test_g_sign_inconsistent_regions():
    B = np.linspace(-200, 200, 41)
    eta = np.where(B < 0, -0.3, np.where(B < 43.7, 0.3, -0.3))
    eta[(B > 100)] = 0.3  # a third sign change
    res = infer_g_sign(synthetic_curve(B, eta))
    assert res.sign == 0


def test_zero_light_shift_has_no_crossing(formic):
    # without a light shift eta is negative on both sides of zero field
    curve = eta_sweep(formic, SensorModel(), CouplingConfig(), AcquisitionConfig(), np.linspace(-200, 200, 40) * NANO, SETTINGS)
    B, e = curve.valid_points()
    assert np.all(e < 0)
    assert infer_g_sign(curve).sign == 0


@pytest.mark.parametrize(
    "kappa, t2, gamma_hz",
    list(itertools.product([0.1, 10.0], [0.5, 10.0], [10.0, 200.0])) + [(1.0, 3.0, 50.0)],
)
def test_g_sign_invariant_under_nuisance_parameters(formic, kappa, t2, gamma_hz):
    # dense grid near region II so that it stays populated when a short T2
    # widens the dead zone
    grid = np.unique(np.r_[np.linspace(-200, -30, 18), np.arange(-30, 60, 0.5), np.linspace(60, 200, 15)]) * NANO
    sensor = SensorModel(Gamma=2 * math.pi * gamma_hz, light_shift=-43.7 * NANO)
    acq = AcquisitionConfig(t2=t2, duration=10 * t2)
    curve = eta_sweep(formic, sensor, CouplingConfig(kappa), acq, grid, SETTINGS, workers=4)
    res = infer_g_sign(curve)
    assert res.sign == 1, res


# -- light shift ------------------------------------------------------------------


def test_light_shift_fit_exact():
    P = np.array([10.0, 20.0, 30.0, 40.0])
    B = 1.5 * NANO * P + 0.2 * NANO
    fit = light_shift_from_power(list(zip(P, B)))
    assert fit.slope == pytest.approx(1.5 * NANO, rel=1e-12)
    assert fit.intercept == pytest.approx(0.2 * NANO, rel=1e-10)
    assert fit.residual < 1e-20
    assert fit.alpha == -fit.slope
    assert fit.light_shift(10.0) == pytest.approx(-15.2 * NANO)


def test_light_shift_fit_errors():
    with pytest.raises(ValueError, match="degenerate"):
        light_shift_from_power([(20.0, 1e-8), (20.0, 2e-8), (20.0, 3e-8)])
    with pytest.raises(ValueError, match="three"):
        light_shift_from_power([(1.0, 1e-8), (2.0, 2e-8)])


# -- report ------------------------------------------------------------------------


def test_report_round_trip(formic, lab_sensor):
    curve = eta_sweep(formic, lab_sensor, CouplingConfig(), AcquisitionConfig(), np.linspace(-200, 200, 40) * NANO, SETTINGS)
    fit = LightShiftFit(-1.0 * NANO, 0.1 * NANO, 1e-12)
    report = analyze(curve, light_shift_fit=fit)
    assert report.g_sign == 1
    assert report.trivial == (True, False)
    assert report.magic_field_estimate / NANO == pytest.approx(43.7, abs=0.5)
    again = AnalysisReport.from_dict(report.to_dict())
    assert again.g_sign == report.g_sign
    assert again.region_signs == report.region_signs
    np.testing.assert_allclose(again.cross_points, report.cross_points, rtol=1e-12)
    assert again.light_shift_fit.slope == pytest.approx(fit.slope, rel=1e-12)
