import math
import warnings

import numpy as np
import pytest
from scipy import integrate

from trapfall.constants import K_B
from trapfall.physics_core import DomainError, ParticleParams, gas_damping_rate, EnvironmentParams, mass_from_radius
from trapfall.pipeline import (
    FitError,
    HardeningWarning,
    ModeSpec,
    Spectrum,
    Trace,
    bandpass_estimate,
    calibrate,
    design_bandpass,
    duffing_frequency,
    effective_temperature,
    ensemble_expansion,
    fit_duffing,
    fit_psd_peaks,
    initial_scales,
    mass_from_damping,
    oscillator_lineshape,
    radius_from_damping,
    read_trace_binary,
    read_trace_csv,
    readout_state,
    sinusoidal_transduction,
    synthesize_trace,
    tensor_row,
    thermal_mode,
    variance_with_se,
    welch_psd,
    write_trace_binary,
    write_trace_csv,
)

TWO_PI = 2 * math.pi
MASS = mass_from_radius(60e-9)


# traces and IO


def test_trace_markers_validated():
    Trace(1e3, np.zeros(10), markers={"initialize": (0, 4), "gap": (4, 6), "measure": (6, 10)})
    with pytest.raises(DomainError):
        Trace(1e3, np.zeros(10), markers={"a": (0, 12)})
    with pytest.raises(DomainError):
        Trace(1e3, np.zeros(10), markers={"a": (0, 6), "b": (4, 8)})
    with pytest.raises(DomainError):
        Trace(0.0, np.zeros(10))
    with pytest.raises(DomainError):
        Trace(1.0, np.zeros(10), channel="Z")


def test_trace_segment():
    tr = Trace(1e3, np.arange(10.0), markers={"gap": (2, 5)})
    np.testing.assert_array_equal(tr.segment("gap").values, [2.0, 3.0, 4.0])


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tr = Trace(2.5e5, rng.standard_normal(100), "X", "V", {"measure": (10, 90)})
    path = tmp_path / "t.csv"
    write_trace_csv(tr, path)
    back = read_trace_csv(path)
    np.testing.assert_array_equal(back.values, tr.values)
    assert (back.sample_rate, back.channel, back.markers) == (tr.sample_rate, "X", {"measure": (10, 90)})


def test_csv_without_sidecar(tmp_path):
    path = tmp_path / "t.csv"
    np.savetxt(path, np.column_stack([np.arange(5) * 1e-3, np.ones(5)]), delimiter=",", header="t,v", comments="")
    assert read_trace_csv(path).sample_rate == pytest.approx(1e3)


def test_binary_round_trip(tmp_path):
    tr = Trace(1e6, np.random.default_rng(1).standard_normal(257), "Y")
    path = tmp_path / "t.bin"
    write_trace_binary(tr, path)
    back = read_trace_binary(path)
    np.testing.assert_array_equal(back.values, tr.values)
    assert back.sample_rate == 1e6 and back.channel == "Y"


def test_binary_rejects_corrupt(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(DomainError):
        read_trace_binary(path)
    good = tmp_path / "good.bin"
    write_trace_binary(Trace(1.0, np.ones(4)), good)
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(DomainError):
        read_trace_binary(good)


# synthesis


def test_thermal_mode_equipartition():
    spec = ModeSpec(TWO_PI * 100e3, TWO_PI * 2e3, 300.0)
    q, p = thermal_mode(spec, MASS, 1e6, 400000, np.random.default_rng(3))
    assert q.var() == pytest.approx(K_B * 300 / (MASS * spec.omega**2), rel=0.05)
    assert p.var() == pytest.approx(MASS * K_B * 300, rel=0.05)


def test_synthesis_aliasing_guard():
    modes = [ModeSpec(TWO_PI * 100e3, 1e3, 300.0)] * 3
    with pytest.raises(DomainError):
        synthesize_trace(modes, MASS, (1, 1, 1), 150e3, 0.01, np.random.default_rng(0))


def test_transduction_linear_for_small_amplitude():
    q = np.array([1e-12, -3e-12])
    np.testing.assert_allclose(sinusoidal_transduction(q, 1.064e-6), q, rtol=1e-9)


# spectra


def test_parseval_sinusoid():
    fs, n, A = 1e5, 2**18, 0.7
    t = np.arange(n) / fs
    f0 = 1234.5 * fs / 8192
    spec = welch_psd(Trace(fs, A * np.sin(TWO_PI * f0 * t)), 8192)
    assert spec.band_power() == pytest.approx(A**2 / 2, rel=0.01)


def test_white_noise_level():
    fs, sigma = 1e5, 0.3
    x = sigma * np.random.default_rng(2).standard_normal(2**20)
    spec = welch_psd(Trace(fs, x), 4096)
    assert spec.n_averages >= 64
    assert np.mean(spec.psd[1:-1]) == pytest.approx(sigma**2 / (fs / 2), rel=0.05)


@pytest.mark.parametrize("window", ["hann", "hamming", "blackman", "boxcar"])
def test_parseval_all_windows(window):
    x = np.random.default_rng(5).standard_normal(2**18)
    spec = welch_psd(Trace(1e4, x), 2048, window=window)
    assert spec.band_power() == pytest.approx(np.var(x), rel=0.02)


def test_welch_validation():
    tr = Trace(1.0, np.zeros(100))
    with pytest.raises(DomainError):
        welch_psd(tr, 200)
    with pytest.raises(DomainError):
        welch_psd(tr, 64, overlap=1.0)


def test_lineshape_unit_area():
    omega, gamma = TWO_PI * 40e3, TWO_PI * 900.0
    L = lambda f: oscillator_lineshape(f, omega, gamma)  # noqa: E731
    area = integrate.quad(L, 0, 40e3, limit=500)[0] + integrate.quad(L, 40e3, np.inf, limit=500)[0]
    assert area == pytest.approx(1.0, rel=1e-6)


def _model_spectrum(peaks, floor, rng=None, n_avg=200):
    f = np.arange(0, 100e3, 5.0)
    S = np.full(f.size, floor)
    for om, ga, ar in peaks:
        S = S + ar * oscillator_lineshape(f, om, ga)
    if rng is not None:
        S = S * rng.gamma(n_avg, 1.0 / n_avg, f.size)
    return Spectrum(f, S, 7.5, n_avg)


def test_single_peak_fit_round_trip():
    truth = (TWO_PI * 41e3, TWO_PI * 300.0, 2e-6)
    peak = truth[2] * 4 / truth[1]
    spec = _model_spectrum([truth], peak / 300, np.random.default_rng(6), n_avg=400)
    fit = fit_psd_peaks(spec, [0.9 * 41e3])
    assert fit.omega[0] == pytest.approx(truth[0], rel=1e-3)
    assert fit.gamma[0] == pytest.approx(truth[1], rel=0.01)
    assert fit.area[0] == pytest.approx(truth[2], rel=0.01)
    assert np.all(fit.gamma > 0) and np.all(fit.area > 0)


def test_joint_fit_of_close_pair_beats_single_fits():
    gamma = TWO_PI * 1e3
    a = (TWO_PI * 50e3, gamma, 1e-6)
    b = (TWO_PI * (50e3 + 3e3), gamma, 1.5e-6)
    spec = _model_spectrum([a, b], 1e-12)
    joint = fit_psd_peaks(spec, [50e3, 53e3], band=(40e3, 63e3))
    assert joint.area[0] == pytest.approx(a[2], rel=0.03)
    assert joint.area[1] == pytest.approx(b[2], rel=0.03)
    single = fit_psd_peaks(spec, [50e3], band=(45e3, 51.5e3))
    assert abs(single.area[0] / a[2] - 1) > abs(joint.area[0] / a[2] - 1)


def test_fit_failure_reports_diagnostics():
    spec = _model_spectrum([(TWO_PI * 41e3, TWO_PI * 300.0, 2e-6)], 1e-12)
    with pytest.raises(FitError) as info:
        fit_psd_peaks(spec, [30e3], max_iter=1)
    assert info.value.diagnostics


def test_fit_needs_bins():
    spec = _model_spectrum([(TWO_PI * 41e3, TWO_PI * 300.0, 2e-6)], 1e-12)
    with pytest.raises(DomainError):
        fit_psd_peaks(spec, [41e3], band=(41e3, 41.01e3))


def test_synthetic_mode_area_is_equipartition():
    c = 19e6
    mode = ModeSpec(TWO_PI * 112e3, TWO_PI * 2e3, 300.0)
    rec = synthesize_trace([mode, mode, mode], MASS, (c, 0.0, 0.0), 1e6, 2.0, np.random.default_rng(7))
    spec = welch_psd(rec.traces["X"], 8192)
    expected = c**2 * K_B * 300 / (MASS * mode.omega**2)
    assert spec.band_power(60e3, 200e3) == pytest.approx(expected, rel=0.03)


def test_noiseless_calibration_round_trip():
    c = 24e6
    mode = ModeSpec(TWO_PI * 136e3, TWO_PI * 9e3, 300.0)
    rec = synthesize_trace([mode] * 3, MASS, (0.0, c, 0.0), 1e6, 4.0, np.random.default_rng(8))
    fit = fit_psd_peaks(welch_psd(rec.traces["Y"], 16384), [130e3], band=(40e3, 240e3))
    assert calibrate(fit, MASS)[0] == pytest.approx(c, rel=0.03)


def test_calibration_square_root_scaling():
    c1 = calibrate([1e-6], MASS, [1e5])
    c4 = calibrate([4e-6], MASS, [1e5])
    assert c4[0] / c1[0] == pytest.approx(2.0, rel=1e-15)


def test_radius_from_table_damping():
    R = radius_from_damping(TWO_PI * 9.43e3, 960.0)
    assert R == pytest.approx(55.8e-9, rel=0.01)
    assert abs(R - 59e-9) <= 8e-9


def test_radius_linear_in_pressure():
    assert radius_from_damping(1e4, 1920.0) == pytest.approx(2 * radius_from_damping(1e4, 960.0), rel=1e-15)


def test_radius_inverts_damping_rate():
    p = ParticleParams(60e-9)
    env = EnvironmentParams.from_mbar(9.6)
    gamma = gas_damping_rate(p, env)
    assert radius_from_damping(gamma, env.pressure) == pytest.approx(60e-9, rel=1e-9)
    assert mass_from_damping(gamma, env.pressure) == pytest.approx(p.mass, rel=1e-9)
    with pytest.raises(DomainError):
        radius_from_damping(0.0, 960.0)


def test_effective_temperature_identity_and_ratio():
    spec = _model_spectrum([(TWO_PI * 41e3, TWO_PI * 300.0, 2e-6)], 1e-12)
    fit = fit_psd_peaks(spec, [41e3])
    assert effective_temperature(fit, fit)[0] == pytest.approx(300.0, rel=1e-12)
    cold = _model_spectrum([(TWO_PI * 41e3, TWO_PI * 300.0, 2e-10)], 1e-16)
    T = effective_temperature(cold, spec, guesses=[41e3])
    assert T[0] == pytest.approx(0.03, rel=1e-3)


def test_effective_temperature_synthetic_feedback():
    omega, gamma = TWO_PI * 141.2e3, TWO_PI * 2e3
    c = 24e6
    rng = np.random.default_rng(9)
    recs = []
    for T in (34.1e-3, 300.0):
        mode = ModeSpec(omega, gamma, T)
        rec = synthesize_trace([mode] * 3, MASS, (0.0, c, 0.0), 1e6, 4.0, rng, noise_floor=1e-30 * c**2)
        recs.append(welch_psd(rec.traces["Y"], 16384))
    T0 = effective_temperature(recs[0], recs[1], guesses=[141e3])
    assert T0[0] == pytest.approx(34.1e-3, rel=0.05)


def test_effective_temperature_unresolvable():
    spec = _model_spectrum([(TWO_PI * 41e3, TWO_PI * 300.0, 2e-6)], 1e-12)
    buried = _model_spectrum([(TWO_PI * 41e3, TWO_PI * 300.0, 1e-16)], 1e-12)
    with pytest.raises(DomainError):
        effective_temperature(buried, spec, guesses=[41e3])


# filters


FS = 2e6
OMEGA = TWO_PI * 141.2e3
GAMMA_F = TWO_PI * 500.0


@pytest.mark.parametrize("kind", ["position", "momentum"])
def test_filter_unit_gain_at_centre(kind):
    f = design_bandpass(OMEGA, GAMMA_F, FS, kind)
    assert abs(f.response(OMEGA)[0]) == pytest.approx(1.0, abs=1e-12)


def test_filter_unit_gain_on_sinusoid():
    t = np.arange(400000) / FS
    x = np.sin(OMEGA * t)
    y = bandpass_estimate(Trace(FS, x), OMEGA, GAMMA_F)
    amp = np.sqrt(2 * np.mean(y[200000:] ** 2))
    assert amp == pytest.approx(1.0, rel=5e-3)


def test_filter_minus_3db_width():
    f = design_bandpass(OMEGA, GAMMA_F, FS)
    from scipy import optimize

    g = lambda w: abs(f.response(w)[0]) ** 2 - 0.5  # noqa: E731
    lo = optimize.brentq(g, OMEGA - 20 * GAMMA_F, OMEGA)
    hi = optimize.brentq(g, OMEGA, OMEGA + 20 * GAMMA_F)
    assert hi - lo == pytest.approx(8 * GAMMA_F, rel=1e-9)


def test_filter_rejection_at_ten_linewidths():
    f = design_bandpass(OMEGA, GAMMA_F, FS)
    for w in (OMEGA - 10 * GAMMA_F, OMEGA + 10 * GAMMA_F):
        # a second-order band with half-width 4 Gamma_f only reaches about 8.7 dB here
        assert -9.0 < 20 * math.log10(abs(f.response(w)[0])) < -8.3


def test_filter_is_linear():
    f = design_bandpass(OMEGA, GAMMA_F, FS)
    rng = np.random.default_rng(10)
    a, b = rng.standard_normal(5000), rng.standard_normal(5000)
    for direction in ("forward", "backward"):
        lhs = f.apply(2.0 * a + b, direction)
        rhs = 2.0 * f.apply(a, direction) + f.apply(b, direction)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10 * np.max(np.abs(lhs)))


def test_filter_validation():
    with pytest.raises(DomainError):
        design_bandpass(OMEGA, OMEGA / 4, FS)
    with pytest.raises(DomainError):
        design_bandpass(OMEGA, GAMMA_F, FS, kind="velocity")
    with pytest.raises(DomainError):
        design_bandpass(OMEGA, GAMMA_F, 1e5)
    with pytest.raises(DomainError):
        design_bandpass(OMEGA, GAMMA_F, FS).apply(np.zeros(4), "sideways")
    with pytest.raises(DomainError):
        bandpass_estimate(Trace(FS, np.zeros(10)), OMEGA, GAMMA_F, kind="momentum")


def test_momentum_estimate_tracks_derivative():
    t = np.arange(400000) / FS
    q = 1e-9 * np.sin(OMEGA * t)
    p_true = MASS * 1e-9 * OMEGA * np.cos(OMEGA * t)
    for direction in ("forward", "backward"):
        p = bandpass_estimate(Trace(FS, q, unit="m"), OMEGA, GAMMA_F, "momentum", direction, MASS)
        mid = slice(150000, 250000)
        np.testing.assert_allclose(p[mid], p_true[mid], atol=0.02 * np.max(p_true))


def test_forward_backward_variance_agree():
    spec = ModeSpec(OMEGA, TWO_PI * 50.0, 300.0)
    q, _ = thermal_mode(spec, MASS, 1e6, 4_000_000, np.random.default_rng(11))
    tr = Trace(1e6, q, unit="m")
    cut = 20000
    vf, sf = variance_with_se(bandpass_estimate(tr, OMEGA, GAMMA_F, direction="forward")[cut:-cut])
    vb, sb = variance_with_se(bandpass_estimate(tr, OMEGA, GAMMA_F, direction="backward")[cut:-cut])
    assert abs(vf - vb) <= 2 * math.hypot(sf, sb)


def test_readout_state_is_transparent_when_linear():
    q = np.array([3e-9, -1e-9])
    p = np.array([0.0, MASS * OMEGA * 2e-9])
    qh, ph = readout_state(q, p, MASS, OMEGA, TWO_PI * 3e3, 20e6, 0.2e-3)
    np.testing.assert_allclose(qh, q, atol=2e-11)
    np.testing.assert_allclose(ph, p, atol=MASS * OMEGA * 2e-11)


def test_readout_state_compresses_large_amplitudes():
    q = np.array([150e-9])
    qh, _ = readout_state(q, np.zeros(1), MASS, OMEGA, TWO_PI * 3e3, 20e6, 0.2e-3, wavelength=1.064e-6)
    assert 0.5 * q[0] < qh[0] < q[0]


def test_variance_with_se_needs_length():
    with pytest.raises(DomainError):
        variance_with_se(np.zeros(10), n_batches=20)


# expansion


def test_expansion_of_initial_state():
    rng = np.random.default_rng(12)
    q, p = rng.standard_normal(200), rng.standard_normal(200)
    q0, p0 = initial_scales(q, p)
    res = ensemble_expansion(q / q0, p / p0)
    assert res.ci_q[0] <= 1.0 <= res.ci_q[1]
    assert res.ci_p[0] <= 1.0 <= res.ci_p[1]


@pytest.mark.parametrize("method", ["chi2", "bootstrap"])
def test_expansion_interval_coverage_on_sheared_state(method):
    # analytic 0.25 ms state: shear Omega tau on unit initial variances
    s = OMEGA * 0.25e-3
    cov = np.array([[1 + s**2, s], [s, 1.0]])
    xi = math.sqrt(np.linalg.eigvalsh(cov)[1])
    rng = np.random.default_rng(13)
    trials = 200
    hits = 0
    for _ in range(trials):
        z = rng.multivariate_normal([0, 0], cov, size=100)
        res = ensemble_expansion(z[:, 0], z[:, 1], method=method, rng=rng, n_boot=500)
        hits += res.ci_q[0] <= xi <= res.ci_q[1]
    assert res.method == method and res.to_dict()["n"] == 100
    # nominal 95.4 %; binomial scatter over 200 trials is about 1.5 %
    assert 0.90 <= hits / trials <= 0.99


def test_expansion_validation():
    with pytest.raises(DomainError):
        ensemble_expansion(np.ones(5), np.ones(5))
    with pytest.raises(DomainError):
        ensemble_expansion(np.ones(20), np.ones(19))
    with pytest.raises(DomainError):
        ensemble_expansion(np.arange(20.0), np.arange(20.0), method="jackknife")


# Duffing


def test_duffing_frequency_examples():
    xi = np.array([-1.72e12, -2.78e12, -0.32e12])
    w0 = TWO_PI * 141.2e3
    assert duffing_frequency(w0, (0, 0, 0), xi, "y") == w0
    w = duffing_frequency(w0, (0, 100e-9**2, 0), xi, "y")
    assert w / w0 - 1 == pytest.approx(-2.085e-2, rel=1e-3)
    assert (w - w0) / TWO_PI == pytest.approx(-2.9e3, rel=0.02)
    wz = duffing_frequency(w0, (1e-14, 0, 0), xi, "z")
    assert wz / w0 - 1 == pytest.approx(0.75 * 2 * xi[0] * 1e-14, rel=1e-12)
    with pytest.raises(DomainError):
        tensor_row(xi, "w")


def _duffing_data(n=400, noise=1e-3, seed=15):
    xi = np.array([-1.72e12, -2.78e12, -0.32e12])
    w0 = TWO_PI * np.array([116e3, 141.2e3, 41e3])
    y = np.linspace(50e-9, 200e-9, n)
    V = np.column_stack([np.full(n, 38e-9**2), y**2, np.full(n, 63e-9**2)])
    F = np.column_stack([duffing_frequency(w0[j], V, xi, j) for j in range(3)])
    F = F * (1 + noise * np.random.default_rng(seed).standard_normal(F.shape))
    return y, F, w0, xi


def test_duffing_fit_round_trip():
    y, F, w0, xi = _duffing_data(noise=1e-5)
    fit = fit_duffing(y, F, w0, 38e-9**2, 63e-9**2)
    np.testing.assert_allclose(fit.xi, xi, rtol=0.05)
    assert fit.status == "ok"
    assert fit.waists[1] == pytest.approx(0.848e-6, rel=2e-3)


def test_duffing_waist_of_fitted_y_coefficient():
    assert math.sqrt(-2 / -2.78e12) == pytest.approx(0.85e-6, rel=0.01)


def test_duffing_needs_amplitude_span():
    y, F, w0, _ = _duffing_data(n=10, noise=0.0)
    with pytest.raises(DomainError):
        fit_duffing(np.full(10, 1e-7), F, w0, 1e-15, 1e-15)
    with pytest.raises(DomainError):
        fit_duffing(y, F[:, 1], w0, 1e-15, 1e-15)
    with pytest.raises(DomainError):
        fit_duffing(y[:3], F[:3], w0, 1e-15, 1e-15)


def test_duffing_hardening_warns():
    y, F, w0, xi = _duffing_data(noise=0.0)
    V = np.column_stack([np.full(y.size, 38e-9**2), y**2, np.full(y.size, 63e-9**2)])
    F = np.column_stack([duffing_frequency(w0[j], V, -xi, j) for j in range(3)])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_duffing(y, F, w0, 38e-9**2, 63e-9**2)
    assert fit.status == "hardening"
    assert any(issubclass(w.category, HardeningWarning) for w in caught)
    assert np.all(np.isnan(fit.waists))
