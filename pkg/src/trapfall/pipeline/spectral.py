"""PSD estimation, damped-oscillator peak fits and equipartition calibration."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, signal

from ..constants import K_B, M_AIR, RHO_SILICA
from ..physics_core import DomainError, epstein_prefactor, mass_from_radius
from .trace import Trace


class FitError(RuntimeError):
    """Peak fit failed; ``diagnostics`` holds the last residual summary."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class Spectrum:
    """One-sided power spectral density.

    ``resolution_bandwidth`` is the equivalent noise bandwidth of the
    window [Hz]; ``n_averages`` the number of (overlapping) segments.
    """

    frequencies: np.ndarray
    psd: np.ndarray
    resolution_bandwidth: float
    n_averages: int
    unit: str = "V"

    @property
    def df(self):
        return self.frequencies[1] - self.frequencies[0]

    def band_power(self, f_lo=None, f_hi=None):
        f = self.frequencies
        sel = np.ones(f.size, dtype=bool)
        if f_lo is not None:
            sel &= f >= f_lo
        if f_hi is not None:
            sel &= f <= f_hi
        return float(np.sum(self.psd[sel]) * self.df)

    def to_csv(self, path, metadata=None):
        data = np.column_stack([self.frequencies, self.psd])
        np.savetxt(path, data, delimiter=",", header=f"frequency_Hz,psd_{self.unit}2_per_Hz", comments="", fmt="%.17g")
        meta = {
            "resolution_bandwidth_Hz": self.resolution_bandwidth,
            "n_averages": self.n_averages,
            "unit": self.unit,
        }
        meta.update(metadata or {})
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def welch_psd(trace: Trace, segment_length, overlap=0.5, window="hann"):
    """Averaged periodogram (Welch), density-normalized so that its integral is the variance.

    Thin wrapper over :func:`scipy.signal.welch` with detrending off.
    """
    n = trace.values.size
    segment_length = int(segment_length)
    if segment_length < 8:
        raise DomainError("segment_length must be >= 8")
    if segment_length > n:
        raise DomainError(f"trace of {n} samples shorter than segment_length {segment_length}")
    if not 0 <= overlap < 1:
        raise DomainError("overlap must lie in [0, 1)")
    noverlap = int(round(overlap * segment_length))
    f, pxx = signal.welch(
        trace.values,
        fs=trace.sample_rate,
        window=window,
        nperseg=segment_length,
        noverlap=noverlap,
        detrend=False,
        scaling="density",
        return_onesided=True,
    )
    w = signal.get_window(window, segment_length)
    enbw = trace.sample_rate * np.sum(w**2) / np.sum(w) ** 2
    step = segment_length - noverlap
    n_avg = 1 + (n - segment_length) // step
    return Spectrum(f, pxx, enbw, n_avg, trace.unit)


# ---------------------------------------------------------------------------
# peak model


def oscillator_lineshape(f, omega, gamma):
    """Unit-area one-sided PSD of a damped oscillator, as a function of f [Hz].

    4 gamma Omega^2 / ((Omega^2 - w^2)^2 + w^2 gamma^2) with w = 2 pi f
    integrates to one over f in [0, inf).
    """
    w = 2.0 * math.pi * np.asarray(f)
    return 4.0 * gamma * omega**2 / ((omega**2 - w**2) ** 2 + w**2 * gamma**2)


@dataclass
class PeakFit:
    """Fitted modes: angular frequency, linewidth, area (signal variance)."""

    omega: np.ndarray
    gamma: np.ndarray
    area: np.ndarray
    floor: float
    covariance: np.ndarray  # over (omega_j, gamma_j, area_j, ..., floor)
    reduced_chi2: float
    iterations: int

    @property
    def omega_err(self):
        return np.sqrt(np.diag(self.covariance)[0:-1:3])

    @property
    def gamma_err(self):
        return np.sqrt(np.diag(self.covariance)[1:-1:3])

    @property
    def area_err(self):
        return np.sqrt(np.diag(self.covariance)[2:-1:3])

    def model(self, f):
        out = np.full(np.shape(f), self.floor, dtype=float)
        for om, ga, ar in zip(self.omega, self.gamma, self.area):
            out = out + ar * oscillator_lineshape(f, om, ga)
        return out


def _unpack(theta, n):
    # log-parameters keep omega, gamma, area and floor positive
    v = np.exp(theta)
    return v[0 : 3 * n : 3], v[1 : 3 * n : 3], v[2 : 3 * n : 3], v[-1]


def _model_and_jac(theta, f, n):
    # trial steps of the solver may overflow; the resulting non-finite
    # residuals are rejected by it, so the warnings carry no information
    with np.errstate(over="ignore", invalid="ignore"):
        return _model_and_jac_raw(theta, f, n)


def _model_and_jac_raw(theta, f, n):
    om, ga, ar, floor = _unpack(theta, n)
    w2 = (2.0 * math.pi * f) ** 2
    total = np.full(f.size, floor)
    J = np.empty((f.size, theta.size))
    for j in range(n):
        D = (om[j] ** 2 - w2) ** 2 + w2 * ga[j] ** 2
        L = 4.0 * ga[j] * om[j] ** 2 / D
        total += ar[j] * L
        # d/d(log x) = x d/dx
        dL_dom = 8.0 * ga[j] * om[j] / D - L / D * 4.0 * om[j] * (om[j] ** 2 - w2)
        dL_dga = 4.0 * om[j] ** 2 / D - L / D * 2.0 * w2 * ga[j]
        J[:, 3 * j] = ar[j] * dL_dom * om[j]
        J[:, 3 * j + 1] = ar[j] * dL_dga * ga[j]
        J[:, 3 * j + 2] = ar[j] * L
    J[:, -1] = floor
    return total, J


def _initial_guess(spec: Spectrum, f_guess, band):
    f, S = spec.frequencies, spec.psd
    sel = (f >= 0.8 * f_guess) & (f <= 1.2 * f_guess)
    if not np.any(sel):
        raise DomainError(f"no spectral bins near {f_guess:g} Hz")
    idx = np.nonzero(sel)[0]
    k = idx[np.argmax(S[idx])]
    peak = S[k]
    base = np.median(S[band])
    half = base + 0.5 * (peak - base)
    lo = k
    while lo > 0 and S[lo] > half:
        lo -= 1
    hi = k
    while hi < S.size - 1 and S[hi] > half:
        hi += 1
    width_hz = max(f[hi] - f[lo], 2.0 * spec.df)
    gamma = 2.0 * math.pi * width_hz
    omega = 2.0 * math.pi * f[k]
    area = max(peak - base, peak * 1e-3) * gamma / 4.0
    return omega, gamma, area


def fit_psd_peaks(spectrum: Spectrum, guesses, band=None, max_iter=200, xtol=1e-8, irls_rounds=20):
    """Joint fit of damped-oscillator peaks plus a flat floor.

    Weighted least squares with weights 1/model, re-evaluated from the
    previous iterate (iteratively reweighted), which approximates the
    chi-square statistics of an averaged periodogram. Each inner solve is
    a Levenberg-Marquardt run with the analytic Jacobian
    (:func:`scipy.optimize.least_squares`).

    Parameters
    ----------
    guesses : sequence of float
        Approximate mode frequencies [Hz], within +-20 % of the peaks.
    band : (float, float), optional
        Frequency range [Hz] to fit; defaults to 0.5x the lowest to 1.5x
        the highest guess.
    """
    guesses = sorted(float(g) for g in guesses)
    if not guesses:
        raise DomainError("need at least one peak guess")
    if band is None:
        band = (0.5 * guesses[0], 1.5 * guesses[-1])
    f_all = spectrum.frequencies
    sel = (f_all >= band[0]) & (f_all <= band[1]) & (f_all > 0)
    if np.count_nonzero(sel) < 3 * len(guesses) + 4:
        raise DomainError("too few spectral bins in the fit band")
    f = f_all[sel]
    S = spectrum.psd[sel]
    n = len(guesses)

    theta = []
    for g in guesses:
        theta.extend(np.log(_initial_guess(spectrum, g, sel)))
    floor0 = max(np.min(S), 1e-300)
    theta = np.array(theta + [math.log(floor0)])

    weights = 1.0 / S
    total_nfev = 0
    res = None
    for _ in range(irls_rounds):
        w = weights

        def fun(t):
            return (_model_and_jac(t, f, n)[0] - S) * w

        def jac(t):
            return _model_and_jac(t, f, n)[1] * w[:, None]

        res = optimize.least_squares(fun, theta, jac=jac, method="lm", xtol=xtol, ftol=1e-12, max_nfev=max_iter)
        total_nfev += res.nfev
        if res.status <= 0:
            raise FitError(
                "peak fit did not converge",
                {"message": res.message, "cost": float(res.cost), "nfev": total_nfev},
            )
        step = np.max(np.abs(res.x - theta))
        theta = res.x
        weights = 1.0 / _model_and_jac(theta, f, n)[0]
        if step < xtol:
            break
    else:
        raise FitError(
            "reweighting did not settle",
            {"last_step": float(step), "cost": float(res.cost), "nfev": total_nfev},
        )

    model, J = _model_and_jac(theta, f, n)
    r = (S - model) / model
    dof = max(f.size - theta.size, 1)
    chi2 = float(r @ r) / dof
    Jw = J / model[:, None]
    cov_log = np.linalg.pinv(Jw.T @ Jw) * chi2
    vals = np.exp(theta)
    cov = cov_log * np.outer(vals, vals)
    om, ga, ar, floor = _unpack(theta, n)
    return PeakFit(om, ga, ar, float(floor), cov, chi2, total_nfev)


# ---------------------------------------------------------------------------
# calibration and inference


def calibrate(peakfit_or_area, mass, omega=None, gas_temperature=300.0):
    """Volts-per-metre factors c_j with s = c q, from equipartition.

    c_j^2 = <s_j^2> m Omega_j^2 / (k_B T), where <s_j^2> is the peak area.
    Accepts a PeakFit or explicit (area, omega) arrays.
    """
    if isinstance(peakfit_or_area, PeakFit):
        area, omega = peakfit_or_area.area, peakfit_or_area.omega
    else:
        area = np.asarray(peakfit_or_area, dtype=float)
        omega = np.asarray(omega, dtype=float)
    mass = np.asarray(mass, dtype=float)
    return np.sqrt(area * mass * omega**2 / (K_B * gas_temperature))


def volts_to_metres(c):
    """Inverse convention: q = s / c, i.e. the factor multiplying volts."""
    return 1.0 / np.asarray(c, dtype=float)


def metres_to_volts(c_inverse):
    return 1.0 / np.asarray(c_inverse, dtype=float)


def radius_from_damping(gamma, pressure, gas_temperature=300.0, molar_mass=M_AIR, density=RHO_SILICA):
    """Particle radius [m] from the Epstein damping rate gamma [rad/s] at pressure [Pa]."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise DomainError("gamma must be > 0")
    R = epstein_prefactor(density, gas_temperature, molar_mass) * pressure / gamma
    return float(R) if R.ndim == 0 else R


def mass_from_damping(gamma, pressure, gas_temperature=300.0, molar_mass=M_AIR, density=RHO_SILICA):
    R = radius_from_damping(gamma, pressure, gas_temperature, molar_mass, density)
    return np.vectorize(lambda r: mass_from_radius(r, density))(R)


def effective_temperature(feedback, reference, gas_temperature=300.0, guesses=None, min_snr=3.0):
    """Mode temperatures T0 = T_gas * area_feedback / area_reference.

    ``feedback`` and ``reference`` are PeakFit results or Spectrum objects
    (then fitted at ``guesses``). A peak whose height does not exceed the
    floor by ``min_snr`` is unresolvable.
    """
    fits = []
    for item in (feedback, reference):
        if isinstance(item, Spectrum):
            if guesses is None:
                raise DomainError("guesses needed to fit spectra")
            item = fit_psd_peaks(item, guesses)
        heights = 4.0 * item.area / item.gamma
        if np.any(heights < min_snr * item.floor):
            raise DomainError("peak not resolvable above the noise floor")
        fits.append(item)
    return gas_temperature * fits[0].area / fits[1].area
