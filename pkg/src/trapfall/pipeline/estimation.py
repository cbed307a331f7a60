"""Bandpass state estimation and ensemble expansion factors.

The position filter is the second-order bandpass
H_q(s) = g_q s / (s^2 + 8 Gamma_f s + Omega^2) and the momentum filter
H_p(s) = g_p / (s^2 + 8 Gamma_f s + Omega^2), the low-efficiency limit of a
Kalman filter. Both are discretized with the bilinear transform, warped so
the centre lands on Omega and the -3 dB width on 8 Gamma_f.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal, stats

from ..physics_core import DomainError
from .trace import Trace

TWO_SIGMA = 0.9544997361036416


@dataclass(frozen=True)
class BandpassFilter:
    """Discrete filter coefficients (b, a) with unit gain at the centre."""

    b: np.ndarray
    a: np.ndarray
    omega: float
    bandwidth: float  # -3 dB full width [rad/s]
    fs: float
    kind: str

    def response(self, omega):
        _, h = signal.freqz(self.b, self.a, worN=np.atleast_1d(omega) / self.fs)
        return h

    def apply(self, x, direction="forward"):
        """Filter along the last axis; ``backward`` runs on the time-reversed signal."""
        x = np.asarray(x, dtype=float)
        if direction == "forward":
            return signal.lfilter(self.b, self.a, x, axis=-1)
        if direction == "backward":
            return signal.lfilter(self.b, self.a, x[..., ::-1], axis=-1)[..., ::-1]
        raise DomainError("direction must be 'forward' or 'backward'")


def design_bandpass(omega, Gamma_f, fs, kind="position"):
    """Bilinear discretization of the estimation filter.

    The analog prototype has poles at s = -4 Gamma_f +- i sqrt(Omega^2 - 16 Gamma_f^2).
    The bilinear constant is chosen so Omega maps onto itself, and the
    analog width is pre-distorted so the digital -3 dB band edges are
    exactly 8 Gamma_f apart.
    """
    if kind not in ("position", "momentum"):
        raise DomainError("kind must be 'position' or 'momentum'")
    if not 0 < Gamma_f < omega / 4.0:
        raise DomainError("need 0 < Gamma_f < Omega / 4 for underdamped poles")
    if omega >= math.pi * fs:
        raise DomainError("centre frequency above the Nyquist frequency")
    T = 1.0 / fs
    width = 8.0 * Gamma_f
    tc = math.tan(0.5 * omega * T)
    K = omega / tc
    half = 0.5 * width * T
    if half >= 0.5 * math.pi:
        raise DomainError("filter band wider than the sampling allows")
    # digital edges w1, w2 with w2 - w1 = width obey tan(w1 T/2) tan(w2 T/2) = tc^2
    width_a = K * math.tan(half) * (1.0 + tc**2)
    a = np.array([K**2 + width_a * K + omega**2, 2.0 * (omega**2 - K**2), K**2 - width_a * K + omega**2])
    if kind == "position":
        b = K * np.array([1.0, 0.0, -1.0])
    else:
        b = np.array([1.0, 2.0, 1.0])
    b, a = b / a[0], a / a[0]
    _, h = signal.freqz(b, a, worN=[omega / (2.0 * math.pi)], fs=fs)
    b = b / abs(h[0])
    return BandpassFilter(b, a, omega, width, fs, kind)


def bandpass_estimate(trace: Trace, omega_center, Gamma_f, kind="position", direction="forward", mass=None):
    """Filtered position or momentum estimate of one mode.

    ``backward`` runs the same filter on the time-reversed trace and
    reverses the result, so it describes the state at the *end* of the
    segment. The momentum output is mass * Omega * (filter output) with the
    sign that makes it equal m dq/dt at resonance for either direction.
    """
    filt = design_bandpass(omega_center, Gamma_f, trace.sample_rate, kind)
    y = filt.apply(trace.values, direction)
    if kind == "position":
        return y
    if mass is None:
        raise DomainError("mass needed to scale the momentum estimate")
    # H_p(i Omega) = -i: output lags by 90 deg, i.e. -(1/Omega) dq/dt forward;
    # time reversal flips the sign of the derivative
    sign = -1.0 if direction == "forward" else 1.0
    return sign * mass * omega_center * y


def readout_state(q, p, mass, omega, Gamma_f, fs, duration, wavelength=None):
    """State at recapture as seen through the detector and the backward filter.

    Each sample (q, p) starts a free harmonic oscillation in the recapture
    trap. The displacement is passed through the (optionally sinusoidal)
    readout, then position and momentum are estimated with the backward
    bandpass filters and read off at t = 0. With ``wavelength`` None this
    returns (q, p) up to filter leakage; with a finite wavelength large
    amplitudes are compressed.
    """
    q = np.atleast_1d(np.asarray(q, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    t = np.arange(int(round(duration * fs))) / fs
    y = q[:, None] * np.cos(omega * t) + (p / (mass * omega))[:, None] * np.sin(omega * t)
    if wavelength is not None:
        k = 2.0 * math.pi / wavelength
        y = np.sin(k * y) / k
    pos = design_bandpass(omega, Gamma_f, fs, "position").apply(y, "backward")
    mom = design_bandpass(omega, Gamma_f, fs, "momentum").apply(y, "backward")
    return pos[:, 0], mass * omega * mom[:, 0]


def variance_with_se(x, n_batches=20):
    """Sample variance and a batch-means standard error (tolerates correlation)."""
    x = np.asarray(x, dtype=float)
    n = x.size // n_batches
    if n < 2:
        raise DomainError("series too short for batch means")
    x = x[: n * n_batches]
    mu = x.mean()
    v = np.mean((x.reshape(n_batches, n) - mu) ** 2, axis=1)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(n_batches))


# ---------------------------------------------------------------------------
# expansion


@dataclass
class ExpansionResult:
    """Principal expansion factors of a normalized phase-space ensemble.

    ``ci_q`` and ``ci_p`` are (low, high) at ``level``; ``method`` records
    how they were obtained.
    """

    xi_q: float
    xi_p: float
    covariance: np.ndarray
    ci_q: tuple
    ci_p: tuple
    n: int
    level: float
    method: str

    def to_dict(self):
        return {
            "xi_q": self.xi_q,
            "xi_p": self.xi_p,
            "covariance": self.covariance.tolist(),
            "ci_q": list(self.ci_q),
            "ci_p": list(self.ci_p),
            "n": self.n,
            "level": self.level,
            "ci_method": self.method,
        }


def initial_scales(q_window, p_window):
    """rms (q0, p0) of the pre-fall window used to normalize recapture samples."""
    q = np.asarray(q_window, dtype=float)
    p = np.asarray(p_window, dtype=float)
    return float(np.sqrt(np.mean((q - q.mean()) ** 2))), float(np.sqrt(np.mean((p - p.mean()) ** 2)))


def _eig2(c):
    lam = np.linalg.eigvalsh(c)
    return lam[1], lam[0]


def ensemble_expansion(q_tilde, p_tilde, level=TWO_SIGMA, method="chi2", rng=None, n_boot=2000):
    """(xi_q, xi_p) from recapture samples already normalized by (q0, p0).

    ``chi2`` intervals treat each eigenvalue as a variance with n - 1
    degrees of freedom; ``bootstrap`` resamples the pairs (percentile
    intervals).
    """
    q = np.asarray(q_tilde, dtype=float)
    p = np.asarray(p_tilde, dtype=float)
    n = q.size
    if n < 10:
        raise DomainError("need at least 10 samples")
    if p.size != n:
        raise DomainError("q and p sample counts differ")
    cov = np.cov(q, p)
    hi, lo = _eig2(cov)
    alpha = 1.0 - level
    if method == "chi2":
        dof = n - 1
        c_lo, c_hi = stats.chi2.ppf([1 - alpha / 2, alpha / 2], dof)
        ci_q = (math.sqrt(dof * hi / c_lo), math.sqrt(dof * hi / c_hi))
        ci_p = (math.sqrt(dof * max(lo, 0) / c_lo), math.sqrt(dof * max(lo, 0) / c_hi))
    elif method == "bootstrap":
        if rng is None:
            raise DomainError("bootstrap needs an rng")
        idx = rng.integers(0, n, size=(n_boot, n))
        qs, ps = q[idx], p[idx]
        qm, pm = qs.mean(axis=1, keepdims=True), ps.mean(axis=1, keepdims=True)
        a = np.sum((qs - qm) ** 2, axis=1) / (n - 1)
        c = np.sum((ps - pm) ** 2, axis=1) / (n - 1)
        b = np.sum((qs - qm) * (ps - pm), axis=1) / (n - 1)
        disc = np.hypot(0.5 * (a - c), b)
        big = 0.5 * (a + c) + disc
        small = np.clip(0.5 * (a + c) - disc, 0, None)
        pct = [100 * alpha / 2, 100 * (1 - alpha / 2)]
        ci_q = tuple(np.sqrt(np.percentile(big, pct)))
        ci_p = tuple(np.sqrt(np.percentile(small, pct)))
    else:
        raise DomainError("method must be 'chi2' or 'bootstrap'")
    return ExpansionResult(
        math.sqrt(hi), math.sqrt(max(lo, 0.0)), cov, tuple(map(float, ci_q)), tuple(map(float, ci_p)), n, level, method
    )
