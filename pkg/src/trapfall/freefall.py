"""Closed-form Gaussian-state evolution during free fall.

The linear Langevin model dq = p/m dt, dp = (-m g_j - gamma p) dt + dW with
<dW dW> = 2 m k_B T gamma dt is solved exactly (all orders in gamma t).
Every (1 - exp(-x))/x-type factor is evaluated through its Taylor series
for small x, because the closed forms lose all precision at the
gamma*tau ~ 1e-6 values met at high vacuum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import G_DEFAULT, HBAR, K_B
from .physics_core import DomainError, GaussianState1D

AXES = ("x", "y", "z")

# Below this gamma*t every damping factor uses its Taylor series; 40 terms
# are then exact to double precision (0.5**40 / 40! ~ 1e-60).
_SERIES_MAX_X = 0.5
_SERIES_TERMS = 40


def _series(x, coeff, kmin):
    """sum_{k >= kmin} coeff(k) x^(k - kmin)."""
    total = 0.0
    power = 1.0
    for k in range(kmin, kmin + _SERIES_TERMS):
        total += coeff(k) * power
        power *= x
    return total


def _f_drift(x):
    """(1 - e^-x) / x."""
    if x < _SERIES_MAX_X:
        return _series(x, lambda k: -((-1.0) ** k) / math.factorial(k), 1)
    return -math.expm1(-x) / x


def _f_mean(x):
    """(x - 1 + e^-x) / x^2, the gravitational displacement factor."""
    if x < _SERIES_MAX_X:
        return _series(x, lambda k: (-1.0) ** k / math.factorial(k), 2)
    return (x + math.expm1(-x)) / x**2


def _f_qq(x):
    """[x - 2(1 - e^-x) + (1 - e^-2x)/2] / x^3."""
    if x < _SERIES_MAX_X:
        return _series(x, lambda k: (-1.0) ** k * (2.0 - 2.0 ** (k - 1)) / math.factorial(k), 3)
    return (x + 2.0 * math.expm1(-x) - 0.5 * math.expm1(-2.0 * x)) / x**3


def _f_qp(x):
    """[(1 - e^-x) - (1 - e^-2x)/2] / x^2."""
    if x < _SERIES_MAX_X:
        return _series(x, lambda k: (-1.0) ** k * (2.0 ** (k - 1) - 1.0) / math.factorial(k), 2)
    return (-math.expm1(-x) + 0.5 * math.expm1(-2.0 * x)) / x**2


def _f_pp(x):
    """(1 - e^-2x) / (2x)."""
    if x < _SERIES_MAX_X:
        return _series(x, lambda k: -((-2.0) ** k) / (2.0 * math.factorial(k)), 1)
    return -math.expm1(-2.0 * x) / (2.0 * x)


def _check_time(t):
    if t < 0:
        raise DomainError(f"time must be >= 0, got {t!r}")


def transition_matrix(t, mass, gamma):
    """Propagator exp(A t) of the free drift, A = [[0, 1/m], [0, -gamma]]."""
    _check_time(t)
    if mass <= 0 or gamma < 0:
        raise DomainError("need mass > 0 and gamma >= 0")
    x = gamma * t
    return np.array([[1.0, t / mass * _f_drift(x)], [0.0, math.exp(-x)]])


def propagate_mean(state: GaussianState1D, t, axis, mass, gamma, g=G_DEFAULT):
    """Mean (q, p) after free evolution for ``t``.

    Gravity acts on ``axis == "y"`` only, pointing to negative y.
    """
    if axis not in AXES:
        raise DomainError(f"axis must be one of {AXES}")
    phi = transition_matrix(t, mass, gamma)
    q, p = phi @ state.mean
    if axis == "y":
        x = gamma * t
        q -= g * t**2 * _f_mean(x)
        p -= g * mass * t * _f_drift(x)
    return float(q), float(p)


def noise_covariance(t, mass, gamma, gas_temperature):
    """Integral of Phi(s) W Phi(s)^T over [0, t] with W = diag(0, 2 m k_B T gamma)."""
    _check_time(t)
    D = 2.0 * mass * K_B * gas_temperature * gamma
    x = gamma * t
    vqq = D * t**3 / mass**2 * _f_qq(x)
    vqp = D * t**2 / mass * _f_qp(x)
    vpp = D * t * _f_pp(x)
    return np.array([[vqq, vqp], [vqp, vpp]])


def propagate_covariance(state: GaussianState1D, t, mass, gamma, gas_temperature):
    """Covariance after free evolution; means are carried by the homogeneous drift only.

    Use :func:`propagate` for the full state including gravity.
    """
    if state.determinant < -1e-12 * state.var_q * state.var_p:
        raise DomainError("input covariance is not positive semidefinite")
    phi = transition_matrix(t, mass, gamma)
    cov = phi @ state.covariance @ phi.T + noise_covariance(t, mass, gamma, gas_temperature)
    mean = phi @ state.mean
    return GaussianState1D.from_arrays(mean, 0.5 * (cov + cov.T))


def propagate(state: GaussianState1D, t, axis, mass, gamma, gas_temperature, g=G_DEFAULT):
    """Full Gaussian state (mean including gravity, exact covariance) at time ``t``."""
    cov_state = propagate_covariance(state, t, mass, gamma, gas_temperature)
    q, p = propagate_mean(state, t, axis, mass, gamma, g)
    return GaussianState1D(q, p, cov_state.var_q, cov_state.var_p, cov_state.cov_qp)


@dataclass(frozen=True)
class DecoherenceRates:
    """Gas damping and the derived heating rates of one mode.

    ``Gamma_dec`` is gamma (n_th + 1/2) = gamma k_B T_env / (hbar Omega);
    ``Gamma_reheat`` is gamma T_env / T0, the same rate normalized to the
    initial occupation.
    """

    gamma: float
    Gamma_dec: float
    Gamma_reheat: float


def decoherence_rates(gamma, omega, env_temperature, T0):
    if omega <= 0 or T0 <= 0 or env_temperature <= 0:
        raise DomainError("omega, T0 and env_temperature must be > 0")
    return DecoherenceRates(
        gamma=gamma,
        Gamma_dec=gamma * K_B * env_temperature / (HBAR * omega),
        Gamma_reheat=gamma * env_temperature / T0,
    )


def first_order_covariance(var_q0, var_p0, V0, Gamma_dec, omega, t):
    """Covariance entries to first order in the reheating (gamma t << 1).

    Returns (V_q, V_p, C_qp). ``V0`` is n0 + 1/2 and ``Gamma_dec`` the
    decoherence rate gamma (n_th + 1/2).
    """
    r = Gamma_dec * t / V0
    vq = var_q0 * (1.0 + omega**2 * t**2 * (1.0 + 2.0 / 3.0 * r))
    vp = var_p0 * (1.0 + 2.0 * r)
    cqp = math.sqrt(var_q0 * var_p0) * (1.0 + r) * omega * t
    return vq, vp, cqp


def expansion_q(tau, omega, Gamma_reheat):
    """State expansion sqrt(1 + Omega^2 tau^2 + (2/3) Gamma Omega^2 tau^3)."""
    _check_time(tau)
    return math.sqrt(1.0 + omega**2 * tau**2 + 2.0 / 3.0 * Gamma_reheat * omega**2 * tau**3)


def sym2_eigenvalues(a, b, c):
    """Eigenvalues (larger, smaller) of [[a, b], [b, c]] from trace and determinant."""
    half_tr = 0.5 * (a + c)
    disc = math.hypot(0.5 * (a - c), b)
    if disc == 0.0:
        return half_tr, half_tr
    hi = half_tr + disc
    # smaller root via det / hi avoids cancellation for elongated ellipses
    det = a * c - b * b
    lo = det / hi if hi > 0 else half_tr - disc
    return hi, min(lo, hi)


def expansion_factors(state0: GaussianState1D, state_t: GaussianState1D):
    """(xi_q, xi_p): principal standard deviations of ``state_t`` in units of (q0, p0).

    q0 and p0 are the rms values of the (uncorrelated) initial state.
    """
    if state0.var_q <= 0 or state0.var_p <= 0:
        raise DomainError("initial variances must be > 0 to normalize")
    a = state_t.var_q / state0.var_q
    c = state_t.var_p / state0.var_p
    b = state_t.cov_qp / math.sqrt(state0.var_q * state0.var_p)
    hi, lo = sym2_eigenvalues(a, b, c)
    return math.sqrt(hi), math.sqrt(max(lo, 0.0))


def purity(V0, Gamma_dec, omega, t):
    """Purity of an initially thermal state after gas-limited free evolution.

    First order in gamma t; ``V0`` = n0 + 1/2.
    """
    if V0 < 0.5:
        raise DomainError("V0 = n0 + 1/2 must be >= 1/2")
    _check_time(t)
    G = Gamma_dec
    arg = 4.0 * V0 * (V0 + 2.0 * G * t) + 4.0 / 3.0 * (2.0 * V0 + G * t) * G * omega**2 * t**3
    return 1.0 / math.sqrt(arg)


def purity_from_covariance(var_q, var_p, cov_qp):
    """hbar / (2 sqrt(det Sigma)); exact for any Gaussian state."""
    det = var_q * var_p - cov_qp**2
    if det <= 0:
        raise DomainError("covariance determinant must be > 0")
    return HBAR / (2.0 * math.sqrt(det))


def coherence_length(purity_value, sigma_q):
    """Spatial coherence length sqrt(8) * P * sigma_q."""
    if not 0 < purity_value <= 1:
        raise DomainError("purity must lie in (0, 1]")
    if sigma_q <= 0:
        raise DomainError("sigma_q must be > 0")
    return math.sqrt(8.0) * purity_value * sigma_q
