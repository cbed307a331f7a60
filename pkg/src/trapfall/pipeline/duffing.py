"""Amplitude-dependent trap frequencies of a Gaussian tweezer (Duffing tensor)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ..physics_core import DomainError

AXES = ("x", "y", "z")


class HardeningWarning(UserWarning):
    """A fitted coefficient came out positive (stiffening), unexpected for a Gaussian trap."""


def tensor_row(xi, axis):
    """Row ``axis`` of the Duffing tensor built from (xi_x, xi_y, xi_z).

    Rows x and y are (xi_x, xi_y, xi_z); row z is (2 xi_x, 2 xi_y, xi_z).
    """
    xi_x, xi_y, xi_z = xi
    if axis in ("x", "y", 0, 1):
        return np.array([xi_x, xi_y, xi_z])
    if axis in ("z", 2):
        return np.array([2.0 * xi_x, 2.0 * xi_y, xi_z])
    raise DomainError(f"axis must be one of {AXES}")


def duffing_frequency(omega0, variances, xi, axis):
    """Omega_j = Omega_0j (1 + 3/4 sum_i xi_ji <q_i^2>)."""
    row = tensor_row(xi, axis)
    v = np.asarray(variances, dtype=float)
    return omega0 * (1.0 + 0.75 * (v @ row if v.ndim > 1 else float(row @ v)))


@dataclass
class DuffingTensor:
    """Fitted (xi_x, xi_y, xi_z) [1/m^2] with standard errors.

    ``status`` is "ok" or "hardening" when any coefficient is positive.
    """

    xi: np.ndarray
    xi_err: np.ndarray
    covariance: np.ndarray
    status: str = "ok"

    @property
    def waists(self):
        """w_j = sqrt(-2 / xi_j); NaN for non-negative coefficients."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.xi < 0, np.sqrt(-2.0 / self.xi), np.nan)

    @property
    def waist_errors(self):
        w = self.waists
        return 0.5 * w * self.xi_err / np.abs(self.xi)

    def to_dict(self):
        return {
            "xi_per_m2": self.xi.tolist(),
            "xi_err_per_m2": self.xi_err.tolist(),
            "waists_m": self.waists.tolist(),
            "waist_errors_m": self.waist_errors.tolist(),
            "status": self.status,
        }


def fit_duffing(y_rms, frequencies, omega0, var_x, var_z, min_span=2.0):
    """Least-squares Duffing tensor from frequencies measured at several y amplitudes.

    Parameters
    ----------
    y_rms : array_like, shape (N,)
        rms y amplitude of each point [m].
    frequencies : array_like, shape (N, 3)
        Measured (Omega_x, Omega_y, Omega_z) at each point [rad/s].
    omega0 : sequence of three float
        Zero-amplitude frequencies (e.g. from the cooled initialization
        phase).
    var_x, var_z : float
        Fixed <q_x^2>, <q_z^2> [m^2].

    Notes
    -----
    With <q_x^2>, <q_z^2> fixed, the y mode alone only constrains xi_y and
    the combination xi_x <q_x^2> + xi_z <q_z^2>. The z row weights xi_x
    twice, which separates the two, so all three modes are required.
    The model is linear in xi once Omega_0 is known; the weighted normal
    equations are then the exact least-squares solution.
    """
    y = np.asarray(y_rms, dtype=float)
    F = np.asarray(frequencies, dtype=float)
    if F.ndim != 2 or F.shape[1] != 3:
        raise DomainError(
            "frequencies must have shape (N, 3): the y mode alone cannot separate xi_x from xi_z"
        )
    if y.size != F.shape[0]:
        raise DomainError("y_rms and frequencies differ in length")
    if y.size < 4:
        raise DomainError("need at least 4 points")
    if np.min(y) <= 0 or np.max(y) / np.min(y) < min_span:
        raise DomainError(f"amplitude range must span a factor >= {min_span:g}")
    w0 = np.asarray(omega0, dtype=float)
    n = y.size
    # relative shifts r_j = (Omega_j / Omega_0j - 1) / (3/4) are linear in xi
    rows, rhs = [], []
    for j in range(3):
        V = np.column_stack([np.full(n, var_x), y**2, np.full(n, var_z)])
        if j == 2:
            V = V * np.array([2.0, 2.0, 1.0])
        rows.append(V)
        rhs.append((F[:, j] / w0[j] - 1.0) / 0.75)
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    # equal relative frequency noise on all points -> unit weights here
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    resid = b - A @ coef
    dof = max(b.size - 3, 1)
    s2 = float(resid @ resid) / dof
    cov = np.linalg.inv(A.T @ A) * s2
    status = "ok"
    if np.any(coef > 0):
        status = "hardening"
        warnings.warn("fitted Duffing coefficient is positive (hardening)", HardeningWarning)
    return DuffingTensor(coef, np.sqrt(np.diag(cov)), cov, status)
