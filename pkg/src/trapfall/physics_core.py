"""Domain types and the small physical relations shared by every module.

Everything here is an immutable value. Lengths are in m, rates in rad/s,
pressures in Pa (use ``EnvironmentParams.from_mbar`` for mbar input).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .constants import (
    EPS_SILICA,
    EPSTEIN_FACTOR,
    G_DEFAULT,
    HBAR,
    K_B,
    M_AIR,
    N_A,
    RHO_SILICA,
    mbar_to_pa,
)


class DomainError(ValueError):
    """Raised when an input lies outside the domain of a physical relation."""


def _require_positive(**kwargs):
    for name, value in kwargs.items():
        if not value > 0:
            raise DomainError(f"{name} must be > 0, got {value!r}")


def mass_from_radius(radius, density=RHO_SILICA):
    """Mass of a homogeneous sphere, (4/3) pi R^3 rho."""
    _require_positive(radius=radius, density=density)
    return 4.0 / 3.0 * math.pi * radius**3 * density


def radius_from_mass(mass, density=RHO_SILICA):
    _require_positive(mass=mass, density=density)
    return (3.0 * mass / (4.0 * math.pi * density)) ** (1.0 / 3.0)


def epstein_prefactor(density, gas_temperature, molar_mass):
    """Return k such that gamma = k * P_gas / R in the free-molecular regime."""
    _require_positive(
        density=density, gas_temperature=gas_temperature, molar_mass=molar_mass
    )
    return (
        EPSTEIN_FACTOR
        * 9.0
        / (math.sqrt(2.0 * math.pi) * density)
        * math.sqrt(molar_mass / (N_A * K_B * gas_temperature))
    )


@dataclass(frozen=True)
class ParticleParams:
    """Dielectric sphere. ``mass`` is derived from radius and density."""

    radius: float
    density: float = RHO_SILICA
    permittivity_rel: float = EPS_SILICA
    mass: float = field(init=False)

    def __post_init__(self):
        _require_positive(radius=self.radius, density=self.density)
        if self.permittivity_rel <= 1.0:
            raise DomainError("permittivity_rel must exceed 1 for a trappable dielectric")
        object.__setattr__(self, "mass", mass_from_radius(self.radius, self.density))

    @classmethod
    def from_mass(cls, mass, density=RHO_SILICA, permittivity_rel=EPS_SILICA):
        return cls(radius_from_mass(mass, density), density, permittivity_rel)

    @property
    def polarizability_factor(self):
        """Clausius-Mossotti factor (eps - 1)/(eps + 2)."""
        eps = self.permittivity_rel
        return (eps - 1.0) / (eps + 2.0)


@dataclass(frozen=True)
class EnvironmentParams:
    """Background gas.

    ``damping_gamma`` may be given explicitly (a measured linewidth); when it
    is ``None`` it is computed from the particle via :func:`gas_damping_rate`.
    """

    pressure: float  # [Pa]
    gas_temperature: float = 300.0
    molar_mass: float = M_AIR
    damping_gamma: float | None = None
    g: float = G_DEFAULT

    def __post_init__(self):
        if self.pressure < 0:
            raise DomainError("pressure must be >= 0")
        _require_positive(gas_temperature=self.gas_temperature, molar_mass=self.molar_mass)
        if self.damping_gamma is not None and self.damping_gamma < 0:
            raise DomainError("damping_gamma must be >= 0")

    @classmethod
    def from_mbar(cls, pressure_mbar, **kwargs):
        return cls(pressure=mbar_to_pa(pressure_mbar), **kwargs)

    def gamma(self, particle: ParticleParams | None = None):
        if self.damping_gamma is not None:
            return self.damping_gamma
        if particle is None:
            raise DomainError("damping_gamma not set and no particle given to derive it")
        return gas_damping_rate(particle, self)

    def at_pressure(self, pressure):
        """Same gas at another pressure; an explicit damping rate is rescaled linearly."""
        gamma = self.damping_gamma
        if gamma is not None:
            if self.pressure == 0:
                raise DomainError("cannot rescale a damping rate measured at zero pressure")
            gamma = gamma * pressure / self.pressure
        return replace(self, pressure=pressure, damping_gamma=gamma)


@dataclass(frozen=True)
class TrapParams:
    """Gaussian-beam tweezer.

    ``frequencies`` are the measured angular frequencies (x, y, z). The
    trap depth is either given (``depth_U0``) or obtained from the particle
    with :func:`trapfall.energetics.trap_depth`.
    """

    waist_x: float
    waist_y: float
    rayleigh_z: float
    power: float
    frequencies: tuple[float, float, float]
    depth_U0: float | None = None

    def __post_init__(self):
        _require_positive(
            waist_x=self.waist_x, waist_y=self.waist_y, rayleigh_z=self.rayleigh_z
        )
        if self.power < 0:
            raise DomainError("power must be >= 0")
        if len(self.frequencies) != 3 or any(w <= 0 for w in self.frequencies):
            raise DomainError("frequencies must be three positive angular frequencies")
        object.__setattr__(self, "frequencies", tuple(float(w) for w in self.frequencies))
        if self.depth_U0 is not None and self.depth_U0 < 0:
            raise DomainError("depth_U0 must be >= 0")

    @property
    def waists(self):
        return (self.waist_x, self.waist_y, self.rayleigh_z)

    def depth(self, particle: ParticleParams | None = None):
        if self.depth_U0 is not None:
            return self.depth_U0
        if particle is None:
            raise DomainError("depth_U0 not set and no particle given to derive it")
        from .energetics import trap_depth

        return trap_depth(particle, self)

    def with_depth(self, depth_U0):
        return replace(self, depth_U0=depth_U0)

    def harmonic_frequencies(self, mass, depth=None):
        """Small-oscillation frequencies of the Gaussian potential itself.

        These follow from the curvature at the focus and generally differ
        from the measured ``frequencies``.
        """
        U0 = self.depth_U0 if depth is None else depth
        if U0 is None:
            raise DomainError("trap depth unknown")
        return (
            math.sqrt(4.0 * U0 / (mass * self.waist_x**2)),
            math.sqrt(4.0 * U0 / (mass * self.waist_y**2)),
            math.sqrt(2.0 * U0 / (mass * self.rayleigh_z**2)),
        )


@dataclass(frozen=True)
class GaussianState1D:
    """Mean and covariance of one motional axis, (q, p) in SI units."""

    mean_q: float
    mean_p: float
    var_q: float
    var_p: float
    cov_qp: float = 0.0

    def __post_init__(self):
        if not (self.var_q >= 0 and self.var_p >= 0):
            raise DomainError("variances must be non-negative")
        det = self.var_q * self.var_p - self.cov_qp**2
        scale = self.var_q * self.var_p
        if det < -1e-12 * scale:
            raise DomainError(f"covariance not positive semidefinite (det={det:.3e})")

    @property
    def covariance(self):
        return np.array([[self.var_q, self.cov_qp], [self.cov_qp, self.var_p]])

    @property
    def mean(self):
        return np.array([self.mean_q, self.mean_p])

    @property
    def determinant(self):
        return self.var_q * self.var_p - self.cov_qp**2

    def is_physical(self, rtol=1e-9):
        """Robertson-Schroedinger bound det >= (hbar/2)^2."""
        return self.determinant >= (HBAR / 2) ** 2 * (1 - rtol)

    @classmethod
    def from_arrays(cls, mean, cov):
        cov = np.asarray(cov, dtype=float)
        return cls(
            float(mean[0]),
            float(mean[1]),
            float(cov[0, 0]),
            float(cov[1, 1]),
            float(0.5 * (cov[0, 1] + cov[1, 0])),
        )


@dataclass(frozen=True)
class Protocol:
    """One free-fall realization: release for ``tau`` and recapture ``d`` lower.

    ``displacement_d`` is the downward distance between the release and
    recapture foci. It may be specified through an AOM detuning ``detuning``
    (Hz) and calibration ``c_f`` (m/Hz) instead. Initial states are given
    per axis as temperatures or occupations.
    """

    tau: float
    displacement_d: float | None = None
    detuning: float | None = None
    c_f: float | None = None
    init_temperatures: tuple[float, float, float] | None = None
    init_occupations: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.tau < 0:
            raise DomainError("tau must be >= 0")
        if self.displacement_d is None:
            if self.detuning is None or self.c_f is None:
                raise DomainError("give displacement_d or both detuning and c_f")
            object.__setattr__(self, "displacement_d", self.c_f * self.detuning)
        elif self.detuning is not None and self.c_f is not None:
            if not math.isclose(self.displacement_d, self.c_f * self.detuning, rel_tol=1e-9):
                raise DomainError("displacement_d inconsistent with c_f * detuning")
        if (self.init_temperatures is None) == (self.init_occupations is None):
            raise DomainError("give exactly one of init_temperatures / init_occupations")

    def initial_states(self, mass, frequencies):
        """Thermal states for the three axes at the given trap frequencies."""
        states = []
        for j, omega in enumerate(frequencies):
            if self.init_temperatures is not None:
                states.append(thermal_state(mass, omega, temperature=self.init_temperatures[j]))
            else:
                states.append(thermal_state(mass, omega, occupation=self.init_occupations[j]))
        return tuple(states)


def gas_damping_rate(particle: ParticleParams, env: EnvironmentParams):
    """Epstein damping rate gamma [rad/s] of a sphere in a dilute gas.

    Linear in pressure, inversely proportional to radius and density.
    """
    k = epstein_prefactor(particle.density, env.gas_temperature, env.molar_mass)
    return k * env.pressure / particle.radius


def occupation_from_temperature(temperature, omega):
    """n0 with the convention n0 + 1/2 = k_B T / (hbar omega)."""
    return K_B * temperature / (HBAR * omega) - 0.5


def temperature_from_occupation(occupation, omega):
    return (occupation + 0.5) * HBAR * omega / K_B


def zpf(mass, omega):
    """Zero-point amplitudes (q_zpf, p_zpf) = (sqrt(hbar/m omega), sqrt(hbar m omega))."""
    return math.sqrt(HBAR / (mass * omega)), math.sqrt(HBAR * mass * omega)


def thermal_state(particle, omega, temperature=None, occupation=None):
    """Centered thermal state of a harmonic mode.

    Either ``temperature`` (K) or ``occupation`` (n0) must be given; the two
    are related by n0 + 1/2 = k_B T / (hbar omega), so the temperature entry
    reproduces classical equipartition exactly.

    Parameters
    ----------
    particle : ParticleParams or float
        The particle, or directly its mass in kg.
    omega : float
        Trap angular frequency [rad/s].
    """
    mass = particle.mass if isinstance(particle, ParticleParams) else float(particle)
    _require_positive(mass=mass, omega=omega)
    if (temperature is None) == (occupation is None):
        raise DomainError("give exactly one of temperature / occupation")
    if temperature is not None:
        _require_positive(temperature=temperature)
        v0 = K_B * temperature / (HBAR * omega)
    else:
        if occupation < 0:
            raise DomainError("occupation must be >= 0")
        v0 = occupation + 0.5
    return GaussianState1D(
        mean_q=0.0,
        mean_p=0.0,
        var_q=HBAR / (mass * omega) * v0,
        var_p=HBAR * mass * omega * v0,
        cov_qp=0.0,
    )
