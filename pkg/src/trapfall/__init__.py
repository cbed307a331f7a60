"""Trap-to-trap free fall of levitated nanoparticles: models, Monte Carlo and analysis."""

__version__ = "0.1.0"

from .physics_core import (  # noqa: E402
    DomainError,
    EnvironmentParams,
    GaussianState1D,
    ParticleParams,
    Protocol,
    TrapParams,
    gas_damping_rate,
    mass_from_radius,
    thermal_state,
)
