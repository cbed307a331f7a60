"""Physical constants (CODATA, via scipy.constants) and unit helpers.

All quantities inside the package are SI. Interfaces that take pressure
accept mbar and convert with :func:`mbar_to_pa`.
"""

from scipy import constants as _c

HBAR = _c.hbar  # [J s]
K_B = _c.k  # [J/K]
N_A = _c.N_A  # [1/mol]
C_LIGHT = _c.c  # [m/s]

G_DEFAULT = 9.806  # [m/s^2]

# Air and fused silica
M_AIR = 28.97e-3  # [kg/mol]
RHO_SILICA = 2200.0  # [kg/m^3]
EPS_SILICA = 2.1
EPSTEIN_FACTOR = 0.619

PA_PER_MBAR = 100.0

# --- units ---
nm = 1e-9
um = 1e-6
fg = 1e-18
kHz = 1e3
MHz = 1e6
ms = 1e-3
us = 1e-6
mK = 1e-3


def mbar_to_pa(p_mbar):
    return p_mbar * PA_PER_MBAR


def pa_to_mbar(p_pa):
    return p_pa / PA_PER_MBAR
