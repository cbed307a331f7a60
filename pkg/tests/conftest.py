import math

import pytest

from trapfall.constants import K_B
from trapfall.physics_core import EnvironmentParams, ParticleParams, Protocol, TrapParams

TWO_PI = 2.0 * math.pi
T0 = (12.9e-3, 34.1e-3, 42e-3)
U0_KT0 = 5.4e5


@pytest.fixture(scope="session")
def particle():
    return ParticleParams(60e-9)


@pytest.fixture(scope="session")
def env():
    return EnvironmentParams.from_mbar(3e-6)


@pytest.fixture(scope="session")
def depth():
    return U0_KT0 * K_B * T0[1]


@pytest.fixture(scope="session")
def trap(depth):
    return TrapParams(
        0.6e-6, 0.6e-6, 2.3e-6, 0.13, (TWO_PI * 116e3, TWO_PI * 141.2e3, TWO_PI * 41e3), depth_U0=depth
    )


@pytest.fixture(scope="session")
def base_protocol():
    return Protocol(tau=0.25e-3, displacement_d=0.5 * 9.806 * 0.25e-3**2, init_temperatures=T0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number])
