import math

import numpy as np
import pytest

from levfano.physics_core import E0, NeedleConfig, TrapConfig


@pytest.fixture
def small_trap():
    """0.5 W, 1 um waist, 2 um Rayleigh length, 75 nm sphere (f0 = 58 kHz)."""
    return TrapConfig(laser_power=0.5, wavelength=1550e-9, waist_radius=1e-6,
                      rayleigh_length=2e-6, particle_radius=75e-9, particle_density=1800.0,
                      susceptibility=0.9)


@pytest.fixture
def golden_trap():
    """Reference particle: 71.4 nm, q/m = 2.80 C/kg with 48 charges (f0 = 30 kHz)."""
    return TrapConfig(laser_power=0.8, rayleigh_length=4.9e-6, particle_radius=71.4e-9)


@pytest.fixture
def golden_needle():
    return NeedleConfig(voltage=0.0, tip_distance=0.036, tip_radius=4.55e-4)


@pytest.fixture
def golden_charge():
    return 48 * E0


def rel(a, b):
    return abs(a - b) / abs(b)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    def record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
