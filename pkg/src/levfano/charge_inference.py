"""Inversion of fitted observables into particle mass, charge and Coulomb force.

Sign convention: ``static_force`` is ``qQ / (4 pi eps0 R^2)``; a negative value
is attractive (opposite charges).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import DegenerateDesign, InvalidInput, NegativeMass
from .physics_core import (
    COULOMB_K,
    E0,
    NeedleConfig,
    TrapConfig,
    needle_charge,
    shift_coefficients,
)

__all__ = [
    "VoltageSweepPoint",
    "InferenceResult",
    "needle_charge",
    "fano_parameter_prediction",
    "fit_frequency_vs_voltage",
    "static_force",
    "characteristic_rate",
]


@dataclass(frozen=True)
class VoltageSweepPoint:
    voltage: float
    omega_m: float
    omega_m_error: float
    fano_param: float | None = None
    fano_param_error: float | None = None

    def __post_init__(self):
        if not self.omega_m > 0:
            raise InvalidInput("omega_m must be positive")
        if not (math.isfinite(self.omega_m_error) and self.omega_m_error >= 0):
            raise InvalidInput("omega_m_error must be finite and >= 0")
        if self.fano_param_error is not None and not self.fano_param_error >= 0:
            raise InvalidInput("fano_param_error must be >= 0")


@dataclass(frozen=True)
class InferenceResult:
    mass: float
    charge: float
    mass_error: float
    charge_error: float
    charge_to_mass: float
    charge_to_mass_error: float
    coulomb_force_at: dict
    chi2_per_dof: float
    provenance: dict = field(default_factory=dict)

    @property
    def charge_number(self) -> float:
        return self.charge / E0

    def to_dict(self) -> dict:
        return {
            "mass_kg": self.mass,
            "mass_error_kg": self.mass_error,
            "charge_c": self.charge,
            "charge_error_c": self.charge_error,
            "charge_e0": self.charge / E0,
            "charge_error_e0": self.charge_error / E0,
            "charge_to_mass_c_per_kg": self.charge_to_mass,
            "charge_to_mass_error_c_per_kg": self.charge_to_mass_error,
            "coulomb_force_n": {f"{v:g}": f for v, f in sorted(self.coulomb_force_at.items())},
            "chi2_per_dof": self.chi2_per_dof,
            "provenance": self.provenance,
            "code_version": __version__,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def fano_parameter_prediction(q: float, Q: float, branch: int = 1) -> float:
    """Fano parameter ``branch * e0^2 / (q Q)``; the data pick the branch, not the theory."""
    if q == 0 or Q == 0:
        raise InvalidInput("q*Q must be non-zero")
    if branch not in (1, -1):
        raise InvalidInput("branch must be +1 or -1")
    return branch * E0**2 / (q * Q)


def characteristic_rate(dip_offset: float, q: float, Q: float) -> float:
    """gamma_el from a fitted dip offset once the Fano parameter is fixed by the charges."""
    return math.sqrt(abs(dip_offset) * abs(q * Q) / E0**2)


def static_force(q: float, Q: float, R: float) -> float:
    if not R > 0:
        raise InvalidInput("R must be positive")
    return COULOMB_K * q * Q / R**2


def fit_frequency_vs_voltage(points, trap: TrapConfig, needle: NeedleConfig) -> InferenceResult:
    """Weighted least squares of omega_m(V) = omega0 + B m^2 + C q Q(V) for (m, q).

    The model is linear in (m^2, q); ``omega0``, B and C come from the trap and
    needle configs, Q(V) from the needle's capacitance model. Errors are the
    unscaled propagated covariance of the supplied ``omega_m_error`` values.
    """
    points = list(points)
    if len(points) < 3:
        raise InvalidInput("need at least 3 sweep points")
    volts = np.array([p.voltage for p in points], dtype=float)
    if np.ptp(volts) == 0:
        raise DegenerateDesign("all voltages are equal")
    omega = np.array([p.omega_m for p in points])
    err = np.array([p.omega_m_error for p in points])
    if np.any(err <= 0):
        # unweighted when no usable errors are supplied
        err = np.ones_like(omega)
    charges = np.array([needle_charge(v, needle.tip_radius, needle.calibration) for v in volts])
    b, c = shift_coefficients(trap, needle)

    # relative weights only; the absolute error scale is restored in the covariance
    unit = float(np.median(err))
    err = err / unit
    design = np.column_stack([np.full(volts.size, b), c * charges]) / err[:, None]
    target = (omega - trap.omega0) / err
    # columns differ by ~50 orders of magnitude; solve in scaled variables
    scale = np.linalg.norm(design, axis=0)
    if np.any(scale == 0):
        raise DegenerateDesign("a design column vanishes (no voltage or no shift coefficient)")
    scaled = design / scale
    if np.linalg.cond(scaled) > 1e12:
        raise DegenerateDesign("voltage schedule cannot separate mass and charge")
    coef, *_ = np.linalg.lstsq(scaled, target, rcond=None)
    coef = coef / scale
    cov = np.linalg.inv(scaled.T @ scaled) / np.outer(scale, scale) * unit**2
    m2, q = coef
    if m2 <= 0:
        raise NegativeMass(f"fitted m^2 = {m2:g} kg^2")
    resid = (target - design @ coef) / unit
    dof = max(volts.size - 2, 1)

    m = math.sqrt(m2)
    dm = math.sqrt(cov[0, 0]) / (2.0 * m)
    dq = math.sqrt(cov[1, 1])
    # q/m = q m2^{-1/2}
    grad = np.array([-0.5 * q * m2**-1.5, m2**-0.5])
    dqm = math.sqrt(grad @ cov @ grad)
    forces = {}
    for v in sorted(set(volts.tolist()) | {1e3}):
        Q = needle_charge(v, needle.tip_radius, needle.calibration)
        forces[float(v)] = static_force(q, Q, needle.tip_distance)
    provenance = {
        "n_points": int(volts.size),
        "points_sha256": hashlib.sha256(np.array([[p.voltage, p.omega_m, p.omega_m_error]
                                                  for p in points]).tobytes()).hexdigest(),
    }
    return InferenceResult(m, float(q), dm, dq, float(q) / m, dqm, forces,
                           float(resid @ resid / dof), provenance)
