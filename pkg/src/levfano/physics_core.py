"""Closed-form z-axis potentials, forces, equilibria and frequencies.

All quantities are SI; frequencies are angular (rad/s).

The effective axial potential is the sum of three terms:

* optical gradient trap, ``(m/2) w0^2 z^2 - eta z^4``
* integrated scattering force, ``-K atan(z / z_e)`` with ``z_e = pi w0^2 / lambda``
* linearized Coulomb term of a needle sitting at 45 degrees, ``q Q z / (4 pi eps0 sqrt(2) R^2)``
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import constants as const

from .errors import ImaginaryFrequency, InvalidInput, NoConvergence, NotConfining

E0 = const.e
HBAR = const.hbar
C_LIGHT = const.c
EPS0 = const.epsilon_0
KB = const.k
COULOMB_K = 1.0 / (4.0 * math.pi * EPS0)


@dataclass(frozen=True)
class TrapConfig:
    """Laser, optics and particle parameters of the optical trap.

    Attributes
    ----------
    laser_power : float
        Trapping power P (W).
    wavelength : float
        Laser wavelength (m).
    waist_radius : float
        Mean beam waist w0 (m).
    rayleigh_length : float
        Rayleigh length z_R (m).
    particle_radius : float
        Sphere radius (m).
    particle_density : float
        Mass density (kg/m^3).
    susceptibility : float
        Electric susceptibility entering the trap frequency (dimensionless).
    nonlinearity : float
        Quartic coefficient eta (J/m^4); 0 disables the Duffing term.
    scattering_correction : float
        Multiplier on the Rayleigh cross-section ``pi^2 V0^2 / lambda^4``.
    """

    laser_power: float
    wavelength: float = 1550e-9
    waist_radius: float = 1e-6
    rayleigh_length: float = 2e-6
    particle_radius: float = 75e-9
    particle_density: float = 1800.0
    susceptibility: float = 0.9
    nonlinearity: float = 0.0
    scattering_correction: float = 1.0

    def __post_init__(self):
        for name in ("wavelength", "waist_radius", "rayleigh_length",
                     "particle_radius", "particle_density", "susceptibility"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidInput(f"{name} must be positive, got {value!r}")
        if not (math.isfinite(self.laser_power) and self.laser_power >= 0):
            raise InvalidInput(f"laser_power must be non-negative, got {self.laser_power!r}")
        if not (math.isfinite(self.nonlinearity) and self.nonlinearity >= 0):
            raise InvalidInput(f"nonlinearity must be >= 0, got {self.nonlinearity!r}")
        if not (math.isfinite(self.scattering_correction) and self.scattering_correction >= 0):
            raise InvalidInput("scattering_correction must be >= 0")

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * math.pi * self.particle_radius**3

    @property
    def mass(self) -> float:
        return self.volume * self.particle_density

    @property
    def beam_area(self) -> float:
        """Effective beam cross-section sigma_L = pi w0^2."""
        return math.pi * self.waist_radius**2

    @property
    def omega0(self) -> float:
        """Bare trap frequency, independent of particle size."""
        return math.sqrt(2.0 * self.laser_power * self.susceptibility
                         / (C_LIGHT * self.beam_area * self.particle_density
                            * self.rayleigh_length**2))

    @property
    def scattering_length(self) -> float:
        """Axial scale z_e = pi w0^2 / lambda of the scattering potential."""
        return math.pi * self.waist_radius**2 / self.wavelength

    def to_dict(self) -> dict:
        return asdict(self)


def needle_charge(voltage, tip_radius, calibration=1.0):
    """Charge on the needle tip from an isolated-sphere capacitance, Q = 4 pi eps0 r V."""
    if not tip_radius > 0:
        raise InvalidInput("tip_radius must be positive")
    return calibration * 4.0 * math.pi * EPS0 * tip_radius * voltage


@dataclass(frozen=True)
class NeedleConfig:
    """Charged needle tip at distance R along the (x, z) diagonal.

    ``charge_override`` replaces the capacitance model when given; its sign
    must agree with the voltage.
    """

    voltage: float
    tip_distance: float
    tip_radius: float = 10e-6
    calibration: float = 1.0
    charge_override: float | None = None

    def __post_init__(self):
        if not self.tip_distance > 0:
            raise InvalidInput("tip_distance must be positive")
        if not self.tip_radius > 0:
            raise InvalidInput("tip_radius must be positive")
        if not self.calibration > 0:
            raise InvalidInput("calibration must be positive")
        if self.charge_override is not None:
            if np.sign(self.charge_override) != np.sign(self.voltage):
                raise InvalidInput("needle charge sign must equal voltage sign")

    @property
    def charge(self) -> float:
        if self.charge_override is not None:
            return self.charge_override
        return needle_charge(self.voltage, self.tip_radius, self.calibration)

    def with_voltage(self, voltage: float) -> "NeedleConfig":
        return NeedleConfig(voltage, self.tip_distance, self.tip_radius, self.calibration)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ParticleState:
    z: float
    p_z: float
    charge: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.z) and math.isfinite(self.p_z)):
            raise InvalidInput("state must be finite")
        n = self.charge / E0
        if abs(n - round(n)) > 1e-6 * max(1.0, abs(n)):
            raise InvalidInput("charge must be an integer multiple of e0")


def scattering_rate(cfg: TrapConfig) -> float:
    """Photon scattering rate Gamma_s = (sigma_R / sigma_L) P / (hbar w_L)."""
    sigma_r = cfg.scattering_correction * math.pi**2 * cfg.volume**2 / cfg.wavelength**4
    omega_laser = 2.0 * math.pi * C_LIGHT / cfg.wavelength
    return sigma_r / cfg.beam_area * cfg.laser_power / (HBAR * omega_laser)


def _scattering_amplitude(cfg: TrapConfig) -> float:
    # prefactor K of -K atan(z / z_e)
    return (32.0 * math.pi**3 * HBAR * scattering_rate(cfg) * cfg.waist_radius**2
            / (3.0 * cfg.wavelength**2))


def u_opt(z, cfg: TrapConfig):
    return 0.5 * cfg.mass * cfg.omega0**2 * np.square(z) - cfg.nonlinearity * np.power(z, 4)


def u_scatt(z, cfg: TrapConfig):
    return -_scattering_amplitude(cfg) * np.arctan(np.asarray(z) / cfg.scattering_length)


def coulomb_slope(needle: NeedleConfig, q: float) -> float:
    """dU_el/dz, constant because the Coulomb term is kept to linear order."""
    return COULOMB_K * q * needle.charge / (math.sqrt(2.0) * needle.tip_distance**2)


def u_el(z, needle: NeedleConfig, q: float):
    return coulomb_slope(needle, q) * np.asarray(z)


def effective_potential(z, cfg: TrapConfig, needle: NeedleConfig, q: float):
    return u_opt(z, cfg) + u_scatt(z, cfg) + u_el(z, needle, q)


def trap_gradient(z, cfg: TrapConfig):
    """d/dz (U_opt + U_scatt); the quantity modulated by parametric feedback."""
    z = np.asarray(z, dtype=float)
    u = z / cfg.scattering_length
    return (cfg.mass * cfg.omega0**2 * z - 4.0 * cfg.nonlinearity * z**3
            - _scattering_amplitude(cfg) / (cfg.scattering_length * (1.0 + u * u)))


def total_force(z, cfg: TrapConfig, needle: NeedleConfig, q: float):
    """Analytic -dU_eff/dz."""
    return -(trap_gradient(z, cfg) + coulomb_slope(needle, q))


def potential_curvature(z, cfg: TrapConfig):
    """d^2 U_eff / dz^2 (the Coulomb term is linear and drops out)."""
    z = np.asarray(z, dtype=float)
    ze = cfg.scattering_length
    u = z / ze
    return (cfg.mass * cfg.omega0**2 - 12.0 * cfg.nonlinearity * z**2
            + 2.0 * _scattering_amplitude(cfg) * z / (ze**3 * (1.0 + u * u) ** 2))


def find_equilibrium(cfg: TrapConfig, needle: NeedleConfig, q: float,
                     force_tol: float = 1e-24, max_iter: int = 100) -> float:
    """Newton search for the minimum of U_eff, started at the trap centre.

    A step that increases ``|force|`` is halved (up to 30 times) before being
    accepted.

    Raises
    ------
    NoConvergence
        ``|force|`` still above ``force_tol`` after ``max_iter`` iterations.
    NotConfining
        Curvature at the root is not positive.
    """
    z = 0.0
    f = float(total_force(z, cfg, needle, q))
    for _ in range(max_iter):
        if abs(f) < force_tol:
            break
        k = float(potential_curvature(z, cfg))
        if k <= 0:
            raise NotConfining(f"non-positive curvature {k:g} at z={z:g} m")
        step = f / k
        f_new = float(total_force(z + step, cfg, needle, q))
        halvings = 0
        while abs(f_new) > abs(f) and halvings < 30:
            step *= 0.5
            f_new = float(total_force(z + step, cfg, needle, q))
            halvings += 1
        if z + step == z:
            break
        z, f = z + step, f_new
    if abs(f) >= force_tol:
        raise NoConvergence(f"|F|={abs(f):g} N at z={z:g} m after {max_iter} iterations")
    if potential_curvature(z, cfg) <= 0:
        raise NotConfining(f"equilibrium at z={z:g} m is not a minimum")
    return z


def linearized_equilibrium(cfg: TrapConfig, needle: NeedleConfig, q: float) -> float:
    """First-order displacement of the minimum by the scattering and Coulomb forces."""
    scatt_force = 32.0 * math.pi**2 * scattering_rate(cfg) * HBAR / (3.0 * cfg.wavelength)
    return -(coulomb_slope(needle, q) - scatt_force) / (cfg.mass * cfg.omega0**2)


def harmonic_frequency(z0: float, cfg: TrapConfig) -> float:
    """Small-oscillation frequency about the displaced minimum z0."""
    w0, lam = cfg.waist_radius, cfg.wavelength
    radicand = (cfg.omega0**2 - 12.0 * cfg.nonlinearity * z0**2 / cfg.mass
                + 64.0 * math.pi**4 * lam * w0**4 * HBAR * z0 * scattering_rate(cfg)
                / (3.0 * cfg.mass * (math.pi**2 * w0**4 + lam**2 * z0**2) ** 2))
    if not radicand > 0:
        raise ImaginaryFrequency(f"omega_m^2 = {radicand:g} <= 0; trap destabilized")
    return math.sqrt(radicand)


def shift_coefficients(cfg: TrapConfig, needle: NeedleConfig) -> tuple[float, float]:
    """Coefficients (B, C) of omega_m = omega0 + B m^2 + C qQ.

    Both scale with the scattering rate, so ``scattering_correction`` enters as
    its square for B and linearly for C.
    """
    p, w0, lam, rho = cfg.laser_power, cfg.waist_radius, cfg.wavelength, cfg.particle_density
    om0 = cfg.omega0
    corr = cfg.scattering_correction
    b = (16.0 * math.pi / 3.0 * p / (om0**1.5 * w0**4 * C_LIGHT * lam**3 * rho**2)) ** 2
    c = (2.0 * math.sqrt(2.0) * p
         / (3.0 * math.pi * EPS0 * needle.tip_distance**2 * lam**2 * w0**6 * om0**3 * rho**2 * C_LIGHT))
    return corr**2 * b, corr * c


def frequency_shift_model(m, qQ, cfg: TrapConfig, needle: NeedleConfig):
    """Linearized mechanical frequency omega0 + B m^2 + C qQ (rad/s)."""
    b, c = shift_coefficients(cfg, needle)
    return cfg.omega0 + b * np.square(m) + c * np.asarray(qQ)
