"""Time-domain integration of the feedback-cooled axial Langevin dynamics.

    dz   = p/m dt
    dp   = [-dU_eff/dz - f_fb - 2 gamma_coll p] dt + sqrt(4 gamma_coll m kB T) dW
    f_fb = beta * d/dz(U_opt + U_scatt) * z * p

Each step is a symmetric splitting

    K/2  F/2  D/2  O  D/2  F/2  K/2

with K a conservative kick, F the exact solution of the feedback term at
frozen z (it is linear in p), D a drift and O the exact Ornstein-Uhlenbeck
update of the gas damping and its thermal noise. With gas and feedback off
the scheme reduces to velocity Verlet.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from . import __version__
from .errors import InvalidInput, ResolutionGuard, Unstable
from .physics_core import (
    KB,
    NeedleConfig,
    TrapConfig,
    _scattering_amplitude,
    coulomb_slope,
    find_equilibrium,
    harmonic_frequency,
    trap_gradient,
)

N2_MASS = 28.0134e-3 / 6.02214076e23  # kg, molecular nitrogen

# diffuse reflection with full accommodation
EPSTEIN_DELTA = 1.0 + math.pi / 8.0

_CHUNK = 1 << 18
_LOSS_FACTOR = 10.0


@dataclass(frozen=True)
class SimulationConfig:
    """Integration and environment settings for one run.

    ``initial_displacement`` is measured from the equilibrium point. When
    ``thermal_start`` is set and the gas is present, the initial state is
    drawn from the harmonic Boltzmann distribution about equilibrium.
    """

    timestep: float = 1e-7
    duration: float = 0.1
    seed: int = 0
    gas_pressure: float = 8e-3
    gas_temperature: float = 295.0
    gas_molecular_mass: float = N2_MASS
    feedback_strength: float = 0.0
    record_stride: int = 8
    thermal_start: bool = True
    initial_displacement: float = 0.0
    initial_momentum: float = 0.0

    def __post_init__(self):
        if not self.timestep > 0:
            raise InvalidInput("timestep must be positive")
        if self.duration < 1000 * self.timestep:
            raise InvalidInput("duration must cover at least 1000 timesteps")
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            raise InvalidInput("record_stride must be a positive integer")
        if self.gas_pressure < 0:
            raise InvalidInput("gas_pressure must be >= 0")
        if not self.gas_temperature > 0:
            raise InvalidInput("gas_temperature must be positive")
        if not self.gas_molecular_mass > 0:
            raise InvalidInput("gas_molecular_mass must be positive")
        if not 0 <= self.seed < 2**64:
            raise InvalidInput("seed must be a 64-bit unsigned integer")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.timestep))


@dataclass(frozen=True, eq=False)
class Trajectory:
    sample_interval: float
    z: np.ndarray
    p: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.z.shape != self.p.shape:
            raise InvalidInput("z and p series must have equal length")
        if not (np.all(np.isfinite(self.z)) and np.all(np.isfinite(self.p))):
            raise InvalidInput("trajectory contains non-finite samples")
        self.z.setflags(write=False)
        self.p.setflags(write=False)

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.z.size) * self.sample_interval

    def __len__(self):
        return self.z.size

    def to_csv(self, path, metadata_path=None):
        """Write ``t,z,p`` rows plus a JSON sidecar (``<path>.json`` by default)."""
        data = np.column_stack([self.t, self.z, self.p])
        with open(path, "w", newline="") as fh:
            fh.write("t,z,p\n")
            np.savetxt(fh, data, fmt="%.17g", delimiter=",")
        meta = {"sample_interval": self.sample_interval, "n_samples": int(self.z.size),
                "code_version": __version__, **self.metadata}
        with open(metadata_path or f"{path}.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, path, metadata_path=None) -> "Trajectory":
        with open(path) as fh:
            header = next(csv.reader(fh))
        if [h.strip() for h in header] != ["t", "z", "p"]:
            raise InvalidInput(f"{path}: expected header t,z,p, got {header}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        try:
            with open(metadata_path or f"{path}.json") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            meta = {}
        dt = meta.pop("sample_interval", None)
        if dt is None:
            dt = float(data[1, 0] - data[0, 0])
        meta.pop("n_samples", None)
        return cls(float(dt), data[:, 1].copy(), data[:, 2].copy(), meta)


def gas_damping(pressure, temperature, particle_radius, particle_density,
                gas_molecular_mass=N2_MASS):
    """Collision rate gamma_coll of the axial equation (1/s).

    Free-molecular Epstein drag on a sphere (P. S. Epstein, Phys. Rev. 23,
    710 (1924)), velocity damping rate

        Gamma = delta * p * sqrt(8 m_gas / (pi kB T)) / (rho r),  delta = 1 + pi/8.

    The equation of motion damps momentum at 2 gamma_coll, so gamma_coll = Gamma / 2.
    """
    if pressure < 0:
        raise InvalidInput("pressure must be >= 0")
    rate = (EPSTEIN_DELTA * pressure * math.sqrt(8.0 * gas_molecular_mass / (math.pi * KB * temperature))
            / (particle_density * particle_radius))
    return 0.5 * rate


def feedback_force(z, p_z, beta, cfg: TrapConfig):
    """Parametric feedback force beta * d/dz(U_opt + U_scatt) * z * p_z.

    The Coulomb term is left out: only the laser power is modulated.
    """
    return beta * trap_gradient(z, cfg) * np.asarray(z) * np.asarray(p_z)


@njit(cache=True)
def _integrate_chunk(z, p, n_steps, dt, mass, k_opt, eta, k_scatt, z_e, slope_el,
                     beta, ou_c, ou_s, noise, stride, phase, out_z, out_p, out_pos, z_max):
    half = 0.5 * dt
    inv_m = 1.0 / mass
    for i in range(n_steps):
        u = z / z_e
        grad = k_opt * z - 4.0 * eta * z * z * z - k_scatt / (z_e * (1.0 + u * u))
        p -= half * (grad + slope_el)
        if beta != 0.0:
            p *= math.exp(-beta * grad * z * half)
        z += half * p * inv_m
        p = ou_c * p + ou_s * noise[i]
        z += half * p * inv_m
        u = z / z_e
        grad = k_opt * z - 4.0 * eta * z * z * z - k_scatt / (z_e * (1.0 + u * u))
        if beta != 0.0:
            p *= math.exp(-beta * grad * z * half)
        p -= half * (grad + slope_el)
        if not abs(z) < z_max:
            return z, p, phase, out_pos, i + 1
        phase += 1
        if phase == stride:
            phase = 0
            out_z[out_pos] = z
            out_p[out_pos] = p
            out_pos += 1
    return z, p, phase, out_pos, -1


def simulate(trap: TrapConfig, needle: NeedleConfig, q: float,
             sim: SimulationConfig) -> Trajectory:
    """Integrate the axial equations of motion and record every ``record_stride`` steps.

    The output holds the initial state followed by ``n_steps // record_stride``
    samples. Identical inputs give bit-identical trajectories.

    Raises
    ------
    ResolutionGuard
        If ``timestep * omega_m >= 0.1``.
    Unstable
        If ``|z|`` exceeds ten beam waists.
    """
    z0 = find_equilibrium(trap, needle, q)
    omega_m = harmonic_frequency(z0, trap)
    if sim.timestep * omega_m >= 0.1:
        raise ResolutionGuard(f"timestep*omega_m = {sim.timestep * omega_m:.3g} >= 0.1")

    m = trap.mass
    kT = KB * sim.gas_temperature
    gamma = gas_damping(sim.gas_pressure, sim.gas_temperature, trap.particle_radius,
                        trap.particle_density, sim.gas_molecular_mass)
    ou_c = math.exp(-2.0 * gamma * sim.timestep)
    ou_s = math.sqrt(m * kT * (1.0 - ou_c * ou_c))

    rng = np.random.Generator(np.random.PCG64(sim.seed))
    z = z0 + sim.initial_displacement
    p = sim.initial_momentum
    if sim.thermal_start and gamma > 0:
        z += rng.standard_normal() * math.sqrt(kT / (m * omega_m**2))
        p += rng.standard_normal() * math.sqrt(m * kT)

    n_steps = sim.n_steps
    stride = int(sim.record_stride)
    n_out = n_steps // stride + 1
    out_z = np.empty(n_out)
    out_p = np.empty(n_out)
    out_z[0], out_p[0] = z, p
    pos, phase = 1, 0
    zeros = np.zeros(min(_CHUNK, n_steps))
    args = (sim.timestep, m, m * trap.omega0**2, trap.nonlinearity, _scattering_amplitude(trap),
            trap.scattering_length, coulomb_slope(needle, q), sim.feedback_strength, ou_c, ou_s)
    z_max = _LOSS_FACTOR * trap.waist_radius
    done = 0
    while done < n_steps:
        n = min(_CHUNK, n_steps - done)
        noise = rng.standard_normal(n) if ou_s > 0 else zeros[:n]
        z, p, phase, pos, lost = _integrate_chunk(z, p, n, *args, noise, stride, phase,
                                                  out_z, out_p, pos, z_max)
        if lost >= 0:
            raise Unstable(f"|z| = {abs(z):.3g} m exceeded {z_max:.3g} m "
                           f"at t = {(done + lost) * sim.timestep:.6g} s")
        done += n

    meta = {
        "trap": trap.to_dict(),
        "needle": needle.to_dict(),
        "particle_charge": q,
        "simulation": asdict(sim),
        "equilibrium_z": z0,
        "omega_m": omega_m,
        "gamma_coll": gamma,
    }
    return Trajectory(sim.timestep * stride, out_z, out_p, meta)
