"""TOML experiment configuration: schema, defaults, validation and manifest hashing.

Every key, its default and its constraint live in ``SCHEMA``; README.md
mirrors that table. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .. import __version__
from ..errors import InvalidInput, ParseError, ValidationError
from ..langevin_engine import N2_MASS, SimulationConfig
from ..physics_core import E0, NeedleConfig, TrapConfig


def _positive(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) and x > 0


def _nonneg(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) and x >= 0


def _int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _pos_int(x):
    return _int(x) and x > 0


def _string(x):
    return isinstance(x, str) and len(x) > 0


def _bool(x):
    return isinstance(x, bool)


def _fraction(x):
    return _nonneg(x) and x < 1


def _voltages(x):
    return (isinstance(x, list) and len(x) > 0
            and all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
                    for v in x))


# section -> key -> (default, check, constraint text)
SCHEMA = {
    "trap": {
        "laser_power": (0.8, _positive, "must be > 0 (W)"),
        "wavelength": (1550e-9, _positive, "must be > 0 (m)"),
        "waist_radius": (1.0e-6, _positive, "must be > 0 (m)"),
        "rayleigh_length": (4.9e-6, _positive, "must be > 0 (m)"),
        "susceptibility": (0.9, _positive, "must be > 0"),
        "nonlinearity": (0.0, _nonneg, "must be >= 0 (J/m^4)"),
        "scattering_correction": (1.0, _nonneg, "must be >= 0"),
    },
    "particle": {
        "radius": (71.4e-9, _positive, "must be > 0 (m)"),
        "density": (1800.0, _positive, "must be > 0 (kg/m^3)"),
        "charge_e0": (48, _int, "must be an integer number of elementary charges"),
    },
    "needle": {
        "tip_distance": (0.036, _positive, "must be > 0 (m)"),
        "tip_radius": (4.55e-4, _positive, "must be > 0 (m)"),
        "calibration": (1.0, _positive, "must be > 0"),
    },
    "simulation": {
        "gas_pressure": (8e-3, _nonneg, "must be >= 0 (Pa)"),
        "gas_temperature": (295.0, _positive, "must be > 0 (K)"),
        "gas_molecular_mass": (N2_MASS, _positive, "must be > 0 (kg)"),
        "feedback_strength": (0.0, _nonneg, "must be >= 0"),
        "record_stride": (8, _pos_int, "must be a positive integer"),
        "thermal_start": (True, _bool, "must be a boolean"),
    },
    "spectral": {
        "sample_rate": (1048576.0, _positive, "must be > 0 (samples/s)"),
        "acquisition_time": (1.0, _positive, "must be > 0 (s)"),
        "segment_length": (16384, _pos_int, "must be a positive integer"),
        "overlap_fraction": (0.5, _fraction, "must lie in [0, 1)"),
        "window": ("hann", _string, "must be a window name"),
        "detrend": ("constant", lambda x: x in ("constant", "linear"), "must be 'constant' or 'linear'"),
        "synth_fmin_hz": (10e3, _positive, "must be > 0 (Hz)"),
        "synth_fmax_hz": (60e3, _positive, "must be > 0 (Hz)"),
    },
    "fitting": {
        "halfwidth_hz": (20e3, _positive, "must be > 0 (Hz)"),
        "max_iterations": (200, _pos_int, "must be a positive integer"),
        "weight_range": (10.0, lambda x: _positive(x) and x > 1, "must be > 1"),
        "fit_gamma_el": (False, _bool, "must be a boolean"),
        "gamma_el_hz": (3.2e9, _positive, "must be > 0 (Hz)"),
    },
    "synth": {
        "floor": (1e-5, _nonneg, "must be >= 0 (fraction of the peak)"),
        "linewidth_hz": (300.0, _positive, "must be > 0 (Hz)"),
        "fano_fraction": (0.8, lambda x: _nonneg(x) and x <= 1, "must lie in [0, 1]"),
        "gamma_el_hz": (3.2e9, _positive, "must be > 0 (Hz)"),
        "fano_branch": (1, lambda x: x in (1, -1) and _int(x), "must be +1 or -1"),
    },
    "sweep": {
        "experiment_id": ("reference", _string, "must be a non-empty string"),
        "mode": ("synth", lambda x: x in ("synth", "sim"), "must be 'synth' or 'sim'"),
        "voltages": ([float(v) for v in range(0, 10001, 1000)], _voltages,
                     "must be a non-empty list of finite voltages"),
        "seed": (0, lambda x: _int(x) and 0 <= x < 2**63, "must be a non-negative integer"),
        "workers": (1, _pos_int, "must be a positive integer"),
        "svg": (False, _bool, "must be a boolean"),
        "created_at": ("1970-01-01T00:00:00Z", _string, "must be a timestamp string"),
    },
}


def defaults() -> dict:
    return {sec: {k: v[0] for k, v in keys.items()} for sec, keys in SCHEMA.items()}


@dataclass(frozen=True)
class SpectralConfig:
    sample_rate: float
    acquisition_time: float
    segment_length: int
    overlap_fraction: float
    window: str
    detrend: str
    synth_fmin_hz: float
    synth_fmax_hz: float


@dataclass(frozen=True)
class FittingConfig:
    halfwidth_hz: float
    max_iterations: int
    weight_range: float
    fit_gamma_el: bool
    gamma_el_hz: float

    @property
    def gamma_el(self) -> float | None:
        """Fixed characteristic rate in rad/s, or None when it is fitted."""
        return None if self.fit_gamma_el else 2.0 * math.pi * self.gamma_el_hz


@dataclass(frozen=True)
class SynthConfig:
    floor: float
    linewidth_hz: float
    fano_fraction: float
    gamma_el_hz: float
    fano_branch: int


@dataclass(frozen=True)
class SweepConfig:
    experiment_id: str
    mode: str
    voltages: tuple
    seed: int
    workers: int
    svg: bool
    created_at: str


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration; ``raw`` is the fully defaulted section table."""

    trap: TrapConfig
    needle: NeedleConfig
    particle_charge: float
    simulation: dict
    spectral: SpectralConfig
    fitting: FittingConfig
    synth: SynthConfig
    sweep: SweepConfig
    raw: dict = field(repr=False, default_factory=dict)

    def simulation_config(self, seed: int) -> SimulationConfig:
        s = self.simulation
        sample_interval = 1.0 / self.spectral.sample_rate
        return SimulationConfig(
            timestep=sample_interval / s["record_stride"],
            duration=self.spectral.acquisition_time,
            seed=int(seed),
            gas_pressure=s["gas_pressure"],
            gas_temperature=s["gas_temperature"],
            gas_molecular_mass=s["gas_molecular_mass"],
            feedback_strength=s["feedback_strength"],
            record_stride=s["record_stride"],
            thermal_start=s["thermal_start"],
        )

    def point_seeds(self) -> list[int]:
        """One independent seed per voltage, derived from the sweep seed."""
        ss = np.random.SeedSequence(self.sweep.seed)
        return [int(s) for s in ss.generate_state(len(self.sweep.voltages), dtype=np.uint64)]

    def with_overrides(self, **sections) -> "ExperimentConfig":
        raw = json.loads(json.dumps(self.raw))
        for sec, values in sections.items():
            raw[sec].update(values)
        return from_dict(raw, apply_defaults=False)


@dataclass(frozen=True)
class ExperimentManifest:
    experiment_id: str
    configs: dict
    voltage_schedule: tuple
    seeds: tuple
    outputs: tuple = ()
    code_version: str = __version__
    created_at: str = ""

    def content(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "configs": self.configs,
            "voltage_schedule": list(self.voltage_schedule),
            "seeds": list(self.seeds),
            "code_version": self.code_version,
            "created_at": self.created_at,
        }

    def hash(self) -> str:
        """SHA-256 of the canonical JSON of every input (outputs excluded)."""
        blob = json.dumps(self.content(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_dict(self) -> dict:
        return {**self.content(), "outputs": list(self.outputs), "manifest_sha256": self.hash()}


def manifest_for(cfg: ExperimentConfig) -> ExperimentManifest:
    return ExperimentManifest(cfg.sweep.experiment_id, cfg.raw, cfg.sweep.voltages,
                              tuple(cfg.point_seeds()), (), __version__, cfg.sweep.created_at)


def _merge(data: dict, apply_defaults: bool) -> dict:
    if not isinstance(data, dict):
        raise ValidationError("<root>", "must be a table")
    for sec in data:
        if sec not in SCHEMA:
            raise ValidationError(sec, "unknown section")
    merged = defaults() if apply_defaults else {}
    for sec, keys in SCHEMA.items():
        given = data.get(sec, {})
        if not isinstance(given, dict):
            raise ValidationError(sec, "must be a table")
        merged.setdefault(sec, {})
        for key, value in given.items():
            if key not in keys:
                raise ValidationError(f"{sec}.{key}", "unknown key")
            merged[sec][key] = value
        for key, (_, check, constraint) in keys.items():
            if key not in merged[sec]:
                raise ValidationError(f"{sec}.{key}", "missing")
            value = merged[sec][key]
            # TOML integers are acceptable wherever a float is expected
            if not check(value):
                raise ValidationError(f"{sec}.{key}", f"{constraint}, got {value!r}")
            default = keys[key][0]
            if isinstance(default, float) and _int(value):
                merged[sec][key] = float(value)
    merged["sweep"]["voltages"] = [float(v) for v in merged["sweep"]["voltages"]]
    return merged


def from_dict(data: dict, apply_defaults: bool = True) -> ExperimentConfig:
    raw = _merge(data, apply_defaults)
    volts = raw["sweep"]["voltages"]
    if len(set(volts)) != len(volts):
        raise ValidationError("sweep.voltages", "voltages must be distinct")
    if 0.0 not in volts:
        raise ValidationError("sweep.voltages", "must contain the 0 V baseline")
    sp = raw["spectral"]
    if sp["segment_length"] > sp["sample_rate"] * sp["acquisition_time"]:
        raise ValidationError("spectral.segment_length", "longer than one acquisition")
    if sp["synth_fmax_hz"] <= sp["synth_fmin_hz"]:
        raise ValidationError("spectral.synth_fmax_hz", "must exceed synth_fmin_hz")
    if sp["synth_fmax_hz"] > sp["sample_rate"] / 2:
        raise ValidationError("spectral.synth_fmax_hz", "must not exceed the Nyquist frequency")

    t, p, n = raw["trap"], raw["particle"], raw["needle"]
    try:
        trap = TrapConfig(laser_power=t["laser_power"], wavelength=t["wavelength"],
                          waist_radius=t["waist_radius"], rayleigh_length=t["rayleigh_length"],
                          particle_radius=p["radius"], particle_density=p["density"],
                          susceptibility=t["susceptibility"], nonlinearity=t["nonlinearity"],
                          scattering_correction=t["scattering_correction"])
        needle = NeedleConfig(0.0, n["tip_distance"], n["tip_radius"], n["calibration"])
    except InvalidInput as exc:
        raise ValidationError("trap", str(exc)) from exc
    sw = raw["sweep"]
    return ExperimentConfig(
        trap=trap,
        needle=needle,
        particle_charge=p["charge_e0"] * E0,
        simulation=dict(raw["simulation"]),
        spectral=SpectralConfig(**sp),
        fitting=FittingConfig(**raw["fitting"]),
        synth=SynthConfig(**raw["synth"]),
        sweep=SweepConfig(sw["experiment_id"], sw["mode"], tuple(volts), sw["seed"],
                          sw["workers"], sw["svg"], sw["created_at"]),
        raw=raw,
    )


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # tomli >= 2.1 carries lineno/colno; older versions only the message
        raise ParseError(getattr(exc, "msg", str(exc)), getattr(exc, "lineno", None),
                         getattr(exc, "colno", None)) from exc
    return from_dict(data)


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML configuration file, filling in defaults.

    Raises
    ------
    ParseError
        Malformed TOML, with line and column.
    ValidationError
        Unknown key or violated constraint, naming ``section.key``.
    """
    return loads(Path(path).read_text())


def reference_config_path() -> Path:
    return Path(str(resources.files("levfano") / "data" / "reference.toml"))
