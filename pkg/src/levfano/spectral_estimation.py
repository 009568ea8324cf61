"""One-sided PSD estimation from trajectories and synthetic spectra with Welch statistics."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from . import __version__
from .errors import InvalidInput, TooShort
from .lineshape_fitting import CompositeModelParams, composite_model


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Uniformly gridded one-sided power spectral density.

    Attributes
    ----------
    frequency : ndarray
        Bin centres in Hz, strictly increasing and uniform.
    psd : ndarray
        Density per Hz, non-negative.
    n_averages : int
        Number of averaged periodograms K.
    resolution_bandwidth : float
        Equivalent noise bandwidth of one bin (Hz).
    provenance : dict
        Free-form description of where the data came from.
    """

    frequency: np.ndarray
    psd: np.ndarray
    n_averages: int
    resolution_bandwidth: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.frequency, dtype=float)
        s = np.asarray(self.psd, dtype=float)
        if f.ndim != 1 or f.shape != s.shape or f.size < 2:
            raise InvalidInput("frequency and psd must be 1-D arrays of equal length >= 2")
        df = np.diff(f)
        if np.any(df <= 0) or not np.allclose(df, df[0], rtol=1e-6, atol=0):
            raise InvalidInput("frequency grid must be strictly increasing and uniform")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise InvalidInput("psd values must be finite and non-negative")
        if int(self.n_averages) != self.n_averages or self.n_averages < 1:
            raise InvalidInput("n_averages must be a positive integer")
        f.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "frequency", f)
        object.__setattr__(self, "psd", s)
        object.__setattr__(self, "n_averages", int(self.n_averages))

    @property
    def bin_width(self) -> float:
        return float(self.frequency[1] - self.frequency[0])

    def band(self, f_lo: float, f_hi: float) -> "Spectrum":
        sel = (self.frequency >= f_lo) & (self.frequency <= f_hi)
        return Spectrum(self.frequency[sel], self.psd[sel], self.n_averages,
                        self.resolution_bandwidth, dict(self.provenance))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.frequency, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.psd, dtype="<f8").tobytes())
        h.update(str(self.n_averages).encode())
        return h.hexdigest()

    def to_csv(self, path, metadata_path=None):
        with open(path, "w", newline="") as fh:
            fh.write("frequency_hz,psd\n")
            np.savetxt(fh, np.column_stack([self.frequency, self.psd]), fmt="%.17g", delimiter=",")
        meta = {
            "n_averages": self.n_averages,
            "resolution_bandwidth_hz": self.resolution_bandwidth,
            "sha256": self.content_hash(),
            "code_version": __version__,
            "provenance": self.provenance,
        }
        with open(metadata_path or f"{path}.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, path, metadata_path=None) -> "Spectrum":
        with open(path) as fh:
            header = fh.readline().strip()
        if header.replace(" ", "") != "frequency_hz,psd":
            raise InvalidInput(f"{path}: expected header frequency_hz,psd")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        with open(metadata_path or f"{path}.json") as fh:
            meta = json.load(fh)
        return cls(data[:, 0].copy(), data[:, 1].copy(), meta["n_averages"],
                   meta["resolution_bandwidth_hz"], meta.get("provenance", {}))


def welch_psd(traj, segment_length: int, overlap_fraction: float = 0.5,
              window: str = "hann", detrend: str = "constant") -> Spectrum:
    """Averaged-periodogram PSD of the z series of a trajectory.

    Density scaling is one-sided, so the PSD integrates to the variance of
    the detrended signal.

    Parameters
    ----------
    traj : Trajectory
        Source of ``z`` and ``sample_interval``.
    segment_length : int
        Samples per segment.
    overlap_fraction : float
        Fraction of a segment shared with its neighbour, in [0, 1).
    """
    x = np.asarray(traj.z, dtype=float)
    nseg = int(segment_length)
    if nseg < 2 or nseg > x.size:
        raise TooShort(f"segment_length {nseg} incompatible with series of {x.size} samples")
    if not 0 <= overlap_fraction < 1:
        raise InvalidInput("overlap_fraction must lie in [0, 1)")
    noverlap = int(round(overlap_fraction * nseg))
    step = nseg - noverlap
    n_segments = 1 + (x.size - nseg) // step
    if n_segments < 2:
        raise TooShort(f"only {n_segments} segment(s) fit in {x.size} samples")

    fs = 1.0 / traj.sample_interval
    freq, psd = signal.welch(x, fs=fs, window=window, nperseg=nseg, noverlap=noverlap,
                             detrend=detrend, scaling="density", return_onesided=True)
    w = signal.get_window(window, nseg)
    enbw = fs * np.sum(w**2) / np.sum(w) ** 2
    provenance = {
        "source": "welch",
        "segment_length": nseg,
        "overlap_fraction": overlap_fraction,
        "window": window,
        "detrend": detrend,
        "sample_interval": traj.sample_interval,
        "n_samples": int(x.size),
    }
    return Spectrum(freq, psd, n_segments, float(enbw), provenance)


def acquisition_grid(sample_rate: float, acquisition_time: float, segment_length: int,
                     overlap_fraction: float = 0.5) -> tuple[float, int]:
    """Bin spacing and average count of a Welch estimate of one acquisition."""
    n = int(round(sample_rate * acquisition_time))
    step = segment_length - int(round(overlap_fraction * segment_length))
    n_segments = 1 + (n - segment_length) // step
    if n_segments < 1:
        raise TooShort("acquisition shorter than one segment")
    return sample_rate / segment_length, n_segments


def synthesize_spectrum(model: CompositeModelParams, grid_hz, n_averages: int, seed: int,
                        resolution_bandwidth: float | None = None) -> Spectrum:
    """Draw a K-average periodogram of a Gaussian process with mean ``composite_model``.

    Each bin is Gamma distributed with shape K and mean equal to the model,
    bins are independent.
    """
    grid = np.asarray(grid_hz, dtype=float)
    if n_averages < 1:
        raise InvalidInput("n_averages must be >= 1")
    mean = composite_model(2.0 * np.pi * grid, model)
    rng = np.random.Generator(np.random.PCG64(seed))
    values = rng.gamma(shape=n_averages, scale=mean / n_averages)
    if resolution_bandwidth is None:
        resolution_bandwidth = float(grid[1] - grid[0])
    provenance = {"source": "synthetic", "seed": int(seed), "model": model.to_dict()}
    return Spectrum(grid, values, n_averages, resolution_bandwidth, provenance)
