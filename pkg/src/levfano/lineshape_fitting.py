"""Lorentzian and Fano line-shapes of the axial PSD and their least-squares fits.

Models are evaluated in angular frequency; spectra carry Hz grids and are
converted on entry. Fits minimise log-space residuals weighted by the Gamma
statistics of a K-average periodogram:

    E[ln S_hat] = ln S + digamma(K) - ln K,   Var[ln S_hat] = trigamma(K)

The Fano numerator depends on the Fano parameter f and the rate gamma_el
only through the dip offset a = f * gamma_el**2, so a single spectrum fixes
``a`` but not the split between its factors. ``fit_fano`` therefore takes an
optional known ``gamma_el``; without it both factors are fitted and their
standard errors come out infinite.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.special import digamma, polygamma

from . import __version__
from .errors import InvalidInput, NoDip, NoPeak, NotConvergedWarning

TWO_PI = 2.0 * math.pi
DEFAULT_HALFWIDTH_HZ = 10e3


@dataclass(frozen=True)
class LorentzianParams:
    omega_m: float
    gamma: float
    amplitude: float
    floor: float = 0.0

    def __post_init__(self):
        if not (self.omega_m > 0 and self.gamma > 0 and self.amplitude > 0 and self.floor >= 0):
            raise InvalidInput(f"invalid Lorentzian parameters {self}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class CompositeModelParams:
    """Parameters of ``A + B S_coll + C S_el``; rates in rad/s."""

    floor: float
    lorentzian_weight: float
    fano_weight: float
    omega_m: float
    gamma: float
    fano_param: float
    gamma_el: float

    def __post_init__(self):
        if not (self.gamma > 0 and self.gamma_el > 0 and self.omega_m > 0):
            raise InvalidInput("omega_m, gamma and gamma_el must be positive")
        if min(self.floor, self.lorentzian_weight, self.fano_weight) < 0:
            raise InvalidInput("weights must be non-negative")
        if not math.isfinite(self.fano_param):
            raise InvalidInput("fano_param must be finite")

    @property
    def dip_offset(self) -> float:
        """f * gamma_el**2, the shift of the anti-resonance in omega**2."""
        return self.fano_param * self.gamma_el**2

    @property
    def dip_omega(self) -> float:
        r = self.omega_m**2 + self.dip_offset
        return math.sqrt(r) if r > 0 else math.nan

    def equivalent_lorentzian(self) -> LorentzianParams:
        """Standard Lorentzian with the same floor, resonance and on-resonance numerator."""
        return LorentzianParams(self.omega_m, self.gamma,
                                self.lorentzian_weight + self.fano_weight * self.dip_offset**2,
                                self.floor)

    def to_dict(self):
        return asdict(self)


def lorentzian_kernel(omega, omega_m, gamma):
    w2 = np.square(omega)
    return 1.0 / (w2 * gamma**2 + (w2 - omega_m**2) ** 2)


def lorentzian_model(omega, p: LorentzianParams):
    return p.floor + p.amplitude * lorentzian_kernel(omega, p.omega_m, p.gamma)


def fano_model(omega, p: CompositeModelParams):
    """Unweighted Fano kernel; tends to 1 far from resonance and vanishes at ``dip_omega``."""
    x = np.square(omega) - p.omega_m**2
    return (x - p.dip_offset) ** 2 * lorentzian_kernel(omega, p.omega_m, p.gamma)


def composite_model(omega, p: CompositeModelParams):
    x = np.square(omega) - p.omega_m**2
    numerator = p.lorentzian_weight + p.fano_weight * (x - p.dip_offset) ** 2
    return p.floor + numerator * lorentzian_kernel(omega, p.omega_m, p.gamma)


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of a line-shape fit.

    ``standard_errors`` holds only fitted parameters; held ones are listed in
    ``fixed``. An infinite error marks a direction the data cannot constrain.
    """

    kind: str
    params: LorentzianParams | CompositeModelParams
    standard_errors: dict
    chi2_per_dof: float
    n_iterations: int
    converged: bool
    covariance: dict = field(default_factory=dict)
    fixed: tuple = ()
    diagnostics: dict = field(default_factory=dict)
    spectrum_hash: str = ""

    def to_dict(self) -> dict:
        p = self.params
        hz = {"f_m_hz": p.omega_m / TWO_PI, "linewidth_hz": p.gamma / TWO_PI}
        if isinstance(p, CompositeModelParams):
            hz["gamma_el_hz"] = p.gamma_el / TWO_PI
            hz["dip_frequency_hz"] = p.dip_omega / TWO_PI if math.isfinite(p.dip_omega) else None
        return {
            "kind": self.kind,
            "params": p.to_dict(),
            "hz": hz,
            "standard_errors": _json_floats(self.standard_errors),
            "covariance": _json_floats(self.covariance),
            "fixed": list(self.fixed),
            "chi2_per_dof": self.chi2_per_dof,
            "n_iterations": self.n_iterations,
            "converged": self.converged,
            "diagnostics": _json_floats(self.diagnostics),
            "spectrum_sha256": self.spectrum_hash,
            "code_version": __version__,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "FitResult":
        kind = d["kind"]
        ptype = LorentzianParams if kind == "lorentzian" else CompositeModelParams
        return cls(kind, ptype(**d["params"]), _from_json_floats(d["standard_errors"]),
                   d["chi2_per_dof"], d["n_iterations"], d["converged"],
                   _from_json_floats(d.get("covariance", {})), tuple(d.get("fixed", ())),
                   _from_json_floats(d.get("diagnostics", {})), d.get("spectrum_sha256", ""))

    @classmethod
    def from_json(cls, path) -> "FitResult":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _json_floats(obj):
    if isinstance(obj, dict):
        return {k: _json_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_floats(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _from_json_floats(obj):
    if isinstance(obj, dict):
        return {k: _from_json_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_json_floats(v) for v in obj]
    if obj in ("inf", "-inf", "nan"):
        return float(obj)
    return obj


# ---------------------------------------------------------------- helpers

def _log_stats(k):
    return float(digamma(k) - math.log(k)), float(math.sqrt(polygamma(1, k)))


def _smooth(y, width=5):
    """Moving average, renormalised at the edges."""
    kernel = np.ones(max(1, min(width, y.size)))
    return np.convolve(y, kernel, mode="same") / np.convolve(np.ones_like(y), kernel, mode="same")


def _select_band(spectrum, window, halfwidth_hz):
    f = spectrum.frequency
    if window is None:
        i = int(np.argmax(_smooth(spectrum.psd)))
        window = (f[i] - halfwidth_hz, f[i] + halfwidth_hz)
    f_lo, f_hi = window
    sel = (f >= f_lo) & (f <= f_hi) & (f > 0)
    return f[sel], np.maximum(spectrum.psd[sel], np.finfo(float).tiny), tuple(window)


def _peak_guess(freq, psd, k):
    """Initial Lorentzian parameters from the smoothed band."""
    n = psd.size
    sm = _smooth(psd)
    i_pk = int(np.argmax(sm))
    edge = max(2, n // 20)
    floor0 = float(min(np.median(psd[:edge]), np.median(psd[-edge:])))
    if i_pk < 2 or i_pk > n - 3:
        raise NoPeak("maximum sits at the band edge")
    if sm[i_pk] < floor0 * (1.0 + 8.0 / math.sqrt(k * 5)):
        raise NoPeak("no peak stands out of the noise")
    height = sm[i_pk] - floor0
    half = floor0 + 0.5 * height
    lo = i_pk
    while lo > 0 and sm[lo] > half:
        lo -= 1
    hi = i_pk
    while hi < n - 1 and sm[hi] > half:
        hi += 1
    width_hz = max(freq[hi] - freq[lo], freq[1] - freq[0])
    omega_m = TWO_PI * freq[i_pk]
    gamma = TWO_PI * width_hz
    return omega_m, gamma, height * (omega_m * gamma) ** 2, max(floor0, 1e-300)


def _jacobian(fun, theta, step=1e-6):
    theta = np.asarray(theta, dtype=float)
    cols = []
    for i in range(theta.size):
        h = step * max(1.0, abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        cols.append((fun(tp) - fun(tm)) / (2.0 * h))
    return np.column_stack(cols)


def _run_lm(residual, theta0, max_iterations):
    res = least_squares(residual, theta0, jac=lambda t: _jacobian(residual, t), method="lm",
                        xtol=1e-8, gtol=1e-10, ftol=1e-12, max_nfev=max_iterations)
    converged = res.status > 0
    if not converged:
        warnings.warn(f"fit not converged after {res.njev} iterations", NotConvergedWarning,
                      stacklevel=3)
    return res, converged


def _natural_covariance(jac, transform_jac, names):
    """Delta-method covariance of natural parameters; null directions become infinite."""
    jtj = jac.T @ jac
    s, v = np.linalg.eigh(jtj)
    null = s <= 1e-12 * max(s.max(), 1e-300)
    inv = (v[:, ~null] / s[~null]) @ v[:, ~null].T
    cov = transform_jac @ inv @ transform_jac.T
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    corr = np.divide(cov, np.outer(se, se), out=np.zeros_like(cov), where=np.outer(se, se) > 0)
    for w in v[:, null].T:
        # judge the null direction in fit coordinates, where all scales are O(1)
        cols = np.abs(w) > 1e-3 * np.abs(w).max()
        u = transform_jac[:, cols] @ w[cols]
        hit = np.any(transform_jac[:, cols] != 0, axis=1)
        se[hit] = np.inf
        for i in np.flatnonzero(hit):
            for j in np.flatnonzero(hit):
                corr[i, j] = np.sign(u[i] * u[j])
    out = {}
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            if j > i:
                out[f"{a},{b}"] = float(corr[i, j])
    return dict(zip(names, map(float, se))), {"correlation": out}


# ---------------------------------------------------------------- fits

def fit_lorentzian(spectrum, window=None, *, halfwidth_hz=DEFAULT_HALFWIDTH_HZ,
                   max_iterations=200) -> FitResult:
    """Fit ``floor + amplitude / (w^2 G^2 + (w^2 - w_m^2)^2)`` inside a frequency band.

    Parameters
    ----------
    spectrum : Spectrum
    window : (float, float), optional
        Band in Hz. Defaults to the smoothed maximum plus/minus ``halfwidth_hz``.

    Raises
    ------
    NoPeak
        If the maximum lies on the band edge, does not rise out of the noise,
        or the fitted centre falls outside the data.
    """
    freq, psd, window = _select_band(spectrum, window, halfwidth_hz)
    if freq.size < 50:
        raise InvalidInput(f"band holds {freq.size} bins, need at least 50")
    k = spectrum.n_averages
    bias, sigma = _log_stats(k)
    omega = TWO_PI * freq
    log_y = np.log(psd)
    theta0 = np.log(_peak_guess(freq, psd, k))

    def model(theta):
        om, g, amp, fl = np.exp(theta)
        return fl + amp * lorentzian_kernel(omega, om, g)

    def residual(theta):
        return (log_y - np.log(model(theta)) - bias) / sigma

    res, converged = _run_lm(residual, theta0, max_iterations)
    values = np.exp(res.x)
    params = LorentzianParams(*map(float, values))
    if not freq[0] < params.omega_m / TWO_PI < freq[-1]:
        raise NoPeak("fitted resonance lies outside the data")
    jac = _jacobian(residual, res.x)
    names = ("omega_m", "gamma", "amplitude", "floor")
    se, cov = _natural_covariance(jac, np.diag(values), names)
    dof = max(freq.size - len(names), 1)
    return FitResult("lorentzian", params, se, float(res.fun @ res.fun / dof), int(res.njev),
                     converged, cov, (), {"window_hz": list(window), "n_bins": int(freq.size)},
                     spectrum.content_hash())


def find_dips(freq, psd, reference, threshold=0.5, width=5):
    """Contiguous regions where the smoothed data fall below ``threshold * reference``.

    Returns a list of ``(frequency_hz, ratio)`` at each region's deepest point,
    deepest first.
    """
    ratio = _smooth(psd, width) / reference
    below = ratio < threshold
    dips = []
    i = 0
    while i < below.size:
        if below[i]:
            j = i
            while j < below.size and below[j]:
                j += 1
            k = i + int(np.argmin(ratio[i:j]))
            dips.append((float(freq[k]), float(ratio[k])))
            i = j
        else:
            i += 1
    return sorted(dips, key=lambda d: d[1])


def fit_fano(spectrum, baseline: FitResult, window=None, *, gamma_el=None,
             halfwidth_hz=DEFAULT_HALFWIDTH_HZ, weight_range=10.0,
             max_iterations=200) -> FitResult:
    """Fit the composite Lorentzian + Fano model seeded by a zero-voltage fit.

    The floor and linewidth are held at the baseline values; the resonance,
    Lorentzian weight (within ``weight_range`` of baseline either way), Fano
    weight and dip offset are fitted. The sign of the Fano parameter follows
    the side of the deepest dip relative to the peak.

    Parameters
    ----------
    spectrum : Spectrum
    baseline : FitResult
        Converged Lorentzian fit of the uncharged-needle spectrum.
    window : (float, float), optional
        Band in Hz; defaults to the peak plus/minus ``halfwidth_hz``.
    gamma_el : float, optional
        Known characteristic rate (rad/s). When given, only the Fano parameter
        is fitted; otherwise both are, and their product alone is constrained.

    Raises
    ------
    NoDip
        If no smoothed bin falls below half of the baseline line-shape
        re-centred on the current peak.
    """
    if baseline.kind != "lorentzian" or not baseline.converged:
        raise InvalidInput("fit_fano needs a converged Lorentzian baseline")
    b = baseline.params
    freq, psd, window = _select_band(spectrum, window, halfwidth_hz)
    if freq.size < 50:
        raise InvalidInput(f"band holds {freq.size} bins, need at least 50")
    k = spectrum.n_averages
    bias, sigma = _log_stats(k)
    omega = TWO_PI * freq
    log_y = np.log(psd)

    sm = _smooth(psd)
    i_pk = int(np.argmax(sm))
    omega_c = omega[i_pk]
    reference = lorentzian_model(omega, LorentzianParams(omega_c, b.gamma, b.amplitude, b.floor))
    dips = find_dips(freq, psd, reference)
    if not dips:
        raise NoDip("no bin falls below half of the baseline line-shape")
    f_dip, ratio_dip = dips[0]
    dip_offset0 = (TWO_PI * f_dip) ** 2 - omega_c**2
    sign = 1.0 if dip_offset0 > 0 else -1.0

    log_range = math.log10(weight_range)
    b_init = min(max(ratio_dip, 1.02 / weight_range), 0.98 * weight_range) * b.amplitude
    numerator0 = max(sm[i_pk] - b.floor, 0.0) * (omega_c * b.gamma) ** 2
    c_init = max(numerator0 - b_init, 0.1 * numerator0) / dip_offset0**2
    theta0 = [math.log(omega_c), math.atanh(math.log10(b_init / b.amplitude) / log_range),
              math.log(c_init), math.log(abs(dip_offset0))]
    free_gamma = gamma_el is None
    if free_gamma:
        # the data carry no scale for the split; start at |f| = 1
        theta0.append(0.5 * math.log(abs(dip_offset0)))
    theta0 = np.array(theta0)

    def unpack(theta):
        om = math.exp(theta[0])
        bw = b.amplitude * 10.0 ** (log_range * math.tanh(theta[1]))
        cw = math.exp(theta[2])
        a = sign * math.exp(theta[3])
        g_el = math.exp(theta[4]) if free_gamma else gamma_el
        return om, bw, cw, a, g_el

    def residual(theta):
        om, bw, cw, a, _ = unpack(theta)
        x = omega**2 - om**2
        model = b.floor + (bw + cw * (x - a) ** 2) * lorentzian_kernel(omega, om, b.gamma)
        return (log_y - np.log(model) - bias) / sigma

    res, converged = _run_lm(residual, theta0, max_iterations)
    om, bw, cw, a, g_el = unpack(res.x)
    params = CompositeModelParams(b.floor, bw, cw, om, b.gamma, a / g_el**2, g_el)

    # natural parameters and their derivatives w.r.t. theta
    names = ["omega_m", "lorentzian_weight", "fano_weight", "dip_offset", "fano_param"]
    n = res.x.size
    t = np.zeros((len(names) + free_gamma, n))
    t[0, 0] = om
    t[1, 1] = bw * log_range * math.log(10.0) * (1.0 - math.tanh(res.x[1]) ** 2)
    t[2, 2] = cw
    t[3, 3] = a
    t[4, 3] = params.fano_param
    if free_gamma:
        names.append("gamma_el")
        t[4, 4] = -2.0 * params.fano_param
        t[5, 4] = g_el
    jac = _jacobian(residual, res.x)
    se, cov = _natural_covariance(jac, t, names)
    dof = max(freq.size - n, 1)
    fixed = ("floor", "gamma") + (() if free_gamma else ("gamma_el",))
    diagnostics = {
        "window_hz": list(window),
        "n_bins": int(freq.size),
        "dip_candidates_hz": [d[0] for d in dips],
        "dip_candidate_ratios": [d[1] for d in dips],
        "lorentzian_weight_at_bound": bool(abs(math.tanh(res.x[1])) > 0.999),
    }
    return FitResult("fano", params, se, float(res.fun @ res.fun / dof), int(res.njev),
                     converged, cov, fixed, diagnostics, spectrum.content_hash())
