"""Voltage sweeps: per-point spectra and fits, then charge inference and plot data.

Output layout under ``<out>/<experiment_id>/``::

    manifest.json
    report.json
    points.csv                       fitted resonance per voltage
    spectra/<tag>.csv (+ .csv.json)
    fits/<tag>.json
    fig2_psd_overlay.csv             PSD and fitted model, 0 V and largest |V|
    fig3_fano_vs_voltage.csv
    fig4_shift_vs_voltage.csv
    fig{2,3,4}.svg                   only with sweep.svg = true
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..charge_inference import (
    VoltageSweepPoint,
    characteristic_rate,
    fano_parameter_prediction,
    fit_frequency_vs_voltage,
    needle_charge,
)
from ..errors import LevFanoError, ValidationError
from ..langevin_engine import simulate
from ..lineshape_fitting import (
    CompositeModelParams,
    FitResult,
    LorentzianParams,
    _json_floats,
    composite_model,
    fit_fano,
    fit_lorentzian,
    lorentzian_model,
)
from ..physics_core import E0, frequency_shift_model
from ..spectral_estimation import acquisition_grid, synthesize_spectrum, welch_psd
from .config import ExperimentConfig, from_dict, manifest_for

TWO_PI = 2.0 * math.pi


class SweepFailed(LevFanoError):
    """The zero-voltage baseline could not be fitted."""


@dataclass(frozen=True)
class SweepOutcome:
    directory: Path
    report: dict
    n_failed: int


def synth_grid(cfg: ExperimentConfig):
    """Bin centres (Hz) and average count of one synthetic acquisition."""
    sp = cfg.spectral
    df, k = acquisition_grid(sp.sample_rate, sp.acquisition_time, sp.segment_length,
                             sp.overlap_fraction)
    lo = math.ceil(sp.synth_fmin_hz / df)
    hi = math.floor(sp.synth_fmax_hz / df)
    return df * np.arange(lo, hi + 1), k


def synth_point_params(cfg: ExperimentConfig, voltage: float) -> CompositeModelParams:
    """Line-shape of the synthetic experiment at one needle voltage.

    The resonance follows the linearized shift model, the Fano parameter is
    ``branch * e0^2 / (q Q)``, and a fixed fraction of the baseline weight is
    moved from the Lorentzian into the Fano term so that the on-resonance
    numerator is unchanged. The baseline peak is normalized to one.
    """
    s = cfg.synth
    q = cfg.particle_charge
    needle = cfg.needle.with_voltage(voltage)
    gamma = TWO_PI * s.linewidth_hz
    omega_base = float(frequency_shift_model(cfg.trap.mass, 0.0, cfg.trap, needle))
    weight = (omega_base * gamma) ** 2
    omega_m = float(frequency_shift_model(cfg.trap.mass, q * needle.charge, cfg.trap, needle))
    g_el = TWO_PI * s.gamma_el_hz
    if voltage == 0 or q == 0 or s.fano_fraction == 0:
        return CompositeModelParams(s.floor, weight, 0.0, omega_m, gamma, 0.0, g_el)
    fano = fano_parameter_prediction(q, needle.charge, s.fano_branch)
    offset = fano * g_el**2
    return CompositeModelParams(s.floor, (1.0 - s.fano_fraction) * weight,
                                s.fano_fraction * weight / offset**2, omega_m, gamma, fano, g_el)


def _tag(index: int, voltage: float) -> str:
    return f"p{index:03d}_{voltage:+09.1f}V"


def _spectrum_for(cfg: ExperimentConfig, voltage: float, seed: int):
    if cfg.sweep.mode == "synth":
        grid, k = synth_grid(cfg)
        spec = synthesize_spectrum(synth_point_params(cfg, voltage), grid, k, seed)
    else:
        traj = simulate(cfg.trap, cfg.needle.with_voltage(voltage), cfg.particle_charge,
                        cfg.simulation_config(seed))
        sp = cfg.spectral
        spec = welch_psd(traj, sp.segment_length, sp.overlap_fraction, sp.window, sp.detrend)
    spec.provenance["voltage_v"] = voltage
    return spec


def _fit_for(cfg: ExperimentConfig, spec, baseline: FitResult | None) -> FitResult:
    f = cfg.fitting
    with warnings.catch_warnings():
        # non-convergence is carried in the result flag
        warnings.simplefilter("ignore")
        if baseline is None or cfg.sweep.mode == "sim":
            return fit_lorentzian(spec, halfwidth_hz=f.halfwidth_hz, max_iterations=f.max_iterations)
        return fit_fano(spec, baseline, gamma_el=f.gamma_el, halfwidth_hz=f.halfwidth_hz,
                        weight_range=f.weight_range, max_iterations=f.max_iterations)


def _run_point(job) -> dict:
    raw, index, voltage, seed, baseline, directory = job
    cfg = from_dict(raw, apply_defaults=False)
    base = FitResult.from_dict(baseline) if baseline is not None else None
    tag = _tag(index, voltage)
    record = {"index": index, "voltage_v": voltage, "seed": seed, "status": "failed"}
    try:
        spec = _spectrum_for(cfg, voltage, seed)
        spec_rel = f"spectra/{tag}.csv"
        spec.to_csv(Path(directory) / spec_rel)
        record["spectrum"] = spec_rel
        record["spectrum_metadata"] = spec_rel + ".json"
        fit = _fit_for(cfg, spec, base)
        fit_rel = f"fits/{tag}.json"
        fit.to_json(Path(directory) / fit_rel)
        record["fit"] = fit_rel
    except LevFanoError as exc:
        record["error"] = {"type": type(exc).__name__, "message": str(exc)}
        return record
    se = fit.standard_errors
    p = fit.params
    record.update({
        "status": "ok",
        "kind": fit.kind,
        "f_m_hz": p.omega_m / TWO_PI,
        "f_m_error_hz": se["omega_m"] / TWO_PI,
        "chi2_per_dof": fit.chi2_per_dof,
        "converged": fit.converged,
        "n_iterations": fit.n_iterations,
        "fit_result": fit.to_dict(),
    })
    if fit.kind == "fano":
        record["fano_param"] = p.fano_param
        record["fano_param_error"] = se["fano_param"]
        record["dip_offset"] = p.dip_offset
        record["dip_frequency_hz"] = p.dip_omega / TWO_PI
    return record


def _map(jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(_run_point, jobs))
    return [_run_point(j) for j in jobs]


def _loglog_slope(volts, values, errors):
    """Weighted slope of log|value| against log|V| and its standard error."""
    x = np.log(np.abs(volts))
    y = np.log(np.abs(values))
    s = np.abs(errors / values)
    if x.size < 2 or np.ptp(x) == 0:
        return None
    if not np.all(np.isfinite(s) & (s > 0)):
        s = np.ones_like(x)
    design = np.column_stack([np.ones_like(x), x]) / s[:, None]
    coef, *_ = np.linalg.lstsq(design, y / s, rcond=None)
    cov = np.linalg.inv(design.T @ design)
    return {"slope": float(coef[1]), "slope_error": float(math.sqrt(cov[1, 1])),
            "n_points": int(x.size)}


def _infer(cfg: ExperimentConfig, ok: list[dict]):
    points = [VoltageSweepPoint(r["voltage_v"], TWO_PI * r["f_m_hz"], TWO_PI * r["f_m_error_hz"])
              for r in ok if math.isfinite(r["f_m_error_hz"]) and r["f_m_error_hz"] > 0]
    if len(points) < 3:
        return None, f"{len(points)} usable points, need at least 3"
    try:
        return fit_frequency_vs_voltage(points, cfg.trap, cfg.needle), None
    except LevFanoError as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _write_csv(path: Path, header: list[str], rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join("" if v is None else repr(float(v)) for v in row) + "\n")


def _model_curve(fit: dict, freq):
    omega = TWO_PI * np.asarray(freq)
    if fit["kind"] == "lorentzian":
        return lorentzian_model(omega, LorentzianParams(**fit["params"]))
    return composite_model(omega, CompositeModelParams(**fit["params"]))


def _figures(cfg, directory: Path, records: list[dict], inference, branch):
    ok = [r for r in records if r["status"] == "ok"]
    base = next(r for r in ok if r["voltage_v"] == 0.0)
    outputs = []

    top = max((r for r in ok if r["voltage_v"] != 0.0), key=lambda r: abs(r["voltage_v"]),
              default=None)
    data0 = np.loadtxt(directory / base["spectrum"], delimiter=",", skiprows=1)
    header = ["frequency_hz", "psd_0v", "model_0v"]
    cols = [data0[:, 0], data0[:, 1], _model_curve(base["fit_result"], data0[:, 0])]
    if top is not None:
        data1 = np.loadtxt(directory / top["spectrum"], delimiter=",", skiprows=1)
        tag = f"{top['voltage_v']:+g}v"
        header += [f"psd_{tag}", f"model_{tag}"]
        cols += [data1[:, 1], _model_curve(top["fit_result"], data1[:, 0])]
    _write_csv(directory / "fig2_psd_overlay.csv", header, zip(*cols))
    outputs.append("fig2_psd_overlay.csv")

    fano_rows = []
    for r in ok:
        if "fano_param" not in r:
            continue
        pred = None
        if inference is not None:
            Q = needle_charge(r["voltage_v"], cfg.needle.tip_radius, cfg.needle.calibration)
            pred = fano_parameter_prediction(inference.charge, Q, branch)
        fano_rows.append((r["voltage_v"], r["fano_param"], r["fano_param_error"], pred))
    _write_csv(directory / "fig3_fano_vs_voltage.csv",
               ["voltage_v", "fano_param", "fano_param_error", "predicted_fano_param"], fano_rows)
    outputs.append("fig3_fano_vs_voltage.csv")

    shift_rows = []
    for r in ok:
        model = None
        if inference is not None:
            needle = cfg.needle.with_voltage(r["voltage_v"])
            w = frequency_shift_model(inference.mass, inference.charge * needle.charge, cfg.trap, needle)
            w0 = frequency_shift_model(inference.mass, 0.0, cfg.trap, needle)
            model = (w - w0) / TWO_PI
        shift_rows.append((r["voltage_v"], r["f_m_hz"] - base["f_m_hz"],
                           math.hypot(r["f_m_error_hz"], base["f_m_error_hz"]), model))
    _write_csv(directory / "fig4_shift_vs_voltage.csv",
               ["voltage_v", "delta_f_hz", "delta_f_error_hz", "model_delta_f_hz"], shift_rows)
    outputs.append("fig4_shift_vs_voltage.csv")

    if cfg.sweep.svg:
        outputs += _svg(directory, header, cols, fano_rows, shift_rows)
    return outputs


def _svg(directory, header, cols, fano_rows, shift_rows):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "levfano"
    meta = {"Date": None, "Creator": f"levfano {__version__}"}
    names = []

    fig, ax = plt.subplots(figsize=(6, 4))
    f = np.asarray(cols[0]) / 1e3
    for i in range(1, len(cols), 2):
        ax.semilogy(f, cols[i], lw=0.6, label=header[i])
        ax.semilogy(f, cols[i + 1], lw=1.2, label=header[i + 1])
    ax.set_xlabel("frequency (kHz)")
    ax.set_ylabel("PSD (arb.)")
    ax.legend(fontsize=7)
    fig.savefig(directory / "fig2.svg", metadata=meta)
    plt.close(fig)
    names.append("fig2.svg")

    if fano_rows:
        v, fp, fe, _ = (np.array(c, dtype=float) for c in zip(*fano_rows))
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.errorbar(np.abs(v) / 1e3, np.abs(fp), yerr=fe, fmt="o")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("|V| (kV)")
        ax.set_ylabel("|Fano parameter|")
        fig.savefig(directory / "fig3.svg", metadata=meta)
        plt.close(fig)
        names.append("fig3.svg")

    v, d, e, _ = (np.array(c, dtype=float) for c in zip(*shift_rows))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(v / 1e3, d, yerr=e, fmt="o")
    ax.set_xlabel("V (kV)")
    ax.set_ylabel("frequency shift (Hz)")
    fig.savefig(directory / "fig4.svg", metadata=meta)
    plt.close(fig)
    names.append("fig4.svg")
    return names


def run_sweep(cfg: ExperimentConfig, out_dir) -> SweepOutcome:
    """Run every voltage point, infer (m, q) and write the experiment directory.

    Raises
    ------
    ValidationError
        If the target directory already holds a different manifest.
    SweepFailed
        If the 0 V baseline point fails.
    """
    manifest = manifest_for(cfg)
    directory = Path(out_dir) / cfg.sweep.experiment_id
    old = directory / "manifest.json"
    if old.exists():
        with open(old) as fh:
            previous = json.load(fh).get("manifest_sha256")
        if previous != manifest.hash():
            raise ValidationError("sweep.experiment_id",
                                  f"{directory} already holds a different experiment")
    (directory / "spectra").mkdir(parents=True, exist_ok=True)
    (directory / "fits").mkdir(exist_ok=True)

    volts = list(cfg.sweep.voltages)
    seeds = list(manifest.seeds)
    i0 = volts.index(0.0)
    raw = cfg.raw
    if cfg.sweep.mode == "synth":
        base = _run_point((raw, i0, 0.0, seeds[i0], None, str(directory)))
        if base["status"] != "ok" or not base["converged"]:
            raise SweepFailed(f"baseline fit failed: {base.get('error', 'not converged')}")
        jobs = [(raw, i, v, seeds[i], base["fit_result"], str(directory))
                for i, v in enumerate(volts) if i != i0]
        rest = _map(jobs, cfg.sweep.workers)
        records = sorted([base] + rest, key=lambda r: r["index"])
    else:
        jobs = [(raw, i, v, seeds[i], None, str(directory)) for i, v in enumerate(volts)]
        records = _map(jobs, cfg.sweep.workers)
        if records[i0]["status"] != "ok":
            raise SweepFailed(f"baseline fit failed: {records[i0].get('error')}")

    ok = [r for r in records if r["status"] == "ok"]
    inference, reason = _infer(cfg, ok) if len(volts) > 1 else (None, "baseline-only sweep")

    fano_ok = [r for r in ok if "fano_param" in r]
    branch = 1
    fano_scaling = gamma_el_est = None
    if fano_ok:
        fv = np.array([r["voltage_v"] for r in fano_ok])
        fp = np.array([r["fano_param"] for r in fano_ok])
        fe = np.array([r["fano_param_error"] for r in fano_ok])
        fano_scaling = _loglog_slope(fv, fp, fe)
        if inference is not None:
            charges = np.array([needle_charge(v, cfg.needle.tip_radius, cfg.needle.calibration)
                                for v in fv])
            # the branch actually realized by the data
            branch = 1 if np.median(np.sign(fp * inference.charge * charges)) >= 0 else -1
            rates = np.array([characteristic_rate(r["dip_offset"], inference.charge, Q)
                              for r, Q in zip(fano_ok, charges)])
            gamma_el_est = {"mean_hz": float(np.mean(rates) / TWO_PI),
                            "std_hz": float(np.std(rates) / TWO_PI), "n_points": int(rates.size)}

    _write_csv(directory / "points.csv", ["voltage_v", "frequency_hz", "frequency_error_hz"],
               [(r["voltage_v"], r["f_m_hz"], r["f_m_error_hz"]) for r in ok])
    outputs = [r[k] for r in records for k in ("spectrum", "spectrum_metadata", "fit") if k in r]
    outputs += ["points.csv"]
    outputs += _figures(cfg, directory, records, inference, branch)

    for r in records:
        r.pop("fit_result", None)
    n_failed = len(records) - len(ok)
    report = {
        "experiment_id": cfg.sweep.experiment_id,
        "manifest_sha256": manifest.hash(),
        "mode": cfg.sweep.mode,
        "code_version": __version__,
        "n_points": len(records),
        "n_failed": n_failed,
        "points": _json_floats(records),
        "inference": inference.to_dict() if inference is not None else None,
        "inference_skipped": reason,
        "fano_scaling": fano_scaling,
        "fano_branch": branch if fano_ok and inference is not None else None,
        "gamma_el_estimate": gamma_el_est,
        "true_values": {
            "charge_e0": cfg.particle_charge / E0,
            "mass_kg": cfg.trap.mass,
            "charge_to_mass_c_per_kg": cfg.particle_charge / cfg.trap.mass,
        },
    }
    with open(directory / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    outputs.append("report.json")

    final = manifest.to_dict()
    final["outputs"] = sorted(outputs)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(final, fh, indent=2, sort_keys=True)
    return SweepOutcome(directory, report, n_failed)
