"""Command-line entry point ``levfano``.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure,
3 sweep finished with some failed points.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from ..charge_inference import VoltageSweepPoint, fit_frequency_vs_voltage
from ..errors import InvalidInput, LevFanoError, ParseError, ValidationError
from ..langevin_engine import Trajectory, simulate
from ..lineshape_fitting import FitResult, fit_fano, fit_lorentzian
from ..spectral_estimation import Spectrum, synthesize_spectrum, welch_psd
from .config import load_config, reference_config_path
from .sweep import run_sweep, synth_grid, synth_point_params

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
TWO_PI = 2.0 * np.pi

log = logging.getLogger("levfano")


def _config(args):
    cfg = load_config(args.config or reference_config_path())
    if args.seed is not None:
        cfg = cfg.with_overrides(sweep={"seed": args.seed})
    return cfg


def _seed(args, cfg):
    return args.seed if args.seed is not None else cfg.sweep.seed


def cmd_simulate(args):
    cfg = _config(args)
    traj = simulate(cfg.trap, cfg.needle.with_voltage(args.voltage), cfg.particle_charge,
                    cfg.simulation_config(_seed(args, cfg)))
    traj.to_csv(args.out)
    log.info("wrote %d samples to %s", len(traj), args.out)
    return EXIT_OK


def cmd_psd(args):
    cfg = _config(args)
    sp = cfg.spectral
    spec = welch_psd(Trajectory.from_csv(args.input), sp.segment_length, sp.overlap_fraction,
                     sp.window, sp.detrend)
    spec.to_csv(args.out)
    return EXIT_OK


def cmd_synth(args):
    cfg = _config(args)
    grid, k = synth_grid(cfg)
    spec = synthesize_spectrum(synth_point_params(cfg, args.voltage), grid, k, _seed(args, cfg))
    spec.provenance["voltage_v"] = args.voltage
    spec.to_csv(args.out)
    return EXIT_OK


def cmd_fit(args):
    cfg = _config(args)
    f = cfg.fitting
    spec = Spectrum.from_csv(args.input)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if args.baseline:
            result = fit_fano(spec, FitResult.from_json(args.baseline), gamma_el=f.gamma_el,
                              halfwidth_hz=f.halfwidth_hz, weight_range=f.weight_range,
                              max_iterations=f.max_iterations)
        else:
            result = fit_lorentzian(spec, halfwidth_hz=f.halfwidth_hz,
                                    max_iterations=f.max_iterations)
    for w in caught:
        log.warning("%s", w.message)
    result.to_json(args.out)
    return EXIT_OK


def cmd_infer(args):
    cfg = _config(args)
    data = np.loadtxt(args.input, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 3:
        raise InvalidInput("expected columns voltage_v,frequency_hz,frequency_error_hz")
    points = [VoltageSweepPoint(v, TWO_PI * f, TWO_PI * e) for v, f, e in data]
    result = fit_frequency_vs_voltage(points, cfg.trap, cfg.needle)
    result.to_json(args.out)
    return EXIT_OK


def cmd_sweep(args):
    cfg = _config(args)
    outcome = run_sweep(cfg, args.out)
    inf = outcome.report["inference"]
    if inf is not None:
        log.info("q = %.2f +/- %.2f e0, m = %.4g kg, q/m = %.3f C/kg", inf["charge_e0"],
                 inf["charge_error_e0"], inf["mass_kg"], inf["charge_to_mass_c_per_kg"])
    log.info("results in %s", outcome.directory)
    return EXIT_PARTIAL if outcome.n_failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="levfano", description="Simulate, fit and invert levitated-particle spectra.",
        epilog="exit codes: 0 ok, 1 invalid config or input, 2 runtime failure, 3 partial sweep")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, input_=False, voltage=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="TOML config (default: shipped reference)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", type=Path, required=True)
        if input_:
            p.add_argument("--input", type=Path, required=True)
        if voltage:
            p.add_argument("--voltage", type=float, default=0.0, help="needle voltage (V)")
        p.set_defaults(func=func)
        return p

    add("simulate", cmd_simulate, "integrate a trajectory, write t,z,p CSV", voltage=True)
    add("psd", cmd_psd, "Welch PSD of a trajectory CSV", input_=True)
    add("synth", cmd_synth, "synthetic spectrum at one voltage", voltage=True)
    fit = add("fit", cmd_fit, "Lorentzian fit, or Fano fit given a baseline", input_=True)
    fit.add_argument("--baseline", type=Path, help="0 V Lorentzian fit JSON; selects a Fano fit")
    add("sweep", cmd_sweep, "full voltage sweep into OUT/<experiment_id>")
    add("infer", cmd_infer, "mass and charge from a points CSV", input_=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ParseError, ValidationError, InvalidInput, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except (LevFanoError, OSError, json.JSONDecodeError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
