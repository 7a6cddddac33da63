import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from ..__about__ import __version__
from ..fit import ObjectiveMode, ParamGrid, grid_search
from ..ipcurve import DESCRIPTOR_DEFINITION, IpCurveError, aggregate_descriptors, descriptors, ip_curve, mean_curve
from ..metrics import anova_oneway, ellipse_95, weld_score
from ..sim import batch_summary, run_batch
from ..spectral import BandSpec, PsdCurve, psd
from .config import load_run_config, run_config_from_dict
from .ingest import (
    parse_forceplate_csv,
    parse_imu_csv,
    read_curve_csv,
    read_groups_csv,
    read_json,
    read_palette,
    read_ppm,
    read_trial_csv,
    write_curve_csv,
    write_json,
    write_manifest,
    write_psd_csv,
    write_trial_csv,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INPUT_MISSING = 2
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -----------------------------------------------------------------------------
# cmd_simulate
# -----------------------------------------------------------------------------


def cmd_simulate(config, n_trials, out_dir, n_jobs=None, silent=True):
    """Run a batch and write one CSV per trial plus `manifest.json`.

    Parameters
    ----------
    config : RunConfig
        Model, controller, protocol and seed.
    n_trials : int
        Number of trials.
    out_dir : str or pathlib.Path
        Output directory, created if needed.
    n_jobs : int, optional
        joblib workers. Defaults to IPLAB_THREADS or all cores.
    silent : bool
        Defaults to True.

    Returns
    -------
    manifest : dict
        Config echo, seeds, failures and file names.
    """

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trials = run_batch(config.model, config.lqr, config.noise, config.sim, n_trials, n_jobs=n_jobs, silent=silent)

    files = []
    for series in trials:
        name = f"trial_{series.trial_index:03d}.csv"
        write_trial_csv(out_dir / name, series)
        files.append(name)

    manifest = {
        "iplab_version": __version__,
        "config": config.to_dict(),
        "reference_height": config.reference_height,
        "seeds": {
            "base_seed": config.seed,
            "derivation": "numpy SeedSequence(base_seed, spawn_key=(trial_index,))",
            "spawn_keys": [[s.trial_index] for s in trials],
        },
        "batch": batch_summary(trials),
        "files": files,
    }
    write_manifest(out_dir / "manifest.json", manifest)
    return manifest


# -----------------------------------------------------------------------------
# cmd_analyze
# -----------------------------------------------------------------------------


def _analyze_directory(path, config, mode, reference_height):
    manifest = read_json(path / "manifest.json")
    if not isinstance(manifest, dict) or not isinstance(manifest.get("files"), list):
        raise ValueError(f"{path / 'manifest.json'}: expected an object with a 'files' list")
    if config is None:
        if "config" not in manifest:
            raise ValueError(f"{path / 'manifest.json'}: missing the 'config' entry, pass --config")
        config = run_config_from_dict(manifest["config"])
    if reference_height is None:
        reference_height = manifest.get("reference_height", config.reference_height)
    failed = set(manifest.get("batch", {}).get("failed_indices", []))

    curves, spectra, cops, accels = [], [], [], []
    for index, name in enumerate(manifest["files"]):
        if index in failed:
            continue
        series = read_trial_csv(path / name, trial_index=index)
        bands = BandSpec(config.bands.centers, config.bands.width, series.sample_rate)
        try:
            curves.append(ip_curve(series.cop_x, series.grf, bands, reference_height))
        except IpCurveError as err:
            warnings.warn(f"{name} skipped: {err}", stacklevel=2)
            continue
        spectra.append(psd(series.cop_x, series.sample_rate))
        cops.append(series.cop_x)
        accels.append(series.com_accel[:, 0])
    if not curves:
        raise IpCurveError(f"no usable trial in '{path}'")

    spectrum = PsdCurve(spectra[0].frequencies, np.mean([s.power for s in spectra], axis=0))
    curve = mean_curve(curves)
    return config, curve, spectrum, {
        "ip_curve": curve.to_dict(),
        "descriptors": aggregate_descriptors(curves, mode).to_dict(),
        "descriptor_mode": mode,
        "n_trials_used": len(curves),
        "psd": spectrum.to_dict(),
        "sway_ellipse": {
            **ellipse_95(np.concatenate(cops), np.concatenate(accels)).to_dict(),
            "axes": ["copx_m", "comax_mps2"],
        },
    }


def cmd_analyze(forceplate, imu=None, config=None, out_dir=None, mode="pooled", reference_height=None):
    """IP curve, descriptors, COP spectrum and ellipses of a record.

    Parameters
    ----------
    forceplate : str or pathlib.Path
        Force-plate CSV, or a directory written by cmd_simulate (its trial
        curves are averaged and `mode` selects pooled or per-subject
        descriptors).
    imu : str or pathlib.Path, optional
        IMU CSV; adds the acceleration ellipse. Defaults to None.
    config : RunConfig, optional
        Band bank and reference height. Defaults to the stance defaults, or the
        config echoed in the simulation manifest.
    out_dir : str or pathlib.Path, optional
        If given, `report.json`, `ip_curve.csv` and `psd.csv` are written there.
    mode : str
        "pooled" or "per-subject". Defaults to "pooled".
    reference_height : float, optional
        Overrides the config reference height (m).

    Returns
    -------
    report : dict
    """

    path = Path(forceplate)
    if path.is_dir():
        config, curve, spectrum, sections = _analyze_directory(path, config, mode, reference_height)
    else:
        if config is None:
            config = run_config_from_dict({})
        if reference_height is None:
            reference_height = config.reference_height
        record = parse_forceplate_csv(path)
        bands = BandSpec(config.bands.centers, config.bands.width, record.sample_rate)
        curve = ip_curve(record.copx, record.grf, bands, reference_height)
        spectrum = psd(record.copx, record.sample_rate)
        sections = {
            "ip_curve": curve.to_dict(),
            "descriptors": descriptors(curve).to_dict(),
            "psd": spectrum.to_dict(),
            "duration_s": record.duration,
            "sample_rate_hz": record.sample_rate,
            "sway_ellipse": {**ellipse_95(record.copx, record.copy, scale=100.0).to_dict(), "units": "cm"},
        }

    if imu is not None:
        acc = parse_imu_csv(imu)
        sections["accel_ellipse"] = {**ellipse_95(acc.ax, acc.ay).to_dict(), "units": "m/s^2"}

    report = {
        "iplab_version": __version__,
        "input": str(path),
        "config": config.to_dict(),
        "descriptor_definition": DESCRIPTOR_DEFINITION,
        **sections,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "report.json", report)
        write_curve_csv(out_dir / "ip_curve.csv", curve)
        write_psd_csv(out_dir / "psd.csv", spectrum)
    return report


# -----------------------------------------------------------------------------
# cmd_fit
# -----------------------------------------------------------------------------


def cmd_fit(config, target_path, grid, n_trials, out_path=None, mode="slope-error", common_random_numbers=True, silent=True):
    """Grid search against a target curve CSV; writes the landscape to `out_path`."""
    target = read_curve_csv(target_path)
    result = grid_search(
        config.model,
        grid,
        target,
        config.sim,
        n_trials,
        config.seed,
        mode=mode,
        torque_scale=config.torque_scale,
        common_random_numbers=common_random_numbers,
        band_width=config.bands.width,
        target_id=str(target_path),
        silent=silent,
    )
    if out_path is not None:
        write_json(out_path, {"iplab_version": __version__, "config": config.to_dict(), **result.to_dict()})
    return result


# -----------------------------------------------------------------------------
# cmd_weldscore / cmd_anova
# -----------------------------------------------------------------------------


def cmd_weldscore(image, palette, precision_denominator="welded"):
    return weld_score(read_ppm(image), read_palette(palette), precision_denominator)


def cmd_anova(paths):
    return anova_oneway(read_groups_csv(paths))


# -----------------------------------------------------------------------------
# argument handling
# -----------------------------------------------------------------------------


def _config_doc(args):
    doc = read_json(args.config) if args.config else {}
    if not isinstance(doc, dict) or not isinstance(doc.get("sim", {}), dict):
        raise ValueError(f"{args.config}: a run config is a JSON object whose 'sim' entry is an object")
    doc = dict(doc)
    if getattr(args, "preset", None):
        doc["model"] = args.preset
        doc.pop("gait", None)
    if getattr(args, "controller", None):
        doc["controller"] = args.controller
    sim = dict(doc.get("sim", {}))
    for key, value in (
        ("duration", getattr(args, "duration", None)),
        ("output_rate", getattr(args, "rate", None)),
        ("internal_substeps", getattr(args, "substeps", None)),
        ("dynamics", getattr(args, "dynamics", None)),
    ):
        if value is not None:
            sim[key] = value
    if getattr(args, "include_exo", False):
        sim["include_exo"] = True
    doc["sim"] = sim
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "torque_scale", None) is not None:
        doc["torque_scale"] = args.torque_scale
    return doc


def _run_simulate(args):
    config = run_config_from_dict(_config_doc(args))
    manifest = cmd_simulate(config, args.trials, args.out, silent=not args.verbose)
    return {"out": str(args.out), **manifest["batch"]}


def _run_analyze(args):
    config = load_run_config(args.config) if args.config else None
    report = cmd_analyze(
        args.forceplate,
        imu=args.imu,
        config=config,
        out_dir=args.out,
        mode=args.mode,
        reference_height=args.reference_height,
    )
    return report if args.out is None else {"out": str(args.out), "descriptors": report["descriptors"]}


def _run_fit(args):
    doc = _config_doc(args)
    doc["sim"].setdefault("dynamics", "linear")
    config = run_config_from_dict(doc)
    grid = ParamGrid.from_dict(read_json(args.grid)) if args.grid else ParamGrid()
    result = cmd_fit(
        config,
        args.target,
        grid,
        args.trials,
        out_path=args.out,
        mode=args.mode,
        common_random_numbers=not args.independent_streams,
        silent=not args.verbose,
    )
    return {
        "out": str(args.out),
        "best_params": result.best_params,
        "best_objective": result.best_objective,
        "ties": [list(t) for t in result.ties],
    }


def _run_weldscore(args):
    return cmd_weldscore(args.image, args.palette, args.precision_denominator).to_dict()


def _run_anova(args):
    paths = [p for p in args.groups.split(",") if p]
    return cmd_anova(paths).to_dict()


def build_parser():
    parser = _Parser(prog="iplab", description="Intersection-point balance analysis laboratory.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a batch of closed-loop trials")
    p.add_argument("--config", help="RunConfig JSON document")
    p.add_argument("--preset", help="model preset, e.g. tip-default or dip-default")
    p.add_argument("--controller", help="controller preset toi1 .. toi8")
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default="simulation", help="output directory")
    p.add_argument("--duration", type=float)
    p.add_argument("--rate", type=float)
    p.add_argument("--substeps", type=int)
    p.add_argument("--dynamics", choices=("nonlinear", "linear"))
    p.add_argument("--include-exo", action="store_true", help="apply the exoskeleton of the config")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(handler=_run_simulate)

    p = sub.add_parser("analyze", help="IP curve, descriptors, PSD and ellipses of a record")
    p.add_argument("--forceplate", required=True, help="force-plate CSV or simulate output directory")
    p.add_argument("--imu", help="IMU CSV")
    p.add_argument("--config", help="RunConfig JSON document")
    p.add_argument("--reference-height", type=float)
    p.add_argument("--mode", choices=("pooled", "per-subject"), default="pooled")
    p.add_argument("--out", help="directory for report.json and CSV sidecars")
    p.set_defaults(handler=_run_analyze)

    p = sub.add_parser("fit", help="grid search of alpha, beta and sigma against a target curve")
    p.add_argument("--model", dest="preset", help="model preset")
    p.add_argument("--config", help="RunConfig JSON document")
    p.add_argument("--target", required=True, help="target curve CSV (band_hz,ip_m,ip_norm,r2)")
    p.add_argument("--grid", help="ParamGrid JSON document")
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default="fit.json")
    p.add_argument("--mode", choices=[m.value for m in ObjectiveMode], default=ObjectiveMode.SLOPE_ERROR.value)
    p.add_argument("--dynamics", choices=("nonlinear", "linear"), help="defaults to the config, else linear")
    p.add_argument("--duration", type=float)
    p.add_argument("--torque-scale", type=float)
    p.add_argument("--independent-streams", action="store_true", help="spawn separate noise streams per cell")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(handler=_run_fit)

    p = sub.add_parser("weldscore", help="score a classified welding image")
    p.add_argument("--image", required=True, help="binary PPM mask")
    p.add_argument("--palette", required=True, help="JSON class -> [r, g, b]")
    p.add_argument("--precision-denominator", choices=("welded", "workpiece"), default="welded")
    p.set_defaults(handler=_run_weldscore)

    p = sub.add_parser("anova", help="one-way ANOVA over CSV groups")
    p.add_argument("--groups", required=True, help="comma-separated CSV files")
    p.set_defaults(handler=_run_anova)
    return parser


def _fail(kind, err, code):
    doc = {"error": kind, "message": str(err)}
    for attr in ("line", "column", "residual", "diagnostics", "colors"):
        value = getattr(err, attr, None)
        if value is not None and value != {} and value != []:
            doc[attr] = value
    print(json.dumps(doc, default=str), file=sys.stderr)
    return code


def main(argv=None):
    """Entry point of the `iplab` command. Returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        result = args.handler(args)
    except UsageError as err:
        return _fail("usage", err, EXIT_USAGE)
    except FileNotFoundError as err:
        return _fail("input-missing", err, EXIT_INPUT_MISSING)
    except ValueError as err:
        return _fail("invalid-input", err, EXIT_FAILURE)
    except RuntimeError as err:
        return _fail("domain-failure", err, EXIT_FAILURE)
    print(json.dumps(result, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
