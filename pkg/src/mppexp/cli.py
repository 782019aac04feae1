"""Command-line entry point.

    mppexp converge --preset example1-temporal-k2 --out results
    mppexp compare-cutoff --preset example2
    mppexp run-2d --preset example3 --set tau=1e-6
    mppexp single-run --config my.cfg
    mppexp list-presets

Exit status: 0 when every run is Ok, 2 when a run reports DomainViolation or
StartingFailure, 1 on usage or config errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import PRESET_NOTES, PRESETS, ConfigError, resolve_config, scheme_label
from .experiments import (ConvergenceStudy, RunReport, run_2d_interface, run_convergence_study,
                          run_cutoff_comparison, run_single, write_report_csv, write_rho_csv,
                          write_series_csv)
from .grid_fem import write_nodal_csv

log = logging.getLogger("mppexp")

EXIT_OK, EXIT_USAGE, EXIT_RUN_FAILURE = 0, 1, 2
COMMANDS = ("converge", "compare-cutoff", "run-2d", "single-run", "list-presets")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for run failures here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mppexp", description="Cut-off exponential integrators for Allen-Cahn type problems.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name == "list-presets":
            continue
        sp.add_argument("--config", type=Path, help="flat key=value config file")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="named parameter set")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (repeatable)")
        sp.add_argument("--backend", choices=("eigen", "contour", "tensor"))
        sp.add_argument("--out", type=Path, default=Path("results"), help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite existing output files")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "compare-cutoff":
            sp.add_argument("--leg", choices=("enabled", "disabled", "both"), default="both")
    return p


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.3e}"


def _summary(experiment, scheme, report: RunReport, label="resolution"):
    for i, res in enumerate(report.resolutions):
        rate = report.rates[i]
        rate_txt = "-" if math.isnan(rate) else f"{rate:.2f}"
        rho = report.rho_max[i] if i < len(report.rho_max) else math.nan
        print(f"{experiment} {scheme} {label}={res} error={_fmt(report.errors[i])} rate={rate_txt} "
              f"rho_max={_fmt(rho)} status={report.statuses[i]}")


def _prepare_out(out: Path, experiment: str, force: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    clash = sorted(p.name for p in out.glob(f"{experiment}_*"))
    if clash and not force:
        raise UsageError(f"{out} already holds output for {experiment!r} ({clash[0]}, ...); use --force")


def _write_metadata(out: Path, experiment: str, argv, cfg) -> None:
    meta = {"experiment": experiment, "version": __version__, "argv": list(argv),
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.to_dict().items()}}
    with open(out / f"{experiment}_metadata.json", "w", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _converge(cfg, experiment, out):
    study = ConvergenceStudy.from_config(cfg)
    report = run_convergence_study(study, cfg, keep_fields=True)
    scheme = scheme_label(cfg)
    tag = "N" if study.axis.value == "temporal" else "M"
    write_report_csv(out / f"{experiment}_{scheme}_report.csv", report)
    write_rho_csv(out / f"{experiment}_{scheme}_rho.csv", report.rho_trace)
    for res, (grid, u) in zip(report.resolutions, report.extra["fields"]):
        write_nodal_csv(out / f"{experiment}_{scheme}_{tag}{res}.csv", grid, u)
    _summary(experiment, scheme, report, label=tag)
    return report.exit_code


def _write_single(out, experiment, scheme, report, tag):
    write_report_csv(out / f"{experiment}_{scheme}_report.csv", report)
    write_rho_csv(out / f"{experiment}_{scheme}_rho.csv", report.rho_trace)
    write_nodal_csv(out / f"{experiment}_{scheme}_{tag}.csv", report.extra["grid"], report.extra["u"])


def _compare_cutoff(cfg, experiment, out, leg):
    legs = ("enabled", "disabled") if leg == "both" else (leg,)
    reports = run_cutoff_comparison(cfg, legs=legs)
    code = EXIT_OK
    for name, report in reports.items():
        scheme = scheme_label(cfg.replace(cutoff="two-sided" if name == "enabled" else "disabled"))
        _write_single(out, experiment, scheme, report, f"M{cfg.cells}")
        _summary(experiment, scheme, report, label="M")
        print(f"{experiment} {scheme} max|u|={report.max_abs[0]:.9f}")
        if report.discrepancy:
            print(f"{experiment} {scheme} reproduction discrepancy: {report.discrepancy}")
        code = max(code, report.exit_code)
    return code


def _run_2d(cfg, experiment, out):
    report = run_2d_interface(cfg, out_dir=out, experiment=experiment)
    scheme = scheme_label(cfg)
    write_report_csv(out / f"{experiment}_{scheme}_report.csv", report)
    write_rho_csv(out / f"{experiment}_{scheme}_rho.csv", report.rho_trace)
    ex = report.extra
    write_series_csv(out / f"{experiment}_{scheme}_interface.csv", ("step", "time", "radius", "symmetry"),
                     zip(ex["snapshot_steps"], ex["snapshot_times"], ex["radii"], ex["symmetry"]))
    _summary(experiment, scheme, report, label="N")
    radii = ", ".join(f"{r:.6f}" for r in ex["radii"])
    print(f"{experiment} {scheme} radii=[{radii}] symmetry_max={max(ex['symmetry']):.3e}")
    return report.exit_code


def _single(cfg, experiment, out):
    report = run_single(cfg)
    scheme = scheme_label(cfg)
    _write_single(out, experiment, scheme, report, f"N{cfg.num_steps}")
    _summary(experiment, scheme, report, label="N")
    return report.exit_code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if args.command == "list-presets":
        for name in PRESETS:
            print(f"{name:28s} {PRESET_NOTES.get(name, '')}")
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None and not args.config.is_file():
            raise UsageError(f"config file {args.config} not found")
        cfg = resolve_config(args.preset, args.config, args.overrides, args.backend)
        experiment = cfg.preset or (args.config.stem if args.config else "custom")
        _prepare_out(args.out, experiment, args.force)
        _write_metadata(args.out, experiment, argv, cfg)
        if args.command == "converge":
            return _converge(cfg, experiment, args.out)
        if args.command == "compare-cutoff":
            return _compare_cutoff(cfg, experiment, args.out, args.leg)
        if args.command == "run-2d":
            return _run_2d(cfg, experiment, args.out)
        return _single(cfg, experiment, args.out)
    except (UsageError, ConfigError) as exc:
        print(f"mppexp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
