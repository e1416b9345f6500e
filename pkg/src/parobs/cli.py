"""Command line entry points: configured runs, persisted artifacts, checks.

Each simulate command reads a JSON config (unknown keys rejected), runs the
corresponding solver, writes traces, snapshots, a certification bundle, and
a manifest echoing the resolved config, then certifies the run's printable
inequalities.  Exit status 0 means every in-run check passed; config errors
exit 2 with field or line diagnostics; solver failures exit 3.  All numeric
output uses shortest round-trip decimals so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from parobs.errors import (
    CalibrationError,
    DegenerateSupportError,
    DomainTooSmallError,
    GateViolationError,
    InconsistentStateError,
    MissingInputError,
    RejectedInputError,
    SolverFailureError,
)
from parobs.line import (
    LAMBDA0_MINUS,
    LEFT_STIMULUS_INTEGRAL,
    CompositeSpec,
    solve_composite,
    solve_dirac,
)
from parobs.oscillation import (
    AtomHierarchy,
    BuildingBlockCalibration,
    build_hierarchy,
    calibrate_block,
    geometric_thetas,
    run_oscillation,
)
from parobs.reference import certify_inequalities
from parobs.sphere import monotone_default_preset, nondegeneracy_report, solve_nonlocal
from parobs.trace import RunTrace, fmt, write_manifest

_PLOT_VERSION = "parobs-plot-v1"

_SOLVER_ERRORS = (RejectedInputError, SolverFailureError, DegenerateSupportError,
                  InconsistentStateError, DomainTooSmallError, CalibrationError,
                  GateViolationError, MissingInputError)


class ConfigError(Exception):
    """Invalid run configuration; reported with the offending field."""


# ---------------------------------------------------------------------------
# configuration

_SCHEMAS: dict[str, dict[str, tuple]] = {
    "simulate-sphere": {
        "preset": (str, "monotone-default"),
        "n_cells": (int, 2000),
        "t_end": (float, 0.02),
        "dt": (float, 1e-5),
        "probes": (list, [0.005, 0.01, 0.02]),
        "lam_mode": (str, "conserve"),
        "tol": (float, 1e-10),
        "engine": (str, "auto"),
        "out_dir": (str, None),
    },
    "simulate-dirac": {
        "lam": (float, 1.0),
        "delta_t": (float, 1e-6),
        "t_end": (float, 0.05),
        "dt": (float, None),
        "dt_cap": (float, 2e-5),
        "n_cells": (int, 4000),
        "domain_radius": (float, None),
        "probes": (list, [0.01, 0.02, 0.05]),
        "normalize": (bool, True),
        "sandwich_tol": (float, 1e-3),
        "tol": (float, 1e-10),
        "engine": (str, "auto"),
        "out_dir": (str, None),
    },
    "simulate-composite": {
        "eta": (float, 0.9),
        "atoms": (list, []),
        "atom_mode": (str, "hat"),
        "left_amplitude": (float, 0.04),
        "t_end": (float, 1e-3),
        "dt": (float, 1e-5),
        "n_cells": (int, 4000),
        "probes": (list, [2.5e-4, 5e-4, 1e-3]),
        "lam_mode": (str, "conserve"),
        "tol": (float, 1e-10),
        "engine": (str, "auto"),
        "out_dir": (str, None),
    },
    "build-oscillation": {
        "kappa": (float, 0.05),
        "n_cells": (int, 6000),
        "delta_t": (float, 1e-6),
        "domain_radius": (float, None),
        "extinction_bracket": (float, 1e-3),
        "safety": (float, 0.9),
        "loss_budget": (float, 0.6),
        "thetas": (list, None),
        "calibration": (dict, None),
        "tol": (float, 1e-10),
        "engine": (str, "auto"),
    },
    "run-oscillation": {
        "lam": (float, 1.0),
        "n_cells": (int, None),
        "tol": (float, 1e-14),
        "engine": (str, "auto"),
        "prelude_steps": (int, 60),
        "fillers_per_decade": (int, 2),
        "steps_factor": (int, 40),
        "check_separation": (bool, True),
        "out_dir": (str, None),
    },
}


def _load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")


def _resolve_config(kind: str, config_path: str | None) -> dict:
    schema = _SCHEMAS[kind]
    raw = _load_json(config_path) if config_path else {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{config_path}: top level must be an object")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown field {unknown[0]!r} (valid fields:"
                          f" {', '.join(sorted(schema))})")
    out = {}
    for key, (typ, default) in schema.items():
        if key not in raw or raw[key] is None:
            out[key] = default
            continue
        val = raw[key]
        if typ is float and isinstance(val, (int, float)) and not isinstance(val, bool):
            out[key] = float(val)
        elif typ is int and isinstance(val, int) and not isinstance(val, bool):
            out[key] = val
        elif typ in (str, bool, list, dict) and isinstance(val, typ):
            out[key] = val
        else:
            raise ConfigError(f"field {key!r} must be {typ.__name__},"
                              f" got {type(val).__name__}")
    return out


def _probe_list(cfg: dict, t_end: float, t_min: float = 0.0) -> list[float]:
    probes = cfg["probes"]
    if not probes:
        raise ConfigError("field 'probes' must list at least one probe time")
    try:
        probes = [float(p) for p in probes]
    except (TypeError, ValueError):
        raise ConfigError("field 'probes' must contain numbers")
    if any(not (t_min < p <= t_end * (1.0 + 1e-12)) for p in probes):
        raise ConfigError(f"field 'probes' must lie in ({t_min!r}, {t_end!r}]")
    return sorted(probes)


def _out_dir(cfg: dict, flag_value: str | None) -> Path:
    target = flag_value or cfg.get("out_dir")
    if not target:
        raise ConfigError("set field 'out_dir' in the config or pass --out")
    path = Path(target)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# artifact helpers


def _write_plot_data(path: Path, series: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
    lines = [f"# {_PLOT_VERSION}", "series,t,value"]
    for name in sorted(series):
        t, v = series[name]
        for ti, vi in zip(t, v):
            if not math.isnan(float(vi)):
                lines.append(f"{name},{fmt(ti)},{fmt(vi)}")
    path.write_text("\n".join(lines) + "\n")


def _trace_series(trace: RunTrace) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    t = trace.column("t")
    out = {}
    for name in ("p", "s", "lambda", "support_measure", "mass"):
        col = trace.column(name)
        if not np.all(np.isnan(col)):
            out[name] = (t, col)
    return out


def _snapshots_to_csv(out: Path, snapshots, outputs: list[str]) -> None:
    for k, snap in enumerate(snapshots):
        name = f"snapshot_{k:03d}.csv"
        snap.to_csv(out / name)
        outputs.append(name)


def _finish(out: Path, experiment: str, cfg: dict, outputs: list[str],
            report) -> int:
    (out / "report.json").write_text(report.to_json() + "\n")
    outputs.append("report.json")
    write_manifest(out / "manifest.json", experiment, cfg,
                   outputs + ["manifest.json"])
    for result in report.results:
        state = "pass" if result.ok else "FAIL"
        print(f"{state}: {result.check} (worst margin {result.worst_margin:.3e})")
    return 0 if report.ok else 3


# ---------------------------------------------------------------------------
# commands


def _cmd_sphere(args) -> int:
    cfg = _resolve_config("simulate-sphere", args.config)
    out = _out_dir(cfg, args.out)
    if cfg["preset"] != "monotone-default":
        raise ConfigError(f"unknown preset {cfg['preset']!r};"
                          " available: monotone-default")
    probes = _probe_list(cfg, cfg["t_end"])
    u0, stim = monotone_default_preset(cfg["n_cells"])
    run = solve_nonlocal(u0, stim, cfg["t_end"], cfg["dt"], probes=probes,
                         lam_mode=cfg["lam_mode"], tol=cfg["tol"],
                         engine=cfg["engine"])
    report = nondegeneracy_report(u0, stim, run)

    outputs = ["trace.csv", "final.csv", "bundle.json"]
    run.trace.to_csv(out / "trace.csv")
    run.final.to_csv(out / "final.csv")
    _snapshots_to_csv(out, run.snapshots, outputs)
    bundle = {"sphere": {
        "t": list(run.trace.t), "p": list(run.trace.p), "s": list(run.trace.s),
        "mass": list(run.trace.mass), "mass_2d": report.mass_2d,
        "sup_u": report.sup_u, "c0": report.c0, "h": u0.grid.h,
        "side_condition_max": run.side_condition_max,
    }}
    (out / "bundle.json").write_text(json.dumps(bundle, sort_keys=True) + "\n")
    if args.emit_plot_data:
        _write_plot_data(out / "plot_data.csv", _trace_series(run.trace))
        outputs.append("plot_data.csv")
    return _finish(out, "sphere", cfg, outputs, certify_inequalities(bundle))


def _cmd_dirac(args) -> int:
    cfg = _resolve_config("simulate-dirac", args.config)
    out = _out_dir(cfg, args.out)
    probes = _probe_list(cfg, cfg["t_end"], t_min=cfg["delta_t"])
    run = solve_dirac(cfg["lam"], cfg["delta_t"], cfg["t_end"], cfg["dt"],
                      n_cells=cfg["n_cells"], domain_radius=cfg["domain_radius"],
                      probes=probes, tol=cfg["tol"], engine=cfg["engine"],
                      normalize=cfg["normalize"], dt_cap=cfg["dt_cap"])

    outputs = ["trace.csv", "final.csv", "bundle.json"]
    run.trace.to_csv(out / "trace.csv")
    run.final.to_csv(out / "final.csv")
    _snapshots_to_csv(out, run.snapshots, outputs)
    bundle = {"dirac": {
        "times": list(run.snapshot_times),
        "fields": [list(f.values) for f in run.snapshots],
        "x": list(run.grid.nodes),
        "tolerance": cfg["sandwich_tol"],
    }}
    (out / "bundle.json").write_text(json.dumps(bundle, sort_keys=True) + "\n")
    if args.emit_plot_data:
        series = _trace_series(run.trace)
        t, r = run.radius_rows()
        series["radius"] = (t, r)
        _write_plot_data(out / "plot_data.csv", series)
        outputs.append("plot_data.csv")
    return _finish(out, "dirac", cfg, outputs, certify_inequalities(bundle))


def _cmd_composite(args) -> int:
    cfg = _resolve_config("simulate-composite", args.config)
    out = _out_dir(cfg, args.out)
    probes = _probe_list(cfg, cfg["t_end"])
    try:
        atoms = tuple((float(x), float(w)) for x, w in cfg["atoms"])
    except (TypeError, ValueError):
        raise ConfigError("field 'atoms' must contain [position, weight] pairs")
    spec = CompositeSpec(eta=cfg["eta"], atoms=atoms,
                         atom_mode=cfg["atom_mode"],
                         left_amplitude=cfg["left_amplitude"])
    run = solve_composite(spec, cfg["t_end"], cfg["dt"], n_cells=cfg["n_cells"],
                          probes=probes, lam_mode=cfg["lam_mode"],
                          tol=cfg["tol"], engine=cfg["engine"])

    outputs = ["trace.csv", "trace_left.csv", "trace_right.csv", "final.csv",
               "bundle.json"]
    run.trace.to_csv(out / "trace.csv")
    run.trace_left.to_csv(out / "trace_left.csv")
    run.trace_right.to_csv(out / "trace_right.csv")
    run.final.to_csv(out / "final.csv")
    _snapshots_to_csv(out, run.snapshots, outputs)
    bundle = {"composite": {
        "lambda": list(run.trace.lam),
        "lam_lower": 11.0 / 120.0,
        "lam_upper": 0.5 * LEFT_STIMULUS_INTEGRAL,
        "plateau_min": run.bounds.plateau_min,
        "sink_floor_off_plateau": run.bounds.sink_floor_margin + 1.0 / 11.0,
    }}
    (out / "bundle.json").write_text(json.dumps(bundle, sort_keys=True) + "\n")
    if args.emit_plot_data:
        series = _trace_series(run.trace)
        series["left_measure"] = (run.trace_left.column("t"),
                                  run.trace_left.column("support_measure"))
        series["right_measure"] = (run.trace_right.column("t"),
                                   run.trace_right.column("support_measure"))
        _write_plot_data(out / "plot_data.csv", series)
        outputs.append("plot_data.csv")
    return _finish(out, "composite", cfg, outputs, certify_inequalities(bundle))


def _calibration_from_dict(doc: dict) -> BuildingBlockCalibration:
    fields = {k: v for k, v in doc.items()}
    for key in ("lam_values", "t_star_by_lam"):
        if key in fields:
            fields[key] = tuple(fields[key])
    try:
        return BuildingBlockCalibration(**fields)
    except TypeError as exc:
        raise ConfigError(f"field 'calibration': {exc}")


def _cmd_build_oscillation(args) -> int:
    cfg = _resolve_config("build-oscillation", args.config)
    if args.levels < 1:
        raise ConfigError("--levels must be >= 1")
    out_file = Path(args.out)
    out_file.parent.mkdir(parents=True, exist_ok=True)

    if cfg["calibration"] is not None:
        calib = _calibration_from_dict(cfg["calibration"])
    else:
        calib = calibrate_block(cfg["kappa"], n_cells=cfg["n_cells"],
                                delta_t=cfg["delta_t"],
                                domain_radius=cfg["domain_radius"],
                                extinction_bracket=cfg["extinction_bracket"],
                                tol=cfg["tol"], engine=cfg["engine"])
    if cfg["thetas"] is not None:
        thetas = [float(v) for v in cfg["thetas"]]
        if len(thetas) != args.levels:
            raise ConfigError(f"field 'thetas' has {len(thetas)} entries,"
                              f" --levels is {args.levels}")
    else:
        thetas = geometric_thetas(calib, args.levels, safety=cfg["safety"],
                                  loss_budget=cfg["loss_budget"])
    hierarchy = build_hierarchy(calib, thetas)
    hierarchy.to_file(out_file)
    write_manifest(out_file.parent / "manifest.json", "build-oscillation",
                   {**cfg, "levels": args.levels},
                   [out_file.name, "manifest.json"])
    for gate in hierarchy.gates:
        print(f"pass: {gate.gate} (level {gate.level}:"
              f" {gate.value:.6g} {gate.sense} {gate.bound:.6g})")
    print(f"wrote {out_file} with {sum(lv.count for lv in hierarchy.levels)}"
          f" atoms over {hierarchy.n_levels} level(s)")
    return 0


def _cmd_run_oscillation(args) -> int:
    cfg = _resolve_config("run-oscillation", args.config)
    out = _out_dir(cfg, args.out)
    try:
        hierarchy = AtomHierarchy.from_file(args.hierarchy)
    except OSError as exc:
        raise ConfigError(f"{args.hierarchy}: {exc.strerror or exc}")
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"{args.hierarchy}: not a hierarchy file ({exc})")
    report = run_oscillation(hierarchy, lam=cfg["lam"], n_cells=cfg["n_cells"],
                             tol=cfg["tol"], engine=cfg["engine"],
                             prelude_steps=cfg["prelude_steps"],
                             fillers_per_decade=cfg["fillers_per_decade"],
                             steps_factor=cfg["steps_factor"],
                             check_separation=cfg["check_separation"])

    outputs = ["report.csv", "trace.csv"]
    report.to_csv(out / "report.csv")
    report.trace.to_csv(out / "trace.csv")
    if args.emit_plot_data:
        series = _trace_series(report.trace)
        probes = np.array([p for p, _ in report.probe_measures])
        vals = np.array([m for _, m in report.probe_measures])
        series["probe_measure"] = (probes, vals)
        _write_plot_data(out / "plot_data.csv", series)
        outputs.append("plot_data.csv")
    write_manifest(out / "manifest.json", "run-oscillation",
                   {**cfg, "hierarchy": str(args.hierarchy)},
                   outputs + ["manifest.json"])
    for lv in report.levels:
        state = "pass" if lv.passed else "FAIL"
        print(f"{state}: level {lv.level}: measure({lv.t_n:.3e}) ="
              f" {lv.measure_tn:.6f} (>= {lv.threshold_hi:.6f}),"
              f" measure({lv.t_tilde_n:.3e}) = {lv.measure_ttilde_n:.6f}"
              f" (<= {lv.threshold_lo:.6f})")
    return 0 if report.all_passed else 3


def _cmd_verify(args) -> int:
    bundle = _load_json(args.bundle)
    groups = args.groups.split(",") if args.groups else None
    try:
        report = certify_inequalities(bundle, groups)
    except (MissingInputError, RejectedInputError) as exc:
        raise ConfigError(str(exc))
    text = report.to_json() + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text)
        write_manifest(out / "manifest.json", "verify",
                       {"bundle": str(args.bundle), "groups": groups},
                       ["report.json", "manifest.json"])
    else:
        sys.stdout.write(text)
    for result in report.results:
        state = "pass" if result.ok else "FAIL"
        print(f"{state}: {result.check} (worst margin {result.worst_margin:.3e})",
              file=sys.stderr)
    return 0 if report.ok else 3


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parobs",
        description="Obstacle-problem experiment runner and verifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (
            ("simulate-sphere", "nonlocal model on (-1, 1) from a preset"),
            ("simulate-dirac", "point-mass release on the line"),
            ("simulate-composite", "two-bump nonlocal model on (-5, 5)")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--emit-plot-data", action="store_true",
                       help="also write long-format plot_data.csv")

    p = sub.add_parser("build-oscillation",
                       help="calibrate, gate, and write an atom hierarchy")
    p.add_argument("--levels", type=int, default=2, help="hierarchy depth")
    p.add_argument("--out", required=True, help="hierarchy JSON path")
    p.add_argument("--config", help="JSON config file")

    p = sub.add_parser("run-oscillation",
                       help="evolve a hierarchy and measure the support swing")
    p.add_argument("--hierarchy", required=True, help="hierarchy JSON path")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--emit-plot-data", action="store_true",
                   help="also write long-format plot_data.csv")

    p = sub.add_parser("verify", help="certify a bundle of run outputs")
    p.add_argument("--bundle", required=True, help="bundle JSON path")
    p.add_argument("--groups", help="comma-separated check groups")
    p.add_argument("--out", help="directory for report.json (default stdout)")
    return parser


_COMMANDS = {
    "simulate-sphere": _cmd_sphere,
    "simulate-dirac": _cmd_dirac,
    "simulate-composite": _cmd_composite,
    "build-oscillation": _cmd_build_oscillation,
    "run-oscillation": _cmd_run_oscillation,
    "verify": _cmd_verify,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _SOLVER_ERRORS as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
