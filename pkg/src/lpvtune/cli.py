"""Command-line driver: ``autotune synth|tune|analyze --config <path>``.

Exit codes: 0 success or stable, 1 analysis found an unstable loop, 2 input
error, 3 tuning infeasible.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autotune import (BfgsConfig, CostConfig, PsoConfig, TuningConfigError, TuningProblem,
                       autotune, tune_report)
from .controller import ControllerError, ControllerStructure, demo_structure
from .discretize import DiscretizationError, save_controller
from .frf import FrequencyGrid, FrfFormatError, load_frf_set, save_frf_set
from .plant import PlantError, demo_plant, load_plant, sample_frf_set
from .shaping import WeightSet, write_bode_loop_csv, write_sensitivity_csv, write_weight_preview
from .stability import IntegratorDeclaration, LoopSet, controller_response, write_nyquist_csv

EXIT_OK, EXIT_UNSTABLE, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2, 3

log = logging.getLogger("lpvtune")


class InputError(Exception):
    """Bad configuration or input files (exit code 2)."""


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: parse error at line {exc.lineno} column {exc.colno}") from exc


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _read_json_path(base: Path, value) -> Path:
    path = _resolve(base, value)
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path: Path, doc) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True, default=_json_default)
    path.write_text(text + "\n", encoding="utf-8")


# -- synth ---------------------------------------------------------------------

def _grid(spec) -> FrequencyGrid:
    if isinstance(spec, dict):
        return FrequencyGrid.logspace(float(spec.get("w_min", 1.0)),
                                      float(spec.get("w_max", 1e4)), int(spec.get("n", 400)))
    return FrequencyGrid.from_rad(spec)


def _points(spec, n_sched) -> np.ndarray:
    if isinstance(spec, dict):
        line = np.linspace(float(spec.get("from", -1.0)), float(spec.get("to", 1.0)),
                           int(spec.get("n", 11)))
        return np.repeat(line[:, None], max(n_sched, 1), axis=1)
    return np.asarray(spec, dtype=float).reshape(len(spec), -1)


def cmd_synth(cfg: dict, base: Path, out: Path, ts=None) -> int:
    source = cfg.get("plant", "demo")
    if source == "demo":
        plant = demo_plant(lpv=True)
    elif source == "demo_lti":
        plant = demo_plant(lpv=False)
    else:
        plant = load_plant(_read_json_path(base, source))
    grid = _grid(cfg.get("grid", {}))
    points = _points(cfg.get("points", {}), plant.n_sched)
    ts = cfg.get("ts") if ts is None else ts
    frfs = sample_frf_set(plant, grid, points,
                          decouple_per_point=bool(cfg.get("decouple_per_point", True)), ts=ts)
    target = out / cfg.get("output", "frf.json")
    target.parent.mkdir(parents=True, exist_ok=True)
    save_frf_set(frfs, target)
    log.info("wrote %s (%d local FRFs, %d frequencies)", target, len(frfs.locals), len(grid))
    return EXIT_OK


# -- tune / analyze --------------------------------------------------------------

def _structure(cfg: dict, base: Path) -> ControllerStructure:
    spec = cfg.get("structure", "demo")
    if spec == "demo":
        return demo_structure(2)
    if spec == "demo_lpv":
        return demo_structure(2, 1, lpv_notch=True)
    if isinstance(spec, dict):
        return ControllerStructure.from_dict(spec.get("structure", spec))
    doc = _read_json(_resolve(base, spec))
    return ControllerStructure.from_dict(doc.get("structure", doc))


def _weights(cfg: dict) -> WeightSet:
    t = cfg.get("targets", {})
    return WeightSet(tuple(t.get("omega_bw", [60.0])), float(t.get("alpha", 2.0)),
                     float(t.get("ks", 0.5)), float(t.get("kr", 0.5)),
                     t.get("kr_mode", "scaled"))


def _declaration(cfg: dict, structure: ControllerStructure) -> IntegratorDeclaration:
    spec = cfg.get("integrators")
    if not spec:
        return IntegratorDeclaration.for_structure(structure)
    return IntegratorDeclaration(tuple(spec["n_int"]), int(spec.get("p_ol", 0)),
                                 spec.get("p_ol_channels"))


def _load_frfs(cfg: dict, base: Path, mode, ts):
    if "frf" not in cfg:
        raise InputError("config needs an 'frf' entry")
    frfs = load_frf_set(_read_json_path(base, cfg["frf"]))
    mode = mode or cfg.get("mode", "ct")
    ts = ts if ts is not None else cfg.get("ts")
    if mode not in ("ct", "dt"):
        raise InputError(f"unknown mode {mode!r}")
    if mode == "dt" and not frfs.discrete:
        raise InputError("mode 'dt' requires discrete-time FRF data")
    if mode == "ct" and frfs.discrete:
        raise InputError("mode 'ct' given but the FRF data are discrete-time")
    if ts is not None and frfs.discrete and not np.isclose(ts, frfs.ts, rtol=1e-12):
        raise InputError(f"--ts {ts} does not match the data sampling time {frfs.ts}")
    return frfs, mode


def _write_plots(out: Path, frfs, structure, theta, weights):
    ctrl = np.stack([controller_response(structure, theta, loc.p, frfs.omega, frfs.ts,
                                         fast=True) for loc in frfs.locals])
    loops = LoopSet(frfs.omega, frfs.points(), frfs.responses(), ctrl, frfs.ts)
    write_sensitivity_csv(out / "sensitivity.csv", loops)
    write_nyquist_csv(out / "nyquist.csv", loops)
    write_bode_loop_csv(out / "bode_loop.csv", loops)
    write_weight_preview(out / "weights.csv", frfs.omega, frfs.locals[0], weights)


def cmd_tune(cfg: dict, base: Path, out: Path, seed=None, mode=None, ts=None) -> int:
    frfs, mode = _load_frfs(cfg, base, mode, ts)
    structure = _structure(cfg, base)
    weights = _weights(cfg)
    decl = _declaration(cfg, structure)
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    pso = PsoConfig(**{**cfg.get("pso", {}), "seed": seed})
    bfgs = BfgsConfig(**cfg.get("bfgs", {}))
    cost_cfg = CostConfig(**cfg.get("cost", {}))
    result = autotune(frfs, structure, weights, pso, bfgs, decl, cost_cfg, mode)
    log.info("tuning finished in %.1f s: cost=%.6g success=%s", result.wall_time,
             result.cost, result.success)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"frf": str(cfg["frf"]), "structure": structure.to_dict(),
            "integrators": {"n_int": [int(v) for v in decl.n_int], "p_ol": int(decl.p_ol)},
            "mode": mode, "ts": frfs.ts}
    report = tune_report(result, structure, weights, pso, bfgs, cost_cfg, echo)
    _write_json(out / "report.json", report)
    extra = {"weights": weights.to_dict(), "cost": report["config"]["cost"],
             "integrators": echo["integrators"]}
    export_ts = frfs.ts if frfs.discrete else (ts if ts is not None else cfg.get("ts"))
    save_controller(out / "controller.json", structure, result.theta, export_ts, extra,
                    cfg.get("prewarp_at"))
    _write_plots(out, frfs, structure, result.theta, weights)
    return EXIT_OK if result.success else EXIT_INFEASIBLE


def cmd_analyze(cfg: dict, base: Path, out: Path, mode=None, ts=None) -> int:
    frfs, mode = _load_frfs(cfg, base, mode, ts)
    if "controller" not in cfg:
        raise InputError("config needs a 'controller' entry")
    doc = _read_json(_resolve(base, cfg["controller"]))
    structure = ControllerStructure.from_dict(doc.get("structure", doc))
    theta = structure.initial
    wcfg = {"targets": doc.get("weights", {}), **cfg}
    weights = _weights(wcfg)
    decl_cfg = {"integrators": cfg.get("integrators", doc.get("integrators"))}
    decl = _declaration(decl_cfg, structure)
    cost_cfg = CostConfig(**cfg.get("cost", doc.get("cost", {})))
    try:
        problem = TuningProblem(frfs, structure, weights, decl, cost_cfg, mode)
    except TuningConfigError as exc:
        raise InputError(str(exc)) from exc
    ev = problem.evaluate(theta)
    out.mkdir(parents=True, exist_ok=True)
    analysis = {"cost": ev.cost, "feasible": ev.feasible, "message": ev.message,
                "norms": [float(v) for v in ev.norms],
                "verdicts": [v.to_dict() for v in ev.verdicts]}
    _write_json(out / "analysis.json", analysis)
    if ev.verdicts:
        _write_plots(out, frfs, structure, theta, weights)
    for i, v in enumerate(ev.verdicts):
        log.info("lfrf=%d status=%s norm=%.6g", i, v.status, ev.norms[i])
    if ev.message:
        log.info("%s", ev.message)
    return EXIT_OK if ev.feasible else EXIT_UNSTABLE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autotune", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=("synth", "tune", "analyze"))
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--mode", choices=("ct", "dt"), default=None)
    parser.add_argument("--ts", type=float, default=None, help="sampling time, seconds")
    parser.add_argument("--quiet", action="store_true", help="suppress progress lines")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    config_path = Path(args.config)
    try:
        cfg = _read_json(config_path)
        base = config_path.parent
        out = Path(args.out) if args.out else _resolve(base, cfg.get("out", "."))
        if args.command == "synth":
            return cmd_synth(cfg, base, out, args.ts)
        if args.command == "tune":
            return cmd_tune(cfg, base, out, args.seed, args.mode, args.ts)
        return cmd_analyze(cfg, base, out, args.mode, args.ts)
    except (InputError, FrfFormatError, PlantError, ControllerError, TuningConfigError,
            DiscretizationError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
