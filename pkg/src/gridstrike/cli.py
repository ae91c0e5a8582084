"""Command-line entry point: ``gridstrike {pf,attack,screen,enumerate}``."""

from __future__ import annotations

import argparse
import ast
import configparser
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, reports
from .attack import (AdjustmentObjective, FwOptions, VoltageObjective, attach_reductions,
                     compare_single_level, fw_maximize, fw_maximize_power_adjustment)
from .case_io import load_case
from .errors import (DegenerateSolution, GridStrikeError, InfeasibleSubproblem, MalformedCase,
                     SchemaViolation, SingularJacobian, StalledAtZeroGradient,
                     UnsupportedFeature)
from .grid import AttackVector
from .powerflow import solve_power_flow
from .restoration import Restorer
from .screening import (enumerate_attacks, enumeration_preflight, n_minus_1_screen, screen)

log = logging.getLogger("gridstrike")

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_SOLVER, EXIT_CERTIFICATE = 0, 2, 3, 4, 5

# per-case defaults: demand-bus voltage limits and gamma_bar
CASE_DEFAULTS = {
    "case30": {"v_limits": (0.93, 1.07), "gamma_bar": 3.0},
    "case118": {"v_limits": (0.93, 1.07), "gamma_bar": 3.0},
    "case2383wp": {"v_limits": (0.89, 1.12), "gamma_bar": 2.0},
}
GENERIC_DEFAULTS = {"v_limits": None, "gamma_bar": 3.0}


@dataclasses.dataclass
class RunConfig:
    case: str
    model: str = "voltage"
    kappa: float = 3.0
    gamma_bar: float = 3.0
    v_limits: tuple | None = None
    phi: float = 0.5
    c1: float = 0.01
    alpha_min: float = 0.01
    max_iter: int = 50
    eta: float = 0.9
    epsilon: float = 1e-3
    seed: int = 0
    out: str = "gridstrike-out"
    jobs: int = 1
    enable_enumeration: bool = False
    compare: bool = False
    emit_plot_data: bool = True
    max_combos: int = 10_000
    k: int = 3
    top: int = 5
    targets: list | None = None
    n1: bool = False

    def public(self):
        d = dataclasses.asdict(self)
        d.pop("out")
        d.pop("jobs")
        return d


def _case_key(case):
    return Path(case).stem.lower()


def _read_config_file(path):
    """``key = value`` lines; values are Python literals or bare strings."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string("[run]\n" + Path(path).read_text())
    out = {}
    for key, raw in cp["run"].items():
        key = key.replace("-", "_")
        try:
            out[key] = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            out[key] = raw.strip().strip('"')
    return out


def _parse_pairs(text, cast=float):
    """``'71:3,74:3'`` -> ``{71: 3.0, 74: 3.0}``."""
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        k, _, v = item.partition(":")
        out[int(k)] = cast(v) if v else None
    return out


def _parse_limits(text):
    lo, hi = (float(x) for x in text.split(","))
    return lo, hi


def build_config(args):
    base = dict(CASE_DEFAULTS.get(_case_key(args.case), GENERIC_DEFAULTS))
    if getattr(args, "config", None):
        base.update(_read_config_file(args.config))
    for f in dataclasses.fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            base[f.name] = val
    base["case"] = args.case
    if isinstance(base.get("v_limits"), list):
        base["v_limits"] = tuple(base["v_limits"])
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(base) - known
    if unknown:
        raise UsageError(f"unknown configuration keys: {sorted(unknown)}")
    return RunConfig(**base)


class UsageError(Exception):
    pass


def _outdir(cfg):
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _fw_options(cfg):
    return FwOptions(phi=cfg.phi, c1=cfg.c1, alpha_min=cfg.alpha_min, max_iter=cfg.max_iter)


# --- subcommands ---------------------------------------------------------------

def cmd_pf(args):
    cfg = build_config(args)
    grid = load_case(cfg.case)
    gamma = grid.zero_attack()
    if args.attack:
        gamma = AttackVector.from_lines(grid, _parse_pairs(args.attack), cfg.gamma_bar).gamma
    base = solve_power_flow(grid)
    pf = solve_power_flow(grid, gamma, base=base) if np.any(gamma) else base
    out = _outdir(cfg)
    doc = reports.powerflow_doc(grid, pf, gamma)
    reports.write_json(out / "powerflow.json", doc)
    reports.write_csv(out / "pf_trace.csv", ["iteration", "residual_inf"],
                      enumerate(pf.trace))
    if cfg.emit_plot_data:
        reports.write_csv(out / "voltage_profile.csv", ["bus", "V_base", "V_attacked"],
                          reports.voltage_profile_rows(grid, base.V, [pf.V]))
    print(f"{grid.name}: {pf.status.value} in {pf.iterations} iterations, "
          f"|F|inf = {pf.final_residual:.3e}")
    if np.any(gamma) and pf.converged:
        drop = base.V - pf.V
        for i in np.argsort(-drop, kind="stable")[:5]:
            print(f"  bus {grid.bus_ids[i]:>6d}  V {base.V[i]:.4f} -> {pf.V[i]:.4f}")
    return EXIT_OK if pf.converged else EXIT_SOLVER


def _voltage_attack(cfg, grid):
    obj = VoltageObjective(grid)
    res = fw_maximize(obj, grid, cfg.kappa, cfg.gamma_bar, options=_fw_options(cfg))
    if not res.certificate:
        attach_reductions(res, int(round(cfg.kappa)), obj, grid, cfg.jobs)
    columns = {"continuous": (res.gamma_star.gamma, res.objective, None)}
    for name, d in res.discrete.items():
        columns[name] = (d.attack.gamma, d.objective, None)
    states = {}
    for name, (g, v, _) in columns.items():
        pf = solve_power_flow(grid, g, base=obj.base)
        states[name] = pf
        columns[name] = (g, v, pf)
    return res, columns, obj.base.V, {k: (s.V if s.converged else None) for k, s in states.items()}


def _power_attack(cfg, grid):
    restorer = Restorer(grid, v_limits=cfg.v_limits)
    screening = None
    targets = cfg.targets
    if targets is None:
        rep = screen(grid, cfg.gamma_bar, cfg.eta, cfg.epsilon, v_limits=cfg.v_limits)
        targets = rep.target_nodes
        screening = rep.to_dict()
        screening["case"] = grid.name
        print(f"screening: W = {rep.vulnerable_lines}, T = {rep.target_nodes}")
    res = fw_maximize_power_adjustment(grid, cfg.kappa, cfg.gamma_bar, targets, restorer,
                                       options=_fw_options(cfg))
    obj = AdjustmentObjective(grid, restorer)
    if not res.certificate:
        attach_reductions(res, int(round(cfg.kappa)), obj, grid, cfg.jobs)
    columns = {"continuous": (res.gamma_star.gamma, res.objective, None)}
    for name, d in res.discrete.items():
        columns[name] = (d.attack.gamma, d.objective, None)
    profiles = {}
    for name, (g, v, _) in columns.items():
        out, _ = restorer.evaluate(g)
        columns[name] = (g, v, out)
        profiles[name] = out.V if out.feasible else None
    return res, columns, restorer.base_pf.V, profiles, screening


def cmd_attack(args):
    cfg = build_config(args)
    if args.targets:
        cfg.targets = sorted(int(b) for b in args.targets.split(",") if b.strip())
    grid = load_case(cfg.case)
    t0 = time.perf_counter()
    screening = None
    if cfg.model == "voltage":
        res, columns, base_V, profiles = _voltage_attack(cfg, grid)
    else:
        res, columns, base_V, profiles, screening = _power_attack(cfg, grid)
    comparison = compare_single_level(grid, res) if cfg.compare and cfg.model == "voltage" else None
    doc = reports.attack_doc(grid, cfg.public(), res, columns, screening, comparison)
    out = _outdir(cfg)
    reports.write_json(out / "attack.json", doc)
    reports.write_csv(out / "trace.csv", ["iteration", "objective", "alpha", "step_norm", "gamma"],
                      reports.trace_rows(grid, res))
    if cfg.emit_plot_data:
        names = list(profiles)
        reports.write_csv(out / "voltage_profile.csv", ["bus", "V_base"] + [f"V_{n}" for n in names],
                          reports.voltage_profile_rows(grid, base_V, [profiles[n] for n in names]))
    _print_attack(grid, res, columns, time.perf_counter() - t0)
    if comparison is not None:
        print(f"single-level model: {comparison['single_level_objective']:.6g} "
              f"({'agrees' if comparison['agree'] else 'disagrees'})")
    return EXIT_CERTIFICATE if res.certificate else EXIT_OK


def _print_attack(grid, res, columns, seconds):
    unit = "p.u.^2" if res.model == "voltage" else "MW"
    print(f"{grid.name} {res.model} model: {res.status} after {res.iterations} iterations "
          f"({seconds:.1f}s)")
    if res.certificate:
        lines = sorted(res.attacked_lines(grid))
        print(f"  infeasibility certificate on lines {lines}")
        return
    names = list(columns)
    print("  line  from    to  " + "  ".join(f"{n:>10s}" for n in names))
    shown = sorted({k for g, _, _ in columns.values() for k in np.flatnonzero(g > 1e-9)})
    for k in shown:
        f, t = grid.line_buses(k)
        vals = "  ".join(f"{columns[n][0][k]:10.3f}" for n in names)
        print(f"  {grid.line_ids[k]:4d} {f:5d} {t:5d}  {vals}")
    print(f"  objective ({unit})  " + "  ".join(f"{columns[n][1]:10.4g}" for n in names))


def cmd_screen(args):
    cfg = build_config(args)
    grid = load_case(cfg.case)
    rep = screen(grid, cfg.gamma_bar, cfg.eta, cfg.epsilon, v_limits=cfg.v_limits)
    out = _outdir(cfg)
    if cfg.n1:
        table, disc = n_minus_1_screen(grid, cfg.gamma_bar, cfg.k, v_limits=cfg.v_limits,
                                       jobs=cfg.jobs)
        rep.n1_table = table
        rep.discrete = {k: v for k, v in disc.items() if v is not None}
        reports.write_csv(out / "n1_shed.csv", ["line", "from_bus", "to_bus", "shed_MW"],
                          ([r["line"], r["from_bus"], r["to_bus"], r["shed_MW"]] for r in table))
    doc = rep.to_dict()
    doc["case"] = grid.name
    for h in doc["kappa_history"]:
        h.pop("seconds", None)
    reports.write_json(out / "screening.json", doc)
    print(f"{grid.name}: vulnerable lines W = {rep.vulnerable_lines}")
    print(f"{grid.name}: target nodes T = {rep.target_nodes}")
    if rep.empty_vulnerable_set:
        print("  no vulnerable lines: every line is safe at full attack strength")
    for name, d in rep.discrete.items():
        print(f"  {name}: lines {d['lines']} -> {d['objective_MW']:.2f} MW")
    return EXIT_OK


def cmd_enumerate(args):
    cfg = build_config(args)
    grid = load_case(cfg.case)
    pre = enumeration_preflight(grid, cfg.k)
    if not cfg.enable_enumeration:
        raise UsageError(f"enumeration of {pre['combinations']} combinations needs "
                         "--enable-enumeration")
    if pre["combinations"] > cfg.max_combos:
        raise UsageError(f"{pre['combinations']} combinations exceed --max-combos "
                         f"{cfg.max_combos}")
    top, count = enumerate_attacks(grid, cfg.k, cfg.gamma_bar, cfg.top, v_limits=cfg.v_limits,
                                   jobs=cfg.jobs)
    out = _outdir(cfg)
    doc = {"case": grid.name, "k": cfg.k, "gamma_bar": cfg.gamma_bar, "combinations": count,
           "top": top}
    reports.write_json(out / "enumeration.json", doc)
    reports.write_csv(out / "enumeration.csv", ["rank", "lines", "objective_MW"],
                      ([i + 1, " ".join(map(str, r["lines"])), r["objective_MW"]]
                       for i, r in enumerate(top)))
    for i, r in enumerate(top):
        print(f"{i + 1:3d}  {r['lines']}  {r['objective_MW']:.2f} MW")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------

def _common(p, case_positional=True):
    if case_positional:
        p.add_argument("case", help="MATPOWER .m file, canonical .json, or bundled case name")
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    p.add_argument("--out", help="output directory (default: gridstrike-out)")
    p.add_argument("--gamma-bar", dest="gamma_bar", type=float)
    p.add_argument("--v-limits", dest="v_limits", type=_parse_limits,
                   help="demand-bus voltage limits 'vmin,vmax'")
    p.add_argument("--jobs", type=int, help="worker processes for batch evaluations")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-plot-data", dest="emit_plot_data", action="store_const", const=False)


def build_parser():
    ap = argparse.ArgumentParser(prog="gridstrike",
                                 description="Impedance-attack analysis for AC power grids.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pf", help="solve the AC power flow, optionally under an attack")
    _common(p)
    p.add_argument("--attack", help="attacked lines as 'line:gamma,...'")
    p.set_defaults(func=cmd_pf)

    p = sub.add_parser("attack", help="Frank-Wolfe attack optimization")
    p.add_argument("case_opt", nargs="?", metavar="case")
    p.add_argument("--case", dest="case_flag")
    _common(p, case_positional=False)
    p.add_argument("--model", choices=["voltage", "power"])
    p.add_argument("--kappa", type=float)
    p.add_argument("--phi", type=float)
    p.add_argument("--c1", type=float)
    p.add_argument("--alpha-min", dest="alpha_min", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--targets", help="target demand buses 'b1,b2,...' (skips screening)")
    p.add_argument("--compare", action="store_const", const=True,
                   help="also solve the single-level voltage model and report disagreement")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("screen", help="safe-line elimination and target nodes")
    _common(p)
    p.add_argument("--eta", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--n1", action="store_const", const=True, help="also run the N-1 screen")
    p.add_argument("-k", type=int, help="attack size for N-1 combinations")
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("enumerate", help="exhaustive k-line attacks (opt-in)")
    _common(p)
    p.add_argument("-k", type=int)
    p.add_argument("--top", type=int)
    p.add_argument("--enable-enumeration", dest="enable_enumeration", action="store_const",
                   const=True)
    p.add_argument("--max-combos", dest="max_combos", type=int)
    p.set_defaults(func=cmd_enumerate)
    return ap


def _error(exc, code, stream=None):
    stream = stream or sys.stderr
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    details = {k: v for k, v in vars(exc).items() if not k.startswith("_")} if hasattr(exc, "__dict__") else {}
    if details:
        payload["details"] = details
    stream.write(reports.dumps(payload))
    return code


def main(argv=None):
    level = os.environ.get("GRIDSTRIKE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    if args.command == "attack":
        args.case = args.case_flag or args.case_opt
        if not args.case:
            parser.print_usage(sys.stderr)
            return _error(UsageError("attack needs a case"), EXIT_USAGE)
    try:
        return args.func(args)
    except UsageError as exc:
        return _error(exc, EXIT_USAGE)
    except (FileNotFoundError, IsADirectoryError, MalformedCase, UnsupportedFeature,
            SchemaViolation, json.JSONDecodeError) as exc:
        return _error(exc, EXIT_PARSE)
    except (InfeasibleSubproblem, DegenerateSolution, SingularJacobian,
            StalledAtZeroGradient) as exc:
        return _error(exc, EXIT_SOLVER)
    except GridStrikeError as exc:
        return _error(exc, EXIT_PARSE)
    except ValueError as exc:
        return _error(exc, EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
