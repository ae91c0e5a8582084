"""JSON documents and CSV tables written by the command-line tool."""

from __future__ import annotations

import csv
import json
import math
from importlib import resources

import numpy as np

SCHEMA_NAMES = ("powerflow", "attack", "screening", "enumeration", "error")


def load_schema(name):
    text = resources.files("gridstrike.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def _clean(obj):
    """Make ``obj`` JSON-safe: numpy scalars, arrays and non-finite floats."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def dumps(doc):
    return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"


def write_json(path, doc):
    path.write_text(dumps(doc))


def write_csv(path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# --- documents ---------------------------------------------------------------

def powerflow_doc(grid, pf, attack=None):
    gamma = grid.zero_attack() if attack is None else attack
    attacked = {int(grid.line_ids[k]): float(gamma[k]) for k in np.flatnonzero(gamma)}
    return {
        "case": grid.name,
        "status": pf.status.value,
        "iterations": pf.iterations,
        "final_residual": pf.final_residual,
        "trace": list(pf.trace),
        "attack": attacked,
        "buses": [{"bus": int(b), "V": float(pf.V[i]), "theta": float(pf.theta[i])}
                  for i, b in enumerate(grid.bus_ids)],
    }


def _column_stats(grid, model, value, state):
    """Per-attack summary used in the attack table footer."""
    out = {"objective": value}
    if model == "voltage":
        if state is not None and getattr(state, "converged", False):
            drop = 1.0 - state.V
            order = [i for i in np.argsort(-drop, kind="stable")[:5] if i in set(grid.dem)]
            out["largest_voltage_drops"] = [{"bus": int(grid.bus_ids[i]), "V": float(state.V[i])}
                                            for i in order]
        return out
    if state is not None and state.feasible:
        out["buses_with_adjustment"] = sorted({s["bus"] for s in state.shed})
        out["buses_at_voltage_bound"] = state.buses_at_voltage_bound
        out["shed"] = state.shed
    return out


def attack_doc(grid, config, result, columns, screening=None, comparison=None):
    """``columns`` maps a column name to ``(gamma, value, state)``."""
    lines = set()
    for g, _, _ in columns.values():
        lines.update(np.flatnonzero(g > 1e-6 * config["gamma_bar"]).tolist())
    rows = []
    for k in sorted(lines):
        f, t = grid.line_buses(k)
        rows.append({"line": int(grid.line_ids[k]), "from_bus": f, "to_bus": t,
                     **{name: float(g[k]) for name, (g, _, _) in columns.items()}})
    doc = {
        "case": grid.name,
        "model": result.model,
        "config": config,
        "status": result.status,
        "iterations": result.iterations,
        "certificate": result.certificate,
        "objective_units": "p.u.^2" if result.model == "voltage" else "MW",
        "table": rows,
        "columns": {name: _column_stats(grid, result.model, v, s)
                    for name, (_, v, s) in columns.items()},
        "reset_nodes": result.reset_nodes,
    }
    if screening is not None:
        doc["screening"] = screening
    if comparison is not None:
        doc["comparison"] = comparison
    return doc


def trace_rows(grid, result):
    for tr in result.trace:
        yield [tr["iteration"], tr["objective"], "" if tr["alpha"] is None else tr["alpha"],
               "" if tr["step_norm"] is None else tr["step_norm"],
               ";".join(f"{int(grid.line_ids[k])}:{v:.6g}" for k, v in enumerate(tr["gamma"]) if v > 0)]


def voltage_profile_rows(grid, base_V, profiles):
    for i, b in enumerate(grid.bus_ids):
        yield [int(b), float(base_V[i])] + [float(p[i]) if p is not None else "" for p in profiles]
