"""MATPOWER case parsing and the canonical JSON interchange format.

Only the ``baseMVA``, ``bus``, ``gen`` and ``branch`` assignments are read.
Other ``mpc.*`` fields (``gencost``, ``bus_name``, ``areas`` ...) are skipped
with a warning; ``dcline`` is rejected because dropping it would change the
network.
"""

from __future__ import annotations

import json
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (IslandedGrid, MalformedCase, MultipleSlack, NoSlack,
                     SchemaViolation, UnsupportedFeature)
from .grid import DEMAND, GEN, SLACK, Grid

log = logging.getLogger(__name__)

FORMAT_VERSION = "1.0"

BUS_COLS, GEN_COLS, BRANCH_COLS = 13, 8, 11
# bus: bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
# gen: bus Pg Qg Qmax Qmin Vg mBase status ...
# branch: fbus tbus r x b rateA rateB rateC ratio angle status ...
UNSUPPORTED = {"dcline": "DC line sections"}

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")
_NUMBER = re.compile(r"^[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?$|^[+-]?(?:Inf|inf|NaN|nan)$")


@dataclass
class RawCase:
    """Verbatim numeric tables from a case file, rows in file order."""

    base_mva: float
    bus: np.ndarray
    gen: np.ndarray
    branch: np.ndarray
    name: str = "case"
    ignored: list = field(default_factory=list)

    def __post_init__(self):
        if not self.base_mva > 0:
            raise MalformedCase("baseMVA must be positive")
        ids = set(self.bus[:, 0].astype(int))
        if len(ids) != len(self.bus):
            raise MalformedCase("duplicate bus numbers")
        for k, (f, t) in enumerate(self.branch[:, :2].astype(int), start=1):
            if f not in ids or t not in ids:
                raise MalformedCase(f"branch {k} references unknown bus {f if f not in ids else t}")
        for k, b in enumerate(self.gen[:, 0].astype(int), start=1):
            if b not in ids:
                raise MalformedCase(f"generator {k} references unknown bus {b}")
        n_slack = int(np.sum(self.bus[:, 1] == 3))
        if n_slack == 0:
            raise NoSlack("no bus has type 3")
        if n_slack > 1:
            raise MultipleSlack(f"{n_slack} buses have type 3")


def _strip_comment(line):
    # '%' inside quoted strings never occurs in the numeric subset we read
    i = line.find("%")
    return line if i < 0 else line[:i]


def _read_matrix(lines, start, first_line_no, name):
    """Parse rows between ``[`` and ``]``; returns (array, next line index)."""
    rows = []
    i = start
    text, offset = lines[i], None
    open_at = text.find("[")
    if open_at < 0:
        raise MalformedCase(f"expected '[' after mpc.{name}", first_line_no + i)
    text = text[open_at + 1:]
    col0 = open_at + 2
    while True:
        body = _strip_comment(text)
        close_at = body.find("]")
        done = close_at >= 0
        if done:
            body = body[:close_at]
        for chunk in body.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            row = []
            for tok in tokens:
                if not _NUMBER.match(tok):
                    col = (lines[i].find(tok) + 1) if tok in lines[i] else col0
                    raise MalformedCase(f"non-numeric token {tok!r} in mpc.{name}",
                                        first_line_no + i, col)
                row.append(float(tok))
            rows.append((row, first_line_no + i))
        if done:
            break
        i += 1
        if i >= len(lines):
            raise MalformedCase(f"unterminated matrix mpc.{name}", first_line_no + start)
        text = lines[i]
        col0 = 1
    if not rows:
        return np.zeros((0, 0)), i + 1
    width = len(rows[0][0])
    for row, line_no in rows:
        if len(row) != width:
            raise MalformedCase(f"ragged row in mpc.{name}: expected {width} values, got {len(row)}",
                                line_no)
    return np.array([r for r, _ in rows], dtype=float), i + 1


def parse_matpower(text, name="case"):
    """Parse MATPOWER case text into a :class:`RawCase`."""
    lines = text.splitlines()
    found = {}
    i = 0
    while i < len(lines):
        code = _strip_comment(lines[i])
        m = _ASSIGN.search(code)
        if not m:
            i += 1
            continue
        key = m.group(1)
        rest = code[m.end():].strip()
        if key in UNSUPPORTED:
            raise UnsupportedFeature(f"mpc.{key} ({UNSUPPORTED[key]}) is not supported")
        if key == "baseMVA":
            tok = rest.rstrip(";").strip()
            if not _NUMBER.match(tok):
                raise MalformedCase(f"non-numeric baseMVA {tok!r}", i + 1, m.end() + 1)
            found[key] = float(tok)
            i += 1
        elif key in ("bus", "gen", "branch"):
            mat, i = _read_matrix(lines, i, 1, key)
            found[key] = mat
        else:
            if key != "version":
                found.setdefault("_ignored", []).append(key)
            # skip over any multi-line value
            if rest.startswith("[") or rest.startswith("{"):
                closer = "]" if rest.startswith("[") else "}"
                while closer not in _strip_comment(lines[i]):
                    i += 1
            i += 1
    for key in ("baseMVA", "bus", "gen", "branch"):
        if key not in found:
            raise MalformedCase(f"missing required field mpc.{key}")
    for key, width in (("bus", BUS_COLS), ("gen", GEN_COLS), ("branch", BRANCH_COLS)):
        if found[key].size and found[key].shape[1] < width:
            raise MalformedCase(f"mpc.{key} needs at least {width} columns, has {found[key].shape[1]}")
    ignored = found.get("_ignored", [])
    if ignored:
        warnings.warn(f"ignoring unsupported case fields: {', '.join(ignored)}", stacklevel=2)
    return RawCase(found["baseMVA"], found["bus"], found["gen"], found["branch"],
                   name=name, ignored=ignored)


def to_grid(raw):
    """Convert a :class:`RawCase` to a per-unit :class:`Grid`."""
    base = raw.base_mva
    bus = raw.bus
    ids = bus[:, 0].astype(int)
    index = {b: k for k, b in enumerate(ids)}
    n = len(ids)
    if np.any(bus[:, 1] == 4):
        raise UnsupportedFeature("isolated buses (type 4)")

    kind = np.full(n, DEMAND)
    Pg = np.zeros(n)
    Qg = np.zeros(n)
    Vset = bus[:, 7].copy()
    has_gen = np.zeros(n, dtype=bool)
    for row in raw.gen:
        if row[7] <= 0:
            continue
        k = index[int(row[0])]
        Pg[k] += row[1] / base
        Qg[k] += row[2] / base
        if not has_gen[k]:
            Vset[k] = row[5]
            has_gen[k] = True
    kind[has_gen] = GEN
    slack = np.flatnonzero(bus[:, 1] == 3)
    kind[slack] = SLACK
    s = int(slack[0])
    if has_gen[s]:
        pass
    else:
        log.warning("slack bus %d has no in-service generator; using file Vm", ids[s])

    br = raw.branch
    live = br[:, 10] > 0
    dropped = np.flatnonzero(~live) + 1
    if len(dropped):
        log.info("dropping %d out-of-service branches: %s", len(dropped), dropped.tolist())
    br_live = br[live]
    f = np.array([index[int(b)] for b in br_live[:, 0]], dtype=int)
    t = np.array([index[int(b)] for b in br_live[:, 1]], dtype=int)
    tap = br_live[:, 8].copy()
    tap[tap == 0] = 1.0

    graph = coo_matrix((np.ones(len(f)), (f, t)), shape=(n, n))
    n_comp, _ = connected_components(graph, directed=False)
    if n_comp > 1:
        raise IslandedGrid(f"in-service network has {n_comp} connected components")

    return Grid(
        name=raw.name,
        base_mva=base,
        bus_ids=ids,
        kind=kind,
        Pd=bus[:, 2] / base,
        Qd=bus[:, 3] / base,
        Pg=Pg,
        Qg=Qg,
        Vset=Vset,
        Va0=np.deg2rad(bus[:, 8]),
        Vmin=bus[:, 12],
        Vmax=bus[:, 11],
        Gs=bus[:, 4] / base,
        Bs=bus[:, 5] / base,
        line_from=f,
        line_to=t,
        r=br_live[:, 2],
        x=br_live[:, 3],
        b_sh=br_live[:, 4],
        tap=tap,
        shift=np.deg2rad(br_live[:, 9]),
        line_ids=np.flatnonzero(live) + 1,
        n_file_branches=len(br),
    )


def bundled_cases():
    return sorted(p.name for p in resources.files("gridstrike.data.cases").iterdir()
                  if p.name.endswith(".m"))


def resolve_case_path(path):
    """Accept a filesystem path or the name of a bundled MATPOWER case."""
    p = Path(path)
    if p.exists():
        return p
    name = p.name if p.suffix == ".m" else p.name + ".m"
    bundled = resources.files("gridstrike.data.cases") / name
    if bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(f"no such case file: {path}")


def load_case(path):
    """Read a ``.m`` or canonical ``.json`` case (or a bundled case name)."""
    p = resolve_case_path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        return read_json(text).grid
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        raw = parse_matpower(text, name=p.stem)
    return to_grid(raw)


# --- canonical JSON -------------------------------------------------------

_BUS_FIELDS = ("bus_ids", "kind", "Pd", "Qd", "Pg", "Qg", "Vset", "Va0",
               "Vmin", "Vmax", "Gs", "Bs", "sign_violation")
_LINE_FIELDS = ("line_ids", "line_from", "line_to", "r", "x", "b_sh", "tap", "shift")
_KIND_CODES = {SLACK: "slack", GEN: "generator", DEMAND: "demand"}
_KIND_FROM = {v: k for k, v in _KIND_CODES.items()}


@dataclass
class CanonicalCaseDocument:
    grid: Grid
    provenance: dict = field(default_factory=dict)
    version: str = FORMAT_VERSION


def _num(v):
    v = float(v)
    if math.isinf(v) or math.isnan(v):
        raise ValueError("non-finite value in grid")
    return v


def grid_to_dict(grid):
    buses = []
    for k in range(grid.n_bus):
        buses.append({
            "id": int(grid.bus_ids[k]),
            "kind": _KIND_CODES[int(grid.kind[k])],
            "Pd": _num(grid.Pd[k]), "Qd": _num(grid.Qd[k]),
            "Pg": _num(grid.Pg[k]), "Qg": _num(grid.Qg[k]),
            "Vset": _num(grid.Vset[k]), "Va0": _num(grid.Va0[k]),
            "Vmin": _num(grid.Vmin[k]), "Vmax": _num(grid.Vmax[k]),
            "Gs": _num(grid.Gs[k]), "Bs": _num(grid.Bs[k]),
            "sign_violation": bool(grid.sign_violation[k]),
        })
    lines = []
    for k in range(grid.n_line):
        lines.append({
            "id": int(grid.line_ids[k]),
            "from": int(grid.bus_ids[grid.line_from[k]]),
            "to": int(grid.bus_ids[grid.line_to[k]]),
            "r": _num(grid.r[k]), "x": _num(grid.x[k]), "b_sh": _num(grid.b_sh[k]),
            "tap": _num(grid.tap[k]), "shift": _num(grid.shift[k]),
        })
    return {"name": grid.name, "base_mva": _num(grid.base_mva),
            "n_file_branches": int(grid.n_file_branches), "buses": buses, "lines": lines}


def _require(obj, key, ptr, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaViolation(f"missing required field {key!r}", f"{ptr}/{key}")
    val = obj[key]
    if kind is not None:
        kinds = kind if isinstance(kind, tuple) else (kind,)
        # bool is an int subclass; only accept it where bool is asked for
        if not isinstance(val, kinds) or (isinstance(val, bool) and bool not in kinds):
            names = "/".join(k.__name__ for k in kinds)
            raise SchemaViolation(f"expected {names}", f"{ptr}/{key}")
    return val


def grid_from_dict(d, ptr="/grid"):
    num = (int, float)
    name = _require(d, "name", ptr, str)
    base = _require(d, "base_mva", ptr, num)
    nfb = _require(d, "n_file_branches", ptr, int)
    buses = _require(d, "buses", ptr, list)
    lines = _require(d, "lines", ptr, list)
    cols = {k: [] for k in _BUS_FIELDS}
    for i, b in enumerate(buses):
        p = f"{ptr}/buses/{i}"
        cols["bus_ids"].append(_require(b, "id", p, int))
        kind = _require(b, "kind", p, str)
        if kind not in _KIND_FROM:
            raise SchemaViolation(f"unknown bus kind {kind!r}", f"{p}/kind")
        cols["kind"].append(_KIND_FROM[kind])
        for key in ("Pd", "Qd", "Pg", "Qg", "Vset", "Va0", "Vmin", "Vmax", "Gs", "Bs"):
            cols[key].append(_require(b, key, p, num))
        cols["sign_violation"].append(_require(b, "sign_violation", p, bool))
    index = {b: k for k, b in enumerate(cols["bus_ids"])}
    lcols = {k: [] for k in _LINE_FIELDS}
    for i, ln in enumerate(lines):
        p = f"{ptr}/lines/{i}"
        lcols["line_ids"].append(_require(ln, "id", p, int))
        for end, key in (("from", "line_from"), ("to", "line_to")):
            b = _require(ln, end, p, int)
            if b not in index:
                raise SchemaViolation(f"unknown bus {b}", f"{p}/{end}")
            lcols[key].append(index[b])
        for key in ("r", "x", "b_sh", "tap", "shift"):
            lcols[key].append(_require(ln, key, p, num))
    return Grid(name=name, base_mva=float(base), n_file_branches=nfb,
                **{k: np.array(v) for k, v in cols.items()},
                **{k: np.array(v) for k, v in lcols.items()})


def write_json(doc):
    payload = {"version": doc.version, "grid": grid_to_dict(doc.grid),
               "provenance": doc.provenance}
    # repr-based float formatting in json round-trips exactly
    return json.dumps(payload, indent=1, sort_keys=True)


def read_json(text):
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"invalid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise SchemaViolation("document must be an object")
    version = _require(d, "version", "", str)
    grid = grid_from_dict(_require(d, "grid", "", dict))
    prov = d.get("provenance", {})
    if not isinstance(prov, dict):
        raise SchemaViolation("expected object", "/provenance")
    return CanonicalCaseDocument(grid=grid, provenance=prov, version=version)
