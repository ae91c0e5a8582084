"""Network data model and attack-perturbed admittance matrices.

An attack multiplies the series impedance of line ``l`` by ``1 + gamma[l]``,
so the series admittance becomes ``y_l / (1 + gamma[l])``. Line-charging and
bus shunts are left untouched. Every derivative in this module is with
respect to those relative impedance increases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch

SLACK, GEN, DEMAND = 0, 1, 2
KIND_NAMES = {SLACK: "slack", GEN: "generator", DEMAND: "demand"}


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable per-unit network.

    Buses are indexed ``0..n_bus-1`` internally; ``bus_ids`` keeps the
    external numbering. Lines are the in-service branches in file order and
    ``line_ids`` holds their 1-based position in the source file, which is
    the numbering used in every report.
    """

    name: str
    base_mva: float
    bus_ids: np.ndarray
    kind: np.ndarray
    Pd: np.ndarray
    Qd: np.ndarray
    Pg: np.ndarray
    Qg: np.ndarray
    Vset: np.ndarray
    Va0: np.ndarray
    Vmin: np.ndarray
    Vmax: np.ndarray
    Gs: np.ndarray
    Bs: np.ndarray
    line_from: np.ndarray
    line_to: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b_sh: np.ndarray
    tap: np.ndarray
    shift: np.ndarray
    line_ids: np.ndarray
    n_file_branches: int
    sign_violation: np.ndarray = field(default=None)

    def __post_init__(self):
        ints = {"bus_ids", "kind", "line_from", "line_to", "line_ids"}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if name in ("name", "base_mva", "n_file_branches"):
                continue
            if name == "sign_violation":
                continue
            object.__setattr__(self, name, _frozen(value, int if name in ints else float))
        if np.any((self.r == 0) & (self.x == 0)):
            raise ValueError("every line needs a nonzero series impedance")
        if np.any(self.Vmin >= self.Vmax):
            raise ValueError("Vmin must be strictly below Vmax")
        if self.sign_violation is None:
            object.__setattr__(self, "sign_violation", _frozen(self._sign_violations(), bool))
        else:
            object.__setattr__(self, "sign_violation", _frozen(self.sign_violation, bool))

    def _sign_violations(self):
        P, Q = self.P, self.Q
        bad = np.zeros(self.n_bus, dtype=bool)
        bad[self.gen] = P[self.gen] <= 0
        bad[self.dem] = (P[self.dem] >= 0) | (Q[self.dem] >= 0)
        return bad

    @property
    def n_bus(self):
        return len(self.bus_ids)

    @property
    def n_line(self):
        return len(self.line_ids)

    @property
    def P(self):
        return self.Pg - self.Pd

    @property
    def Q(self):
        return self.Qg - self.Qd

    @property
    def slack(self):
        return int(np.flatnonzero(self.kind == SLACK)[0])

    @property
    def gen(self):
        return np.flatnonzero(self.kind == GEN)

    @property
    def dem(self):
        return np.flatnonzero(self.kind == DEMAND)

    @property
    def non_slack(self):
        return np.flatnonzero(self.kind != SLACK)

    def bus_index(self, bus_id):
        hits = np.flatnonzero(self.bus_ids == bus_id)
        if len(hits) == 0:
            raise KeyError(f"no bus {bus_id}")
        return int(hits[0])

    def line_index(self, line_id):
        """Map a 1-based file branch number to the internal line position."""
        hits = np.flatnonzero(self.line_ids == line_id)
        if len(hits) == 0:
            raise KeyError(f"branch {line_id} is not an in-service line")
        return int(hits[0])

    def line_buses(self, k):
        """External (from, to) bus ids of internal line ``k``."""
        return int(self.bus_ids[self.line_from[k]]), int(self.bus_ids[self.line_to[k]])

    def lines_by_pair(self, pairs):
        """Internal line positions for a list of unordered bus-id pairs."""
        out = []
        for a, b in pairs:
            want = {int(a), int(b)}
            hits = [k for k in range(self.n_line) if set(self.line_buses(k)) == want]
            if not hits:
                raise KeyError(f"no line between buses {a} and {b}")
            out.extend(hits)
        return out

    def zero_attack(self):
        return np.zeros(self.n_line)


@dataclass(frozen=True)
class AttackVector:
    gamma: np.ndarray
    gamma_bar: float
    kappa: float

    def __post_init__(self):
        object.__setattr__(self, "gamma", _frozen(self.gamma))

    def is_feasible(self, tol=1e-9):
        g = self.gamma
        return bool(np.all(g >= -tol) and np.all(g <= self.gamma_bar + tol)
                    and g.sum() <= self.kappa * self.gamma_bar + tol)

    @classmethod
    def from_lines(cls, grid, line_values, gamma_bar, kappa=None):
        """Build from ``{file_line_id: gamma}``."""
        g = grid.zero_attack()
        for lid, val in line_values.items():
            g[grid.line_index(lid)] = val
        if kappa is None:
            kappa = g.sum() / gamma_bar if gamma_bar > 0 else 0.0
        return cls(g, gamma_bar, kappa)


def _as_gamma(grid, attack):
    gamma = attack.gamma if isinstance(attack, AttackVector) else attack
    gamma = np.zeros(grid.n_line) if gamma is None else np.asarray(gamma, dtype=float)
    if gamma.shape != (grid.n_line,):
        raise DimensionMismatch(f"attack has shape {gamma.shape}, grid has {grid.n_line} lines")
    return gamma


def series_admittance(grid):
    return 1.0 / (grid.r + 1j * grid.x)


def branch_blocks(grid, gamma, order=0):
    """Per-line 2x2 branch admittance blocks (or their gamma-derivatives).

    Returns ``(yff, yft, ytf, ytt)``. ``order=1`` gives the first derivative
    with respect to the line's own gamma, ``order=2`` the second.
    """
    ys0 = series_admittance(grid)
    s = 1.0 + gamma
    if order == 0:
        ys = ys0 / s
        charging = 0.5j * grid.b_sh
    elif order == 1:
        ys = -ys0 / s**2
        charging = 0.0
    elif order == 2:
        ys = 2.0 * ys0 / s**3
        charging = 0.0
    else:
        raise ValueError("order must be 0, 1 or 2")
    T = grid.tap * np.exp(1j * grid.shift)
    ytt = ys + charging
    yff = ytt / (T * np.conj(T))
    yft = -ys / np.conj(T)
    ytf = -ys / T
    return yff, yft, ytf, ytt


@dataclass(frozen=True)
class AdmittanceView:
    """Bus admittance at one attack, with per-line gamma partials.

    ``d_blocks[k]`` are the four branch entries ``d(Yff, Yft, Ytf, Ytt)/d gamma_k``;
    they land on positions (f,f), (f,t), (t,f), (t,t) of ``Ybus``.
    """

    Ybus: sp.csr_matrix
    gamma: np.ndarray
    blocks: tuple
    d_blocks: tuple
    d2_blocks: tuple
    line_from: np.ndarray
    line_to: np.ndarray

    @property
    def G(self):
        return self.Ybus.real

    @property
    def B(self):
        return self.Ybus.imag

    def dense(self):
        return self.Ybus.toarray()


def assemble_ybus(grid, blocks):
    n = grid.n_bus
    f, t = grid.line_from, grid.line_to
    yff, yft, ytf, ytt = blocks
    rows = np.concatenate([f, f, t, t, np.arange(n)])
    cols = np.concatenate([f, t, f, t, np.arange(n)])
    vals = np.concatenate([yff, yft, ytf, ytt, grid.Gs + 1j * grid.Bs])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def build_admittance(grid, attack=None):
    """Perturbed bus admittance ``G(gamma) + jB(gamma)`` and its partials."""
    gamma = _as_gamma(grid, attack)
    blocks = branch_blocks(grid, gamma, 0)
    return AdmittanceView(
        Ybus=assemble_ybus(grid, blocks),
        gamma=_frozen(gamma),
        blocks=blocks,
        d_blocks=branch_blocks(grid, gamma, 1),
        d2_blocks=branch_blocks(grid, gamma, 2),
        line_from=grid.line_from,
        line_to=grid.line_to,
    )


def admittance_gamma_sensitivity(grid, attack, line):
    """Partials of the four matrix entries touched by ``line`` (internal index).

    Returns ``{(i, j): dY_ij/dgamma_line}`` with bus positions as keys; the
    real parts are dG and the imaginary parts dB. Entries on parallel lines
    are unaffected, so only this line's contribution is differentiated.
    """
    gamma = _as_gamma(grid, attack)
    if not 0 <= line < grid.n_line:
        raise IndexError(f"line {line} out of range")
    d = branch_blocks(grid, gamma, 1)
    f, t = int(grid.line_from[line]), int(grid.line_to[line])
    out = {}
    for (i, j), arr in zip([(f, f), (f, t), (t, f), (t, t)], d):
        out[(i, j)] = out.get((i, j), 0) + arr[line]
    return out
