"""Feasibility restoration: the minimum load/generation adjustment F_L.

Variables, in order::

    V_D | theta_{G,D} | sigma+_G | sigma-_G | rho_D | gamma_W (optional)

Equality rows are active mismatch at generator buses, active mismatch at
demand buses and reactive mismatch at demand buses, each shifted by the
adjustment terms. All internal quantities are per-unit; reported
objectives are in MW.

The same builder covers three programs:

* ``F_L(gamma)`` with gamma a parameter (``mode="restore"``),
* the safe-distribution program, where ``gamma`` on a working set of
  lines becomes a decision variable under a fixed budget,
* maximum loadability (``mode="loadability"``): generation is frozen and
  demand may only grow.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateSolution
from .grid import AttackVector, branch_blocks, assemble_ybus, build_admittance
from .nlp import IpmOptions, NlpProblem, NlpStatus, kkt_sensitivity, solve
from .powerflow import (PowerFlowSolution, branch_power_gamma, d2S_dV2, dS_dV,
                        power_injection, solve_power_flow)

log = logging.getLogger(__name__)

SHED_REPORT_MW = 1e-3
AT_BOUND_TOL = 1e-5
RHO_EXTEND = 10.0


class RestorationStatus(str, enum.Enum):
    FEASIBLE = "Feasible"
    INFINITE = "Infinite"


@dataclass(frozen=True)
class RestorationInstance:
    """Bounds and weights for one restoration program.

    ``rho_lower`` holds per-demand-bus lower bounds on the shed fraction;
    released target nodes carry ``-RHO_EXTEND`` there.
    """

    v_lower: np.ndarray
    v_upper: np.ndarray
    sigma_plus_ub: np.ndarray
    sigma_minus_ub: np.ndarray
    rho_ub: np.ndarray
    rho_lower: np.ndarray
    w_gen: np.ndarray
    w_dem: np.ndarray
    mode: str = "restore"

    @classmethod
    def default(cls, grid, v_limits=None, weights=None):
        """Unit weights, full adjustment range, zero range on flagged buses.

        ``v_limits`` is ``(vmin, vmax)``; ``None`` takes the case file limits.
        """
        G, D = grid.gen, grid.dem
        if v_limits is None:
            vl, vu = grid.Vmin[D], grid.Vmax[D]
        else:
            vl = np.full(len(D), float(v_limits[0]))
            vu = np.full(len(D), float(v_limits[1]))
        ok_g = ~grid.sign_violation[G]
        ok_d = ~grid.sign_violation[D]
        w = np.ones(grid.n_bus) if weights is None else np.asarray(weights, float)
        return cls(
            v_lower=vl, v_upper=vu,
            sigma_plus_ub=ok_g.astype(float), sigma_minus_ub=ok_g.astype(float),
            rho_ub=ok_d.astype(float), rho_lower=np.zeros(len(D)),
            w_gen=w[G], w_dem=w[D],
        )

    def with_rho_lower(self, rho_lower):
        return replace(self, rho_lower=np.asarray(rho_lower, float))

    def release(self, grid, target_buses, extend=RHO_EXTEND):
        """Lower the shed bound to ``-extend`` on the given demand bus ids."""
        D = grid.dem
        lower = self.rho_lower.copy()
        for b in target_buses:
            k = grid.bus_index(b)
            pos = np.flatnonzero(D == k)
            if len(pos) and self.rho_ub[pos[0]] > 0:
                lower[pos[0]] = -extend
        return self.with_rho_lower(lower)

    def loadability(self, grid, extend=10.0):
        """Frozen generation, demand allowed to increase by up to ``extend``."""
        D = grid.dem
        ok = ~grid.sign_violation[D]
        return replace(self, sigma_plus_ub=np.zeros_like(self.sigma_plus_ub),
                       sigma_minus_ub=np.zeros_like(self.sigma_minus_ub),
                       rho_ub=np.zeros(len(D)), rho_lower=np.where(ok, -extend, 0.0),
                       mode="loadability")


class RestorationModel:
    """Builds :class:`NlpProblem` instances for one grid and instance."""

    def __init__(self, grid, instance, gamma_lines=None, budget=None, gamma_bar=None,
                 budget_slack=False):
        self.grid = grid
        self.inst = instance
        G, D, ns = grid.gen, grid.dem, grid.non_slack
        self.G, self.D, self.ns = G, D, ns
        nG, nD, nN = len(G), len(D), len(ns)
        self.gamma_lines = None if gamma_lines is None else np.asarray(gamma_lines, int)
        nW = 0 if self.gamma_lines is None else len(self.gamma_lines)
        self.budget = budget
        self.gamma_bar = gamma_bar
        # an optional slack turns the budget equality into e^T gamma <= budget
        nS = 1 if (nW and budget_slack) else 0
        off = np.cumsum([0, nD, nN, nG, nG, nD, nS, nW])
        self.iV, self.ith, self.isp, self.ism, self.irho, self.islk, self.igam = (
            np.arange(off[k], off[k + 1]) for k in range(7))
        self.n = int(off[-1])
        self.m = nG + 2 * nD + (1 if nW else 0)
        P, Q = grid.P, grid.Q
        self.absPG = np.abs(P[G])
        self.absPD = np.abs(P[D])
        self.absQD = np.abs(Q[D])
        self.cost = np.zeros(self.n)
        self.cost[self.isp] = instance.w_gen * self.absPG
        self.cost[self.ism] = instance.w_gen * self.absPG
        self.cost[self.irho] = instance.w_dem * self.absPD
        # bus-indexed row positions of each equality family
        self._ybus_cache = {}

    # --- layout helpers --------------------------------------------------

    def bounds(self):
        inst = self.inst
        lo = np.full(self.n, -np.inf)
        hi = np.full(self.n, np.inf)
        lo[self.iV], hi[self.iV] = inst.v_lower, inst.v_upper
        lo[self.isp], hi[self.isp] = 0.0, inst.sigma_plus_ub
        lo[self.ism], hi[self.ism] = 0.0, inst.sigma_minus_ub
        lo[self.irho], hi[self.irho] = inst.rho_lower, inst.rho_ub
        if len(self.igam):
            lo[self.igam], hi[self.igam] = 0.0, self.gamma_bar
        lo[self.islk], hi[self.islk] = 0.0, self.budget if len(self.islk) else 0.0
        return lo, hi

    def state(self, z):
        g = self.grid
        V = g.Vset.copy()
        V[self.D] = z[self.iV]
        theta = np.zeros(g.n_bus)
        theta[g.slack] = g.Va0[g.slack]
        theta[self.ns] = z[self.ith]
        return V, theta

    def full_gamma(self, z, gamma):
        if self.gamma_lines is None:
            return gamma
        g = np.zeros(self.grid.n_line) if gamma is None else np.array(gamma, float)
        g[self.gamma_lines] = z[self.igam]
        return g

    def start_point(self, V=None, theta=None, y=None, gamma_w=None):
        g = self.grid
        if V is None:
            V, theta = g.Vset.copy(), np.zeros(g.n_bus)
        z = np.zeros(self.n)
        lo, hi = self.bounds()
        z[self.iV] = np.clip(V[self.D], lo[self.iV], hi[self.iV])
        z[self.ith] = theta[self.ns]
        if y is not None:
            z[np.concatenate([self.isp, self.ism, self.irho])] = y
        if len(self.igam):
            z[self.igam] = gamma_w if gamma_w is not None else self.budget / max(len(self.igam), 1)
        return z

    def _ybus(self, gamma):
        key = gamma.tobytes()
        hit = self._ybus_cache.get(key)
        if hit is None:
            blocks = branch_blocks(self.grid, gamma, 0)
            hit = (assemble_ybus(self.grid, blocks), branch_blocks(self.grid, gamma, 1),
                   branch_blocks(self.grid, gamma, 2))
            if len(self._ybus_cache) > 8:
                self._ybus_cache.clear()
            self._ybus_cache[key] = hit
        return hit

    def _lam_weights(self, lam):
        """Complex per-bus weights ``lamP - j lamQ`` for the power rows."""
        nG, nD = len(self.G), len(self.D)
        w = np.zeros(self.grid.n_bus, dtype=complex)
        w[self.G] += lam[:nG]
        w[self.D] += lam[nG:nG + nD]
        w[self.D] -= 1j * lam[nG + nD:nG + 2 * nD]
        return w

    # --- callbacks -------------------------------------------------------

    def f(self, z, gamma=None):
        return float(self.cost @ z)

    def grad(self, z, gamma=None):
        return self.cost.copy()

    def c(self, z, gamma=None):
        g = self.grid
        gam = self.full_gamma(z, gamma)
        Ybus = self._ybus(gam)[0]
        V, theta = self.state(z)
        S = power_injection(Ybus, V, theta)
        FP = S.real - g.P
        FQ = S.imag - g.Q
        out = [FP[self.G] - self.absPG * (z[self.isp] - z[self.ism]),
               FP[self.D] - self.absPD * z[self.irho],
               FQ[self.D] - self.absQD * z[self.irho]]
        if len(self.igam):
            out.append([z[self.igam].sum() + z[self.islk].sum() - self.budget])
        return np.concatenate(out)

    def _dS_dgamma_rows(self, V, theta, blocks_d, lines):
        """Sparse (m_power x len(lines)) block of dc/dgamma for the power rows."""
        g = self.grid
        dS_f, dS_t = branch_power_gamma(g, blocks_d, V, theta)
        nG, nD = len(self.G), len(self.D)
        rowP = np.full(g.n_bus, -1)
        rowP[self.G] = np.arange(nG)
        rowP[self.D] = nG + np.arange(nD)
        rowQ = np.full(g.n_bus, -1)
        rowQ[self.D] = nG + nD + np.arange(nD)
        rows, cols, vals = [], [], []
        for j, l in enumerate(lines):
            for bus, ds in ((g.line_from[l], dS_f[l]), (g.line_to[l], dS_t[l])):
                if rowP[bus] >= 0:
                    rows.append(rowP[bus]); cols.append(j); vals.append(ds.real)
                if rowQ[bus] >= 0:
                    rows.append(rowQ[bus]); cols.append(j); vals.append(ds.imag)
        return sp.csr_matrix((vals, (rows, cols)), shape=(nG + 2 * nD, len(lines)))

    def jac(self, z, gamma=None):
        g = self.grid
        gam = self.full_gamma(z, gamma)
        Ybus, d1, _ = self._ybus(gam)
        V, theta = self.state(z)
        dVa, dVm = dS_dV(Ybus, V * np.exp(1j * theta))
        G, D, ns = self.G, self.D, self.ns
        nG, nD = len(G), len(D)
        x_block = sp.bmat([
            [dVm[G][:, D].real, dVa[G][:, ns].real],
            [dVm[D][:, D].real, dVa[D][:, ns].real],
            [dVm[D][:, D].imag, dVa[D][:, ns].imag]])
        PG = sp.diags(self.absPG)
        y_block = sp.bmat([
            [-PG, PG, None],
            [sp.csr_matrix((nD, nG)), None, -sp.diags(self.absPD)],
            [None, None, -sp.diags(self.absQD)]])
        blocks = [x_block, y_block]
        if len(self.islk):
            blocks.append(sp.csr_matrix((nG + 2 * nD, 1)))
        if len(self.igam):
            blocks.append(self._dS_dgamma_rows(V, theta, d1, self.gamma_lines))
            J = sp.hstack(blocks)
            cols = np.concatenate([self.islk, self.igam])
            last = sp.csr_matrix((np.ones(len(cols)), (np.zeros(len(cols), int), cols)),
                                 shape=(1, self.n))
            return sp.vstack([J, last]).tocsr()
        return sp.hstack(blocks).tocsr()

    def _cross_terms(self, V, theta, blocks_d, w, lines):
        """Gradient in (Va, Vm) of ``Re(sum_i w_i dS_i/dgamma_l)`` for each line.

        Returns a sparse (2 n_bus x len(lines)) matrix with Va rows first.
        """
        g = self.grid
        a, b, c, d = (arr[lines] for arr in blocks_d)
        f, t = g.line_from[lines], g.line_to[lines]
        mf, mt = V[f], V[t]
        ejd = np.exp(1j * (theta[f] - theta[t]))
        wf, wt = w[f], w[t]
        X = wf * np.conj(b) * mf * mt * ejd
        Y = wt * np.conj(c) * mf * mt / ejd
        d_af = np.real(1j * X - 1j * Y)
        d_mf = np.real(2 * wf * np.conj(a) * mf + X / mf + Y / mf)
        d_mt = np.real(2 * wt * np.conj(d) * mt + X / mt + Y / mt)
        n = g.n_bus
        k = np.arange(len(lines))
        rows = np.concatenate([f, t, n + f, n + t])
        cols = np.concatenate([k, k, k, k])
        vals = np.concatenate([d_af, -d_af, d_mf, d_mt])
        return sp.csr_matrix((vals, (rows, cols)), shape=(2 * n, len(lines)))

    def _select_x_rows(self, M):
        """Rows of a (Va, Vm)-indexed matrix in z order (V_D, theta_ns)."""
        n = self.grid.n_bus
        return M[np.concatenate([n + self.D, self.ns])]

    def hess(self, z, gamma=None, lam=None):
        gam = self.full_gamma(z, gamma)
        Ybus, d1, d2 = self._ybus(gam)
        V, theta = self.state(z)
        w = self._lam_weights(lam)
        Gaa, Gav, Gva, Gvv = d2S_dV2(Ybus, V * np.exp(1j * theta), w)
        D, ns = self.D, self.ns
        Hx = -sp.bmat([[Gvv[D][:, D], Gva[D][:, ns]],
                       [Gav[ns][:, D], Gaa[ns][:, ns]]]).real
        nx = Hx.shape[0]
        ny = self.n - nx - len(self.igam)
        if not len(self.igam):
            return sp.block_diag([Hx, sp.csr_matrix((ny, ny))]).tocsr()
        lines = self.gamma_lines
        cross = -self._select_x_rows(self._cross_terms(V, theta, d1, w, lines))
        dS_f, dS_t = branch_power_gamma(self.grid, d2, V, theta)
        f, t = self.grid.line_from[lines], self.grid.line_to[lines]
        hgg = -np.real(w[f] * dS_f[lines] + w[t] * dS_t[lines])
        nW = len(lines)
        H = sp.bmat([[Hx, None, cross],
                     [None, sp.csr_matrix((ny, ny)), None],
                     [cross.T, None, sp.diags(hgg)]])
        return H.tocsr()

    def jac_gamma(self, z, gamma):
        gam = self.full_gamma(z, gamma)
        _, d1, _ = self._ybus(gam)
        V, theta = self.state(z)
        return self._dS_dgamma_rows(V, theta, d1, np.arange(self.grid.n_line))

    def cross_gamma(self, z, gamma, lam):
        gam = self.full_gamma(z, gamma)
        _, d1, _ = self._ybus(gam)
        V, theta = self.state(z)
        w = self._lam_weights(lam)
        M = self._select_x_rows(self._cross_terms(V, theta, d1, w, np.arange(self.grid.n_line)))
        return sp.vstack([M, sp.csr_matrix((self.n - M.shape[0], M.shape[1]))]).tocsr()

    def problem(self):
        lo, hi = self.bounds()
        parametric = self.gamma_lines is None
        return NlpProblem(
            n=self.n, m=self.m, f=self.f, grad=self.grad, c=self.c, jac=self.jac,
            hess=self.hess, lower=lo, upper=hi,
            jac_gamma=self.jac_gamma if parametric else None,
            cross_gamma=self.cross_gamma if parametric else None,
            name=self.inst.mode)


@dataclass
class RestorationOutcome:
    status: RestorationStatus
    F_L: float
    rho: np.ndarray
    sigma_plus: np.ndarray
    sigma_minus: np.ndarray
    V: np.ndarray
    theta: np.ndarray
    buses_at_voltage_bound: list
    shed: list = field(default_factory=list)

    @property
    def feasible(self):
        return self.status == RestorationStatus.FEASIBLE


def _outcome(grid, model, sol):
    z = sol.z
    V, theta = model.state(z)
    base = grid.base_mva
    if sol.status != NlpStatus.OPTIMAL:
        return RestorationOutcome(RestorationStatus.INFINITE, np.inf, z[model.irho],
                                  z[model.isp], z[model.ism], V, theta, [], [])
    lo, hi = model.bounds()
    vD = z[model.iV]
    at = (np.abs(vD - lo[model.iV]) <= AT_BOUND_TOL) | (np.abs(vD - hi[model.iV]) <= AT_BOUND_TOL)
    at_bound = [int(grid.bus_ids[b]) for b in model.D[at]]
    shed = []
    for k, b in enumerate(model.D):
        mw = z[model.irho][k] * model.absPD[k] * base
        if abs(mw) >= SHED_REPORT_MW:
            shed.append({"bus": int(grid.bus_ids[b]), "kind": "demand",
                         "fraction": float(z[model.irho][k]), "MW": float(mw),
                         "V": float(V[b])})
    for k, b in enumerate(model.G):
        net = z[model.isp][k] - z[model.ism][k]
        mw = (z[model.isp][k] + z[model.ism][k]) * model.absPG[k] * base
        if mw >= SHED_REPORT_MW:
            shed.append({"bus": int(grid.bus_ids[b]), "kind": "generator",
                         "fraction": float(net), "MW": float(mw), "V": float(V[b])})
    return RestorationOutcome(RestorationStatus.FEASIBLE, sol.objective * base,
                              z[model.irho], z[model.isp], z[model.ism], V, theta,
                              at_bound, shed)


class Restorer:
    """Evaluates ``F_L`` repeatedly on one grid, warm-starting each solve."""

    def __init__(self, grid, instance=None, v_limits=None, ipm=None):
        self.grid = grid
        self.instance = instance or RestorationInstance.default(grid, v_limits)
        self.ipm = ipm or IpmOptions()
        self.base_pf = solve_power_flow(grid)
        self._last = None
        self._models = {}

    def model(self, instance=None):
        inst = instance or self.instance
        key = id(inst)
        hit = self._models.get(key)
        if hit is None or hit[0] is not inst:
            hit = (inst, RestorationModel(self.grid, inst))
            self._models = {key: hit}
        return hit[1]

    def _starts(self, model, gamma, start):
        if start is not None:
            yield start
        if self._last is not None:
            yield model.start_point(*model.state(self._last))
        yield model.start_point(self.base_pf.V, self.base_pf.theta)
        pf = solve_power_flow(self.grid, gamma, init=(self.base_pf.V, self.base_pf.theta))
        if pf.converged:
            yield model.start_point(pf.V, pf.theta)

    def evaluate(self, gamma, instance=None, start=None):
        gamma = gamma.gamma if isinstance(gamma, AttackVector) else np.asarray(gamma, float)
        model = self.model(instance)
        prob = model.problem()
        sol = None
        for z0 in self._starts(model, gamma, start):
            sol = solve(prob, gamma, z0, self.ipm)
            if sol.status == NlpStatus.OPTIMAL:
                self._last = sol.z
                break
        return _outcome(self.grid, model, sol), sol

    def gradient(self, gamma, sol, instance=None, method="forward"):
        """``dF_L/dgamma`` in MW via the KKT sensitivity system."""
        model = self.model(instance)
        prob = model.problem()
        base = self.grid.base_mva
        if method == "envelope":
            # first-order dual route: -lam^T dc/dgamma
            return -(prob.jac_gamma(sol.z, gamma).T @ sol.lam) * base
        dz, _, _ = kkt_sensitivity(prob, sol, gamma, self.ipm.eps_sc)
        return (dz.T @ prob.grad(sol.z, gamma)) * base


def eval_FL(grid, attack, overrides=None, v_limits=None, restorer=None):
    """Evaluate ``F_L`` at ``attack``; returns ``(RestorationOutcome, NlpSolution)``.

    ``overrides`` replaces the per-demand-bus lower bounds on the shed
    fraction (used to release target nodes).
    """
    r = restorer or Restorer(grid, v_limits=v_limits)
    inst = r.instance if overrides is None else r.instance.with_rho_lower(overrides)
    return r.evaluate(attack, inst)


def grad_FL(grid, attack, solution, restorer=None, v_limits=None, instance=None):
    r = restorer or Restorer(grid, v_limits=v_limits)
    gamma = attack.gamma if isinstance(attack, AttackVector) else np.asarray(attack, float)
    return r.gradient(gamma, solution, instance)


def solve_safe_distribution(grid, kappa, gamma_bar, working_set, instance=None, v_limits=None,
                            start=None, ipm=None, base_pf=None):
    """Minimum shed over attacks spending exactly ``kappa * gamma_bar`` on ``working_set``.

    ``working_set`` holds internal line positions; every other line keeps
    gamma = 0. ``start`` is an optional ``(z, gamma_w)`` warm start from a
    previous solve on the same working set. Returns ``(gamma, F_MW, sol)``.
    """
    W = np.asarray(sorted(working_set), int)
    if kappa < 0 or kappa > len(W) + 1e-12:
        raise ValueError(f"kappa={kappa} outside [0, |W|={len(W)}]")
    inst = instance or RestorationInstance.default(grid, v_limits)
    ipm = ipm or IpmOptions()
    pf = base_pf or solve_power_flow(grid)
    if kappa == 0 or kappa >= len(W) - 1e-12:
        # the budget pins gamma, so this is a plain restoration solve
        gamma = grid.zero_attack()
        gamma[W] = gamma_bar if kappa > 0 else 0.0
        r = Restorer(grid, inst, ipm=ipm)
        out, sol = r.evaluate(gamma)
        return gamma, out.F_L, sol
    model = RestorationModel(grid, inst, gamma_lines=W, budget=kappa * gamma_bar,
                             gamma_bar=gamma_bar)
    prob = model.problem()
    starts = []
    if start is not None:
        z, gw = start
        gw = np.clip(np.asarray(gw, float) * kappa * gamma_bar / max(np.sum(gw), 1e-12),
                     0.05 * gamma_bar, 0.95 * gamma_bar)
        starts.append(model.start_point(*model.state(z), gamma_w=gw))
    starts.append(model.start_point(pf.V, pf.theta))
    sol = None
    for z0 in starts:
        sol = solve(prob, None, z0, ipm)
        if sol.status == NlpStatus.OPTIMAL:
            break
    gamma = model.full_gamma(sol.z, None)
    value = sol.objective * grid.base_mva if sol.status == NlpStatus.OPTIMAL else np.inf
    return gamma, value, sol


@dataclass
class LoadabilityResult:
    objective: float
    margins: dict
    status: RestorationStatus


def solve_max_loadability(grid, attack=None, v_limits=None, instance=None, extend=RHO_EXTEND,
                          ipm=None):
    """Largest uniform-free demand growth with generation frozen.

    Returns per-demand-bus margins ``-rho_i |P_i|`` in MW; the objective is
    their negated sum (nonpositive whenever the nominal point is feasible).
    """
    base = instance or RestorationInstance.default(grid, v_limits)
    inst = base.loadability(grid, extend)
    gamma = grid.zero_attack() if attack is None else (
        attack.gamma if isinstance(attack, AttackVector) else np.asarray(attack, float))
    r = Restorer(grid, inst, ipm=ipm)
    out, sol = r.evaluate(gamma)
    if not out.feasible:
        return LoadabilityResult(np.inf, {}, out.status)
    model = r.model(inst)
    rho = sol.z[model.irho]
    margins = {int(grid.bus_ids[b]): float(-rho[k] * model.absPD[k] * grid.base_mva)
               for k, b in enumerate(model.D)}
    return LoadabilityResult(out.F_L, margins, out.status)
