"""Frank-Wolfe attack optimization over the budget polytope.

The attack set is ``{gamma : 0 <= gamma <= gamma_bar, sum(gamma) <= kappa * gamma_bar}``.
Two objectives are supported: the voltage disturbance ``F_V`` (half the
squared deviation of demand-bus voltages from 1 p.u.) and the power
adjustment ``F_L`` returned by the restoration program.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse.linalg as spla

from .errors import DegenerateSolution, SingularJacobian, StalledAtZeroGradient
from .grid import AttackVector, build_admittance
from .nlp import IpmOptions, NlpStatus, solve
from .powerflow import (PFOptions, reduced_gamma_jacobian, reduced_index,
                        reduced_jacobian, solve_power_flow)
from .restoration import RestorationInstance, RestorationModel, Restorer

log = logging.getLogger(__name__)

FD_STEP = 1e-4
RHO_TOL = 1e-7


@dataclass
class FwOptions:
    phi: float = 0.5
    c1: float = 0.01
    alpha_min: float = 0.01
    max_iter: int = 50
    step_tol: float = 1e-3  # relative to gamma_bar, infinity norm

    def __post_init__(self):
        if not 0 < self.phi < 1:
            raise ValueError("phi must lie in (0, 1)")
        if not 0 < self.c1 < 1:
            raise ValueError("c1 must lie in (0, 1)")
        if self.alpha_min <= 0:
            raise ValueError("alpha_min must be positive")


@dataclass
class Evaluation:
    value: float
    state: object = None

    @property
    def infinite(self):
        return not np.isfinite(self.value)


@dataclass
class DiscreteAttack:
    mode: str
    lines: list
    attack: AttackVector
    objective: float
    evaluated: int = 1


@dataclass
class AttackResult:
    model: str
    gamma_star: AttackVector
    objective: float
    iterations: int
    status: str
    trace: list = field(default_factory=list)
    gradient: np.ndarray = None
    certificate: bool = False
    discrete: dict = field(default_factory=dict)
    reset_nodes: list = field(default_factory=list)

    def attacked_lines(self, grid, tol=1e-6):
        g = self.gamma_star.gamma
        return {int(grid.line_ids[k]): float(g[k]) for k in np.flatnonzero(g > tol * max(self.gamma_star.gamma_bar, 1.0))}


# --- linear oracle ----------------------------------------------------------

def fw_linear_oracle(g, kappa, gamma_bar):
    """Vertex of the budget polytope maximizing ``g^T w``.

    The ``floor(kappa)`` largest gradient entries get ``gamma_bar``; a
    fractional budget remainder goes to the next one. Ties go to the lowest
    index.
    """
    g = np.asarray(g, float)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient must be finite")
    n = len(g)
    order = np.lexsort((np.arange(n), -g))
    w = np.zeros(n)
    full = min(int(math.floor(kappa + 1e-12)), n)
    w[order[:full]] = gamma_bar
    rest = kappa - full
    if full < n and rest > 1e-12:
        w[order[full]] = rest * gamma_bar
    return w


# --- objectives -------------------------------------------------------------

def grad_FV(grid, attack, pf):
    """Adjoint gradient of ``F_V`` with respect to gamma at a converged power flow."""
    adm = build_admittance(grid, attack)
    pvpq, pq = reduced_index(grid)
    J = reduced_jacobian(grid, adm.Ybus, pf.V, pf.theta)
    rhs = np.zeros(J.shape[0])
    rhs[len(pvpq):] = pf.V[pq] - 1.0
    if not np.any(rhs):
        return np.zeros(grid.n_line)
    try:
        a = spla.splu(J.T.tocsc()).solve(rhs)
    except RuntimeError as exc:
        raise SingularJacobian(str(exc)) from exc
    if not np.all(np.isfinite(a)):
        raise SingularJacobian("power-flow Jacobian is numerically singular")
    dR = reduced_gamma_jacobian(grid, adm, pf.V, pf.theta)
    return -(dR.T @ a)


def voltage_disturbance(grid, V):
    d = V[grid.dem] - 1.0
    return 0.5 * float(d @ d)


class VoltageObjective:
    """``F_V``; +inf when the attacked power flow has no solution."""

    name = "voltage"

    def __init__(self, grid, pf_options=None):
        self.grid = grid
        self.pf_options = pf_options or PFOptions()
        self.base = solve_power_flow(grid, options=self.pf_options)
        self._last = self.base

    def spec(self):
        return ("voltage", self.grid, self.pf_options, None, None)

    def evaluate(self, gamma):
        init = (self._last.V, self._last.theta) if self._last is not None else None
        pf = solve_power_flow(self.grid, gamma, init=init, options=self.pf_options, base=self.base)
        if not pf.converged:
            return Evaluation(math.inf, pf)
        self._last = pf
        return Evaluation(voltage_disturbance(self.grid, pf.V), pf)

    def gradient(self, gamma, ev):
        return grad_FV(self.grid, gamma, ev.state)

    def discrete_value(self, gamma):
        return self.evaluate(gamma).value


class AdjustmentObjective:
    """``F_L`` in MW under a given restoration instance."""

    name = "power"

    def __init__(self, grid, restorer=None, instance=None, kappa=None, fd_candidates=None):
        self.grid = grid
        self.restorer = restorer or Restorer(grid)
        self.instance = instance or self.restorer.instance
        self.kappa = kappa
        self.fd_candidates = fd_candidates
        self.fallbacks = 0

    def spec(self):
        r = self.restorer
        return ("power", self.grid, r.ipm, r.instance, self.instance)

    def evaluate(self, gamma, instance=None):
        out, sol = self.restorer.evaluate(gamma, instance or self.instance)
        return Evaluation(out.F_L, (out, sol))

    def gradient(self, gamma, ev):
        out, sol = ev.state
        try:
            return self.restorer.gradient(gamma, sol, self.instance)
        except DegenerateSolution as exc:
            log.info("degenerate lower-level solution (%s); finite-difference gradient", exc)
            self.fallbacks += 1
            return self._fd_gradient(gamma, ev)

    def _fd_gradient(self, gamma, ev):
        _, sol = ev.state
        g = self.restorer.gradient(gamma, sol, self.instance, method="envelope")
        k = self.fd_candidates or max(2 * int(math.ceil(self.kappa or 1)), 4)
        cand = set(np.flatnonzero(gamma > 0).tolist())
        cand.update(np.argsort(-g, kind="stable")[:k].tolist())
        for i in sorted(cand):
            h = FD_STEP
            trial = np.array(gamma, float)
            trial[i] += h
            val = self.evaluate(trial).value
            if np.isfinite(val):
                g[i] = (val - ev.value) / h
        # leave the restorer warm-started at the current point
        self.evaluate(gamma)
        return g

    def discrete_value(self, gamma):
        return self.restorer.evaluate(gamma, self.restorer.instance)[0].F_L


def make_objective(kind, grid, v_limits=None, pf_options=None, ipm=None):
    if kind == "voltage":
        return VoltageObjective(grid, pf_options)
    if kind == "power":
        return AdjustmentObjective(grid, Restorer(grid, v_limits=v_limits, ipm=ipm))
    raise ValueError(f"unknown objective {kind!r}")


# --- Frank-Wolfe ------------------------------------------------------------

def _check_feasible(gamma, kappa, gamma_bar):
    av = AttackVector(np.asarray(gamma, float), gamma_bar, kappa)
    if not av.is_feasible(1e-9):
        raise ValueError("starting attack violates the budget or box constraints")
    return av


def _record(trace, k, gamma, value, alpha, step, gnorm):
    trace.append({"iteration": k, "gamma": [float(x) for x in gamma], "objective": float(value),
                  "alpha": alpha, "step_norm": step, "grad_norm": gnorm})


def _line_search(objective, gamma, d, F, slope, opts):
    """Backtrack from ``alpha = 1``; returns ``(alpha, evaluation)`` or ``(None, None)``."""
    alpha = 1.0
    while alpha >= opts.alpha_min:
        ev = objective.evaluate(gamma + alpha * d)
        if ev.infinite or ev.value >= F + opts.c1 * alpha * slope:
            return alpha, ev
        alpha *= opts.phi
    return None, None


def fw_maximize(objective, grid, kappa, gamma_bar, gamma0=None, options=None, hook=None):
    """Frank-Wolfe with backtracking on ``objective`` (see :class:`VoltageObjective`).

    ``hook(gamma, ev)`` runs after every accepted step and may return a
    replacement evaluation (used to tighten bounds between iterations); it
    also gets a say in termination through a truthy ``hook.pending``.
    """
    opts = options or FwOptions()
    gamma = np.zeros(grid.n_line) if gamma0 is None else np.array(gamma0, float)
    _check_feasible(gamma, kappa, gamma_bar)
    trace = []
    ev = objective.evaluate(gamma)
    _record(trace, 0, gamma, ev.value, None, None, None)
    if ev.infinite:
        return _result(objective, grid, gamma, gamma_bar, kappa, ev, 0, "Certificate", trace, None)
    tol = opts.step_tol * gamma_bar
    status = "MaxIterations"
    g = None
    k = 0
    while k < opts.max_iter:
        g = objective.gradient(gamma, ev)
        if k == 0 and isinstance(objective, AdjustmentObjective) and hook is None \
                and not np.any(np.abs(g) > 1e-12):
            raise StalledAtZeroGradient("F_L gradient vanishes at the starting attack; "
                                        "release target nodes first")
        w = fw_linear_oracle(g, kappa, gamma_bar)
        d = w - gamma
        step = float(np.max(np.abs(d))) if len(d) else 0.0
        pending = hook is not None and getattr(hook, "pending", False)
        if step <= tol and not pending:
            status = "Converged"
            break
        alpha, trial = (None, None) if step <= tol else \
            _line_search(objective, gamma, d, ev.value, float(g @ d), opts)
        k += 1
        if alpha is not None:
            gamma = np.clip(gamma + alpha * d, 0.0, gamma_bar)
            ev = trial
            if ev.infinite:
                _record(trace, k, gamma, ev.value, alpha, step, float(np.linalg.norm(g)))
                return _result(objective, grid, gamma, gamma_bar, kappa, ev, k, "Certificate", trace, g)
        if hook is not None:
            ev = hook(gamma, ev) or ev
            pending = getattr(hook, "pending", False)
        _record(trace, k, gamma, ev.value, alpha, step, float(np.linalg.norm(g)))
        log.info("FW %d: objective %.6g alpha %s step %.3g", k, ev.value, alpha, step)
        if alpha is None and not pending:
            status = "SmallStep"
            break
    return _result(objective, grid, gamma, gamma_bar, kappa, ev, k, status, trace, g)


def _result(objective, grid, gamma, gamma_bar, kappa, ev, k, status, trace, g):
    return AttackResult(model=objective.name, gamma_star=AttackVector(gamma, gamma_bar, kappa),
                        objective=float(ev.value), iterations=k, status=status, trace=trace,
                        gradient=g, certificate=status == "Certificate")


class _TargetNodeReset:
    """Resets the most negative shed fraction's lower bound to zero after each step."""

    def __init__(self, objective):
        self.objective = objective
        self.pending = True
        self.reset = []

    def negative(self, ev):
        rho = ev.state[0].rho
        lower = self.objective.instance.rho_lower
        neg = np.flatnonzero((rho < -RHO_TOL) & (lower < 0))
        return neg, rho

    def __call__(self, gamma, ev):
        if ev.infinite:
            return ev
        neg, rho = self.negative(ev)
        if len(neg):
            j = neg[np.argmin(rho[neg])]
            inst = self.objective.instance
            lower = inst.rho_lower.copy()
            lower[j] = 0.0
            self.objective.instance = inst.with_rho_lower(lower)
            grid = self.objective.grid
            self.reset.append(int(grid.bus_ids[grid.dem[j]]))
            ev = self.objective.evaluate(gamma)
            neg, _ = self.negative(ev) if not ev.infinite else ([], None)
        self.pending = len(neg) > 0
        return ev


def fw_maximize_power_adjustment(grid, kappa, gamma_bar, target_nodes, restorer=None,
                                 gamma0=None, options=None, v_limits=None):
    """Power-adjustment attack with target-node release and bound resets."""
    restorer = restorer or Restorer(grid, v_limits=v_limits)
    inst = restorer.instance.release(grid, target_nodes)
    obj = AdjustmentObjective(grid, restorer, inst, kappa=kappa)
    hook = _TargetNodeReset(obj)
    hook.pending = bool(np.any(inst.rho_lower < 0))
    opts = options or FwOptions()
    # every released bound needs its own reset, so allow that many extra iterations
    opts = replace(opts, max_iter=opts.max_iter + len(target_nodes))
    res = fw_maximize(obj, grid, kappa, gamma_bar, gamma0, opts, hook=hook)
    res.reset_nodes = hook.reset
    if not res.certificate:
        # the reported value is F_L with every shed fraction nonnegative
        res.objective = obj.discrete_value(res.gamma_star.gamma)
    obj.instance = restorer.instance
    return res


# --- discrete reductions ----------------------------------------------------

def _nonzero(gamma, gamma_bar):
    return np.flatnonzero(gamma > 1e-6 * gamma_bar)


def _ranked(result, k):
    """Internal line indices ordered by gamma, padded by gradient if needed."""
    gamma = result.gamma_star.gamma
    gb = result.gamma_star.gamma_bar
    nz = _nonzero(gamma, gb)
    ranked = sorted(nz.tolist(), key=lambda i: (-gamma[i], i))
    if len(ranked) < k:
        log.warning("only %d attacked lines for k=%d; padding by gradient", len(ranked), k)
        g = result.gradient if result.gradient is not None else np.zeros(len(gamma))
        extra = [i for i in np.lexsort((np.arange(len(g)), -g)) if i not in set(ranked)]
        ranked += extra[: k - len(ranked)]
    return ranked


_WORKER = {}


def _worker_init(spec):
    kind, grid, a, base_inst, inst = spec
    if kind == "voltage":
        _WORKER["obj"] = VoltageObjective(grid, a)
    else:
        r = Restorer(grid, instance=base_inst, ipm=a)
        _WORKER["obj"] = AdjustmentObjective(grid, r, inst)


def _worker_eval(gamma):
    return _WORKER["obj"].discrete_value(gamma)


def evaluate_many(objective, gammas, jobs=1):
    """Discrete objective values for a list of attacks, in input order."""
    gammas = list(gammas)
    if jobs is None or jobs <= 1 or len(gammas) < 2:
        return [objective.discrete_value(g) for g in gammas]
    jobs = min(jobs, os.cpu_count() or 1, len(gammas))
    with ProcessPoolExecutor(jobs, initializer=_worker_init, initargs=(objective.spec(),)) as ex:
        return list(ex.map(_worker_eval, gammas, chunksize=max(1, len(gammas) // (4 * jobs))))


def subset_attack(grid, lines, gamma_bar):
    g = np.zeros(grid.n_line)
    g[list(lines)] = gamma_bar
    return g


def reduce_to_discrete(result, k, mode, objective, grid, jobs=1, max_candidates=12):
    """Top-k or Best-k attack derived from a continuous Frank-Wolfe result."""
    gb = result.gamma_star.gamma_bar
    ranked = _ranked(result, k)
    if mode.lower() in ("topk", "top"):
        pick = sorted(ranked[:k])
        g = subset_attack(grid, pick, gb)
        val = objective.discrete_value(g)
        return DiscreteAttack("TopK", [int(grid.line_ids[i]) for i in pick],
                              AttackVector(g, gb, k), float(val))
    if mode.lower() not in ("bestk", "best"):
        raise ValueError(f"unknown reduction {mode!r}")
    pool = ranked
    if len(pool) > max_candidates:
        log.warning("%d attacked lines; Best-%d restricted to the %d largest", len(pool), k,
                    max_candidates)
        pool = pool[:max_candidates]
    subsets = list(itertools.combinations(sorted(pool), k))
    values = evaluate_many(objective, [subset_attack(grid, s, gb) for s in subsets], jobs)
    best = int(np.argmax(values))
    g = subset_attack(grid, subsets[best], gb)
    return DiscreteAttack("BestK", [int(grid.line_ids[i]) for i in subsets[best]],
                          AttackVector(g, gb, k), float(values[best]), evaluated=len(subsets))


def attach_reductions(result, k, objective, grid, jobs=1):
    for mode in ("TopK", "BestK"):
        result.discrete[mode] = reduce_to_discrete(result, k, mode, objective, grid, jobs)
    return result


# --- single-level comparison -------------------------------------------------

class _VoltageNlpModel(RestorationModel):
    """Power flow with gamma as a decision variable and ``-F_V`` as the objective."""

    def f(self, z, gamma=None):
        d = z[self.iV] - 1.0
        return -0.5 * float(d @ d)

    def grad(self, z, gamma=None):
        out = np.zeros(self.n)
        out[self.iV] = -(z[self.iV] - 1.0)
        return out

    def hess(self, z, gamma=None, lam=None):
        H = super().hess(z, gamma, lam).tolil()
        for i in self.iV:
            H[i, i] = H[i, i] - 1.0
        return H.tocsr()


def single_level_voltage(grid, kappa, gamma_bar, v_limits=(0.2, 5.0), ipm=None):
    """Local solution of the single-level voltage model, where the power flow
    is a constraint rather than a response. Returns ``(F_V, gamma, status)``."""
    inst = RestorationInstance.default(grid, v_limits)
    zero = np.zeros_like(inst.rho_ub)
    inst = replace(inst, sigma_plus_ub=np.zeros_like(inst.sigma_plus_ub),
                   sigma_minus_ub=np.zeros_like(inst.sigma_minus_ub), rho_ub=zero,
                   rho_lower=zero)
    model = _VoltageNlpModel(grid, inst, gamma_lines=np.arange(grid.n_line),
                             budget=kappa * gamma_bar, gamma_bar=gamma_bar, budget_slack=True)
    pf = solve_power_flow(grid)
    z0 = model.start_point(pf.V, pf.theta, gamma_w=np.full(grid.n_line, 0.5 * kappa * gamma_bar / grid.n_line))
    z0[model.islk] = 0.5 * kappa * gamma_bar
    sol = solve(model.problem(), None, z0, ipm or IpmOptions())
    gamma = sol.z[model.igam] if sol.status == NlpStatus.OPTIMAL else None
    return -sol.objective, gamma, sol.status


def compare_single_level(grid, result, v_limits=(0.2, 5.0), ipm=None, rel_tol=1e-3):
    """Contrast a bilevel voltage result with the single-level model."""
    kappa, gb = result.gamma_star.kappa, result.gamma_star.gamma_bar
    val, gamma, status = single_level_voltage(grid, kappa, gb, v_limits, ipm)
    agree = (not result.certificate and status == NlpStatus.OPTIMAL
             and abs(val - result.objective) <= rel_tol * max(abs(result.objective), 1e-12))
    out = {"single_level_objective": float(val), "single_level_status": status.value,
           "bilevel_objective": float(result.objective), "certificate": result.certificate,
           "agree": bool(agree)}
    if gamma is not None:
        out["single_level_lines"] = {int(grid.line_ids[i]): float(gamma[i])
                                     for i in _nonzero(gamma, gb)}
    if not agree:
        log.warning("single-level voltage model disagrees with the bilevel result "
                    "(%.6g vs %.6g)", val, result.objective)
    return out
