"""Safe-line elimination, target-node selection and enumeration baselines."""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attack import AdjustmentObjective, evaluate_many, subset_attack
from .errors import InfeasibleSubproblem
from .nlp import NlpStatus
from .powerflow import solve_power_flow
from .restoration import (SHED_REPORT_MW, RestorationInstance, Restorer,
                          solve_max_loadability, solve_safe_distribution)

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-3
DEFAULT_ETA = 0.9


@dataclass
class ScreeningReport:
    safe_lines: list
    vulnerable_lines: list
    target_nodes: list = field(default_factory=list)
    kappa_history: list = field(default_factory=list)
    eta: float = DEFAULT_ETA
    epsilon: float = DEFAULT_EPSILON
    gamma_bar: float = 0.0
    n1_table: list = field(default_factory=list)
    empty_vulnerable_set: bool = False
    target_fallback: bool = False
    discrete: dict = field(default_factory=dict)

    def to_dict(self):
        out = {k: v for k, v in self.__dict__.items() if k != "discrete"}
        out["discrete"] = {m: {"lines": d["lines"], "objective_MW": d["objective_MW"]}
                           for m, d in self.discrete.items()}
        return out


class _SafeSolver:
    """H_W evaluations for one working set, memoized per kappa."""

    def __init__(self, grid, W, gamma_bar, instance, ipm, base_pf):
        self.grid, self.W, self.gamma_bar = grid, W, gamma_bar
        self.instance, self.ipm, self.base_pf = instance, ipm, base_pf
        self.cache = {}
        self.warm = None
        self.unresolved = []

    def __call__(self, kappa):
        hit = self.cache.get(kappa)
        if hit is not None:
            return hit
        t0 = time.perf_counter()
        gamma, value, sol = solve_safe_distribution(
            self.grid, kappa, self.gamma_bar, self.W, self.instance, start=self.warm,
            ipm=self.ipm, base_pf=self.base_pf)
        log.info("H_W(kappa=%s) = %.6g MW, |W|=%d, %d IPM iterations, %.1fs", kappa, value,
                 len(self.W), sol.iterations, time.perf_counter() - t0)
        if not np.isfinite(value) and sol.status == NlpStatus.MAX_ITER:
            # no verdict either way; counting kappa as unsafe can only keep
            # more lines in the working set
            log.warning("H_W(kappa=%s) unresolved after %d IPM iterations; treated as >= epsilon",
                        kappa, sol.iterations)
            self.unresolved.append(int(kappa))
        elif not np.isfinite(value):
            raise InfeasibleSubproblem(
                f"safe-distribution program infeasible at kappa={kappa}", kappa=kappa,
                working_set=[int(self.grid.line_ids[i]) for i in self.W])
        if np.isfinite(value) and 0 < kappa < len(self.W):
            self.warm = (sol.z, gamma[self.W])
        self.cache[kappa] = (gamma, value)
        return gamma, value


def run_esl(grid, gamma_bar, eta=DEFAULT_ETA, epsilon=DEFAULT_EPSILON, v_limits=None,
            instance=None, ipm=None):
    """Eliminate safe lines until a round finds none; returns a report without targets."""
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    inst = instance or RestorationInstance.default(grid, v_limits)
    base_pf = solve_power_flow(grid)
    safe = np.zeros(grid.n_line, dtype=bool)
    history = []
    for rnd in range(1, grid.n_line + 1):
        W = np.flatnonzero(~safe)
        if len(W) == 0:
            break
        H = _SafeSolver(grid, W, gamma_bar, inst, ipm, base_pf)
        t0 = time.perf_counter()
        if H(len(W))[1] < epsilon:
            kstar = len(W)
        else:
            lo, hi = 0, len(W)
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if H(mid)[1] < epsilon:
                    lo = mid
                else:
                    hi = mid
            kstar = lo
        gamma, value = H(kstar)
        new = W[gamma[W] / gamma_bar >= eta]
        safe[new] = True
        history.append({"round": rnd, "working_set_size": int(len(W)), "kappa_star": int(kstar),
                        "H": float(value), "new_safe": [int(grid.line_ids[i]) for i in new],
                        "seconds": round(time.perf_counter() - t0, 3),
                        "unresolved_kappa": sorted(H.unresolved)})
        log.info("ESL round %d: |W|=%d kappa*=%d, %d new safe lines", rnd, len(W), kstar, len(new))
        if len(new) == 0:
            break
    vulnerable = [int(grid.line_ids[i]) for i in np.flatnonzero(~safe)]
    return ScreeningReport(
        safe_lines=[int(grid.line_ids[i]) for i in np.flatnonzero(safe)],
        vulnerable_lines=vulnerable, kappa_history=history, eta=eta, epsilon=epsilon,
        gamma_bar=gamma_bar, empty_vulnerable_set=not vulnerable)


def _shed_buses(grid, outcome, threshold=SHED_REPORT_MW):
    return sorted(s["bus"] for s in outcome.shed if s["kind"] == "demand" and s["MW"] >= threshold)


def select_target_nodes(grid, vulnerable_lines, gamma_bar, restorer=None, v_limits=None):
    """Demand buses that must shed when every vulnerable line is fully attacked.

    Returns ``(targets, used_fallback)``.
    """
    if not vulnerable_lines:
        return [], False
    r = restorer or Restorer(grid, v_limits=v_limits)
    gamma = subset_attack(grid, [grid.line_index(l) for l in vulnerable_lines], gamma_bar)
    out, _ = r.evaluate(gamma, r.instance)
    if out.feasible:
        return _shed_buses(grid, out), False
    log.warning("restoration infeasible with all vulnerable lines attacked; "
                "classifying target nodes by maximum loadability")
    for scale in np.linspace(0.9, 0.1, 9):
        res = solve_max_loadability(grid, scale * gamma, instance=r.instance)
        if res.margins:
            return sorted(b for b, m in res.margins.items() if m < SHED_REPORT_MW), True
    return [], True


def screen(grid, gamma_bar, eta=DEFAULT_ETA, epsilon=DEFAULT_EPSILON, v_limits=None, ipm=None):
    """ESL followed by target-node selection."""
    restorer = Restorer(grid, v_limits=v_limits, ipm=ipm)
    report = run_esl(grid, gamma_bar, eta, epsilon, instance=restorer.instance, ipm=ipm)
    report.target_nodes, report.target_fallback = select_target_nodes(
        grid, report.vulnerable_lines, gamma_bar, restorer)
    return report


def _best_subset(grid, objective, candidates, k, gamma_bar, jobs):
    subsets = list(itertools.combinations(sorted(candidates), k))
    if not subsets:
        return None
    values = evaluate_many(objective, [subset_attack(grid, s, gamma_bar) for s in subsets], jobs)
    best = int(np.argmax(values))
    return {"lines": [int(grid.line_ids[i]) for i in subsets[best]],
            "objective_MW": float(values[best]), "evaluated": len(subsets)}


def n_minus_1_screen(grid, gamma_bar, k=3, restorer=None, v_limits=None, jobs=1):
    """Attack each line alone at ``gamma_bar``; combine the worst into k-line attacks."""
    r = restorer or Restorer(grid, v_limits=v_limits)
    obj = AdjustmentObjective(grid, r)
    singles = [subset_attack(grid, [i], gamma_bar) for i in range(grid.n_line)]
    shed = evaluate_many(obj, singles, jobs)
    table = []
    for i, mw in enumerate(shed):
        f, t = grid.line_buses(i)
        table.append({"line": int(grid.line_ids[i]), "from_bus": f, "to_bus": t,
                      "shed_MW": float(mw)})
    # infinite singletons sort first, then by shed, then by line number
    order = sorted(range(grid.n_line), key=lambda i: (-shed[i], i))
    top = sorted(order[:k])
    topk = {"lines": [int(grid.line_ids[i]) for i in top],
            "objective_MW": float(obj.discrete_value(subset_attack(grid, top, gamma_bar)))}
    nonzero = [i for i in range(grid.n_line) if shed[i] >= SHED_REPORT_MW]
    bestk = _best_subset(grid, obj, nonzero, k, gamma_bar, jobs) if len(nonzero) >= k else None
    return table, {"TopK(N-1)": topk, "BestK(N-1)": bestk}


def enumeration_preflight(grid, k, sample_seconds=None):
    """Number of k-subsets and a rough runtime estimate from ``sample_seconds`` per solve."""
    count = math.comb(grid.n_line, k)
    return {"combinations": count,
            "estimated_seconds": None if sample_seconds is None else count * sample_seconds}


def enumerate_attacks(grid, k, gamma_bar, top=5, restorer=None, v_limits=None, jobs=1,
                      max_combos=None, lines=None, chunk=2000):
    """Exhaustive k-line attacks at ``gamma_bar``; returns the ``top`` most damaging.

    ``lines`` restricts the candidate pool (file ids). Raises ``ValueError``
    when the count exceeds ``max_combos``.
    """
    r = restorer or Restorer(grid, v_limits=v_limits)
    obj = AdjustmentObjective(grid, r)
    pool = range(grid.n_line) if lines is None else sorted(grid.line_index(l) for l in lines)
    count = math.comb(len(pool), k)
    if max_combos is not None and count > max_combos:
        raise ValueError(f"{count} combinations exceed the limit of {max_combos}")
    best = []
    combos = itertools.combinations(pool, k)
    while True:
        batch = list(itertools.islice(combos, chunk))
        if not batch:
            break
        vals = evaluate_many(obj, [subset_attack(grid, s, gamma_bar) for s in batch], jobs)
        best.extend(zip(vals, batch))
        best.sort(key=lambda t: (-t[0], t[1]))
        del best[top:]
    return [{"lines": [int(grid.line_ids[i]) for i in s], "objective_MW": float(v)}
            for v, s in best], count
