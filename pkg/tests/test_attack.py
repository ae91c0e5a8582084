import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridstrike.attack import (AdjustmentObjective, FwOptions, VoltageObjective,
                               attach_reductions, compare_single_level, fw_linear_oracle,
                               fw_maximize, grad_FV, reduce_to_discrete, subset_attack,
                               voltage_disturbance)
from gridstrike.errors import StalledAtZeroGradient
from gridstrike.powerflow import PFOptions, solve_power_flow
from gridstrike.restoration import Restorer

from conftest import V30


def brute_force_vertex(g, kappa):
    """All exactly-kappa patterns; returns (best value, list of maximizing patterns)."""
    vals = {s: sum(g[i] for i in s) for s in itertools.combinations(range(len(g)), kappa)}
    best = max(vals.values())
    return best, [s for s, v in vals.items() if v == best]


def test_oracle_examples():
    assert list(fw_linear_oracle([3, 1, 2], 1, 3)) == [3, 0, 0]
    assert list(fw_linear_oracle([5, 5, 1], 1, 5)) == [5, 0, 0]
    assert list(fw_linear_oracle([1, 2, 3, 4], 2.5, 2)) == [0, 1, 2, 2]
    assert list(fw_linear_oracle([1, 2], 5, 1)) == [1, 1]
    assert list(fw_linear_oracle([0, 0, 0], 0, 1)) == [0, 0, 0]
    with pytest.raises(ValueError):
        fw_linear_oracle([np.nan, 1], 1, 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-10, 10, allow_nan=False), min_size=n, max_size=n),
    st.integers(1, n))), st.floats(0.5, 5))
def test_oracle_matches_vertex_enumeration(gk, gamma_bar):
    g, kappa = gk
    w = fw_linear_oracle(g, kappa, gamma_bar)
    best, args = brute_force_vertex(g, kappa)
    picked = tuple(np.flatnonzero(w))
    assert len(picked) == kappa and np.all(w[list(picked)] == gamma_bar)
    assert sum(g[i] for i in picked) == best
    if len(args) == 1:
        assert picked == args[0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=10), st.floats(0, 10))
def test_oracle_feasible_and_optimal_on_nonnegative(g, kappa):
    kappa = min(kappa, len(g))
    w = fw_linear_oracle(g, kappa, 2.0)
    assert w.sum() <= kappa * 2.0 + 1e-9
    assert w.min() >= 0 and w.max() <= 2.0
    # LP optimum by greedy fill for nonnegative g
    order = sorted(g, reverse=True)
    full = int(math.floor(kappa + 1e-12))
    opt = 2.0 * (sum(order[:full]) + (kappa - full) * (order[full] if full < len(g) else 0))
    # remainders below 1e-12 of a line's budget are dropped by design
    assert np.dot(g, w) == pytest.approx(opt, rel=1e-12, abs=2.0 * 1e-12 * max(1.0, max(g)) * 1.5)


def test_grad_fv_fd(case30, rng):
    opts = PFOptions(tol=1e-12)
    base = solve_power_flow(case30, options=opts)

    def F(gam):
        pf = solve_power_flow(case30, gam, init=(base.V, base.theta), options=opts)
        return voltage_disturbance(case30, pf.V), pf

    for _ in range(3):
        gam = rng.uniform(0, 1, case30.n_line)
        _, pf = F(gam)
        g = grad_FV(case30, gam, pf)
        h = 1e-6
        fd = np.array([(F(gam + h * e)[0] - F(gam - h * e)[0]) / (2 * h)
                       for e in np.eye(case30.n_line)])
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


def test_fw_options_validation():
    for bad in ({"phi": 1.5}, {"c1": 0}, {"alpha_min": -1}):
        with pytest.raises(ValueError):
            FwOptions(**bad)


@pytest.fixture(scope="module")
def voltage118(case118):
    obj = VoltageObjective(case118)
    res = fw_maximize(obj, case118, 3, 3.0)
    attach_reductions(res, 3, obj, case118)
    return obj, res


def test_fw_iterates_feasible_and_monotone(voltage118):
    _, res = voltage118
    values = []
    for tr in res.trace:
        g = np.array(tr["gamma"])
        assert g.min() >= 0 and g.max() <= 3.0
        assert g.sum() <= 9.0 + 1e-9
        values.append(tr["objective"])
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
    assert res.status in ("Converged", "SmallStep")


def test_best_dominates_top(voltage118, case118):
    obj, res = voltage118
    assert res.discrete["BestK"].objective >= res.discrete["TopK"].objective - 1e-12
    assert res.discrete["BestK"].evaluated >= 1
    with pytest.raises(ValueError):
        reduce_to_discrete(res, 3, "median", obj, case118)


def test_fw_rejects_infeasible_start(case30):
    with pytest.raises(ValueError):
        fw_maximize(VoltageObjective(case30), case30, 1, 3.0, gamma0=np.full(case30.n_line, 3.0))


def test_certificate_reproduces(twobus):
    obj = VoltageObjective(twobus)
    res = fw_maximize(obj, twobus, 1, 200.0)
    assert res.certificate and res.status == "Certificate"
    assert math.isinf(res.objective)
    assert math.isinf(obj.evaluate(res.gamma_star.gamma).value)


def test_zero_gradient_stall(case30):
    obj = AdjustmentObjective(case30, Restorer(case30, v_limits=V30))
    with pytest.raises(StalledAtZeroGradient):
        fw_maximize(obj, case30, 3, 3.0)


def test_single_level_comparison(voltage118, case118):
    _, res = voltage118
    cmp = compare_single_level(case118, res)
    assert cmp["agree"]


def test_subset_attack(case30):
    g = subset_attack(case30, [0, 5], 2.0)
    assert g.sum() == 4.0 and g[5] == 2.0
