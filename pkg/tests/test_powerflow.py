import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import fsolve

from gridstrike.case_io import load_case
from gridstrike.grid import build_admittance
from gridstrike.powerflow import (PFOptions, PFStatus, mismatch, reduced_gamma_jacobian,
                                  reduced_index, reduced_jacobian, reduced_residual,
                                  solve_power_flow)

from oracles import dense_ybus, naive_injection


def _random_state(g, rng):
    V = rng.uniform(0.9, 1.1, g.n_bus)
    theta = rng.uniform(-0.3, 0.3, g.n_bus)
    return V, theta


def test_mismatch_matches_naive_loop(case30, rng):
    gamma = rng.uniform(0, 2, case30.n_line)
    V, theta = _random_state(case30, rng)
    FP, FQ = mismatch(case30, build_admittance(case30, gamma), V, theta)
    P, Q = naive_injection(dense_ybus(case30, gamma), V, theta)
    assert np.abs(FP - (P - case30.P)).max() <= 1e-12 * max(1, np.abs(P).max())
    assert np.abs(FQ - (Q - case30.Q)).max() <= 1e-12 * max(1, np.abs(Q).max())


@pytest.mark.parametrize("fixture", ["case30", "case118"])
def test_jacobian_fd(fixture, request, rng):
    g = request.getfixturevalue(fixture)
    Y = build_admittance(g, rng.uniform(0, 1, g.n_line)).Ybus
    V, theta = _random_state(g, rng)
    pvpq, pq = reduced_index(g)
    J = reduced_jacobian(g, Y, V, theta).toarray()
    x0 = np.concatenate([theta[pvpq], V[pq]])

    def F(x):
        th, v = theta.copy(), V.copy()
        th[pvpq] = x[:len(pvpq)]
        v[pq] = x[len(pvpq):]
        return reduced_residual(g, Y, v, th)

    h = 1e-6
    fd = np.column_stack([(F(x0 + h * e) - F(x0 - h * e)) / (2 * h) for e in np.eye(len(x0))])
    assert np.abs(J - fd).max() <= 1e-6 * max(1.0, np.abs(J).max())


def test_gamma_jacobian_fd(case30, rng):
    gamma = rng.uniform(0, 1, case30.n_line)
    V, theta = _random_state(case30, rng)
    D = reduced_gamma_jacobian(case30, build_admittance(case30, gamma), V, theta)
    D = D.toarray() if hasattr(D, "toarray") else D
    h = 1e-6
    for k in range(case30.n_line):
        e = np.zeros(case30.n_line)
        e[k] = h
        fd = (reduced_residual(case30, build_admittance(case30, gamma + e).Ybus, V, theta)
              - reduced_residual(case30, build_admittance(case30, gamma - e).Ybus, V, theta)) / (2 * h)
        assert np.abs(D[:, k] - fd).max() <= 1e-6


def _fsolve_reference(g, gamma=None):
    """Solve the full polar equations with MINPACK on the dense oracle matrix."""
    Y = dense_ybus(g, gamma)
    pvpq, pq = g.non_slack, g.dem
    V0 = g.Vset.copy()
    V0[pq] = 1.0
    th0 = np.zeros(g.n_bus)
    th0[g.slack] = g.Va0[g.slack]

    def unpack(x):
        V, th = V0.copy(), th0.copy()
        th[pvpq] = x[:len(pvpq)]
        V[pq] = x[len(pvpq):]
        return V, th

    def F(x):
        P, Q = naive_injection(Y, *unpack(x))
        return np.concatenate([(P - g.P)[pvpq], (Q - g.Q)[pq]])

    x, info, ier, msg = fsolve(F, np.concatenate([th0[pvpq], V0[pq]]), full_output=True, xtol=1e-13)
    assert ier == 1, msg
    return unpack(x)


@pytest.mark.parametrize("fixture", ["twobus", "case30"])
def test_matches_fsolve_reference(fixture, request):
    g = request.getfixturevalue(fixture)
    pf = solve_power_flow(g)
    assert pf.converged and pf.final_residual <= 1e-8
    V, th = _fsolve_reference(g)
    assert np.abs(pf.V - V).max() <= 1e-6
    assert np.abs(pf.theta - th).max() <= 1e-6


def test_attacked_matches_fsolve_reference(case30, rng):
    gamma = rng.uniform(0, 1, case30.n_line)
    pf = solve_power_flow(case30, gamma)
    V, th = _fsolve_reference(case30, gamma)
    assert np.abs(pf.V - V).max() <= 1e-6


def test_fixed_quantities(case118):
    pf = solve_power_flow(case118)
    fixed = np.concatenate([case118.gen, [case118.slack]])
    assert np.array_equal(pf.V[fixed], case118.Vset[fixed])
    assert pf.theta[case118.slack] == case118.Va0[case118.slack]
    assert pf.iterations <= 10
    assert pf.trace[-1] == pf.final_residual


def test_warm_start_same_solution(case118):
    a = solve_power_flow(case118)
    gamma = np.zeros(case118.n_line)
    gamma[[70, 73, 81]] = 3.0
    cold = solve_power_flow(case118, gamma)
    warm = solve_power_flow(case118, gamma, init=(a.V, a.theta))
    assert cold.converged and warm.converged
    assert np.abs(cold.V - warm.V).max() <= 1e-7


def test_extreme_attack_reports_status(twobus):
    # 50 MW over a 100x impedance line has no solution
    pf = solve_power_flow(twobus, np.array([100.0]))
    assert pf.status in (PFStatus.DIVERGED, PFStatus.MAX_ITERATIONS)
    assert not pf.converged


def test_runtime(case118):
    t0 = time.perf_counter()
    solve_power_flow(case118)
    assert time.perf_counter() - t0 < 1.0


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0, 0.5), min_size=41, max_size=41))
def test_small_attacks_converge(gam):
    g = load_case("case30")
    pf = solve_power_flow(g, np.array(gam), options=PFOptions())
    assert pf.converged
    Y = build_admittance(g, np.array(gam)).Ybus
    assert np.abs(reduced_residual(g, Y, pf.V, pf.theta)).max() <= 1e-8
