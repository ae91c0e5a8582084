import numpy as np
import pytest

from gridstrike.restoration import (RHO_EXTEND, RestorationInstance, RestorationModel,
                                    Restorer, eval_FL, grad_FL, solve_max_loadability,
                                    solve_safe_distribution)

from conftest import V30, V118


@pytest.fixture(scope="module")
def r30(case30):
    return Restorer(case30, v_limits=V30)


def _dense(A):
    return A.toarray() if hasattr(A, "toarray") else np.asarray(A)


def test_model_derivatives_fd(case30, rng):
    inst = RestorationInstance.default(case30, V30)
    m = RestorationModel(case30, inst)
    p = m.problem()
    gamma = rng.uniform(0, 1, case30.n_line)
    lo, hi = m.bounds()
    z = m.start_point()
    z = z + 0.01 * rng.standard_normal(len(z))
    z = np.clip(z, lo, hi)
    lam = rng.standard_normal(p.m)
    h = 1e-6
    E = np.eye(p.n)
    J = _dense(p.jac(z, gamma))
    fdJ = np.column_stack([(p.c(z + h * e, gamma) - p.c(z - h * e, gamma)) / (2 * h) for e in E])
    assert np.abs(J - fdJ).max() <= 1e-6

    def lag_grad(zz):
        return p.grad(zz, gamma) - _dense(p.jac(zz, gamma)).T @ lam

    H = _dense(p.hess(z, gamma, lam))
    fdH = np.column_stack([(lag_grad(z + h * e) - lag_grad(z - h * e)) / (2 * h) for e in E])
    assert np.abs(H - fdH).max() <= 1e-5

    Eg = np.eye(case30.n_line)
    Jg = _dense(p.jac_gamma(z, gamma))
    fdg = np.column_stack([(p.c(z, gamma + h * e) - p.c(z, gamma - h * e)) / (2 * h) for e in Eg])
    assert np.abs(Jg - fdg).max() <= 1e-6
    C = _dense(p.cross_gamma(z, gamma, lam))
    fdC = np.column_stack([(_dense(p.jac(z, gamma + h * e)).T @ lam
                            - _dense(p.jac(z, gamma - h * e)).T @ lam) / (2 * h) for e in Eg])
    assert np.abs(C - fdC).max() <= 1e-5


def test_no_attack_no_adjustment(case30, r30):
    out, sol = r30.evaluate(case30.zero_attack())
    assert out.feasible
    assert out.F_L == pytest.approx(0.0, abs=1e-6)
    assert sol.optimal


def test_even_perturbation_threshold(case30, r30):
    lo, _ = r30.evaluate(np.full(case30.n_line, 0.5))
    hi, _ = r30.evaluate(np.full(case30.n_line, 0.9))
    assert lo.F_L < 1e-3
    assert hi.F_L > 1e-3
    assert hi.shed and all(s["MW"] >= 1e-3 for s in hi.shed)


def test_objective_is_weighted_adjustment(case30, r30):
    out, _ = r30.evaluate(np.full(case30.n_line, 1.0))
    assert out.F_L == pytest.approx(sum(s["MW"] for s in out.shed), abs=len(out.shed) * 1e-3 + 1e-6)
    assert np.all(out.rho >= -1e-9) and np.all(out.rho <= 1 + 1e-9)


def test_gradient_fd(case30, r30):
    gamma = np.full(case30.n_line, 0.85)
    out, sol = r30.evaluate(gamma)
    g = grad_FL(case30, gamma, sol, restorer=r30)
    env = r30.gradient(gamma, sol, method="envelope")
    h = 1e-5
    fd = np.zeros(case30.n_line)
    for k in range(case30.n_line):
        e = np.zeros(case30.n_line)
        e[k] = h
        fd[k] = (r30.evaluate(gamma + e)[0].F_L - r30.evaluate(gamma - e)[0].F_L) / (2 * h)
    assert np.linalg.norm(g - fd) <= 1e-3 * np.linalg.norm(fd)
    assert np.linalg.norm(env - g) <= 1e-5 * np.linalg.norm(g)


def test_table5_discrete_attack(case118):
    r = Restorer(case118, v_limits=V118)
    gamma = np.zeros(case118.n_line)
    gamma[[case118.line_index(l) for l in (71, 74, 82)]] = 3.0
    out, _ = eval_FL(case118, gamma, restorer=r)
    assert out.F_L == pytest.approx(22.13, abs=0.05)
    shed = sorted(s["bus"] for s in out.shed if s["kind"] == "demand")
    assert shed == [51, 53]
    assert set(out.buses_at_voltage_bound) >= {52, 53}


def test_release_and_override(case118):
    inst = RestorationInstance.default(case118, V118)
    rel = inst.release(case118, [52, 53])
    D = list(case118.bus_ids[case118.dem])
    assert rel.rho_lower[D.index(52)] == -RHO_EXTEND
    assert np.count_nonzero(rel.rho_lower) == 2
    r = Restorer(case118, v_limits=V118)
    gamma = np.zeros(case118.n_line)
    gamma[[case118.line_index(l) for l in (71, 74, 82)]] = 3.0
    base, _ = r.evaluate(gamma)
    freed, _ = eval_FL(case118, gamma, overrides=rel.rho_lower, restorer=r)
    # releasing bounds can only lower the optimum
    assert freed.F_L <= base.F_L + 1e-6


def test_max_loadability(case30):
    res = solve_max_loadability(case30, v_limits=V30)
    assert res.objective < 0
    assert all(m >= -1e-6 for m in res.margins.values())
    att = solve_max_loadability(case30, np.full(case30.n_line, 0.5), v_limits=V30)
    assert att.objective > res.objective


def test_safe_distribution_endpoints(case30):
    W = np.arange(case30.n_line)
    gamma, value, sol = solve_safe_distribution(case30, 0, 3.0, W, v_limits=V30)
    assert value == pytest.approx(0.0, abs=1e-6) and not gamma.any()
    gamma, value, sol = solve_safe_distribution(case30, 20, 3.0, W, v_limits=V30)
    assert value < 1e-3
    assert gamma.sum() == pytest.approx(60.0, abs=1e-6)
    assert gamma.min() >= -1e-9 and gamma.max() <= 3.0 + 1e-9
    with pytest.raises(ValueError):
        solve_safe_distribution(case30, 42, 3.0, W, v_limits=V30)


def test_safe_distribution_respects_working_set(case30):
    W = np.arange(10)
    gamma, value, _ = solve_safe_distribution(case30, 4.5, 3.0, W, v_limits=V30)
    assert not gamma[10:].any()
    assert gamma.sum() == pytest.approx(13.5, abs=1e-6)


def test_attacked_line_gradient_sign(case118):
    r = Restorer(case118, v_limits=V118)
    lines = [case118.line_index(l) for l in (71, 74, 82)]
    gamma = np.zeros(case118.n_line)
    gamma[lines] = 2.0
    out, sol = r.evaluate(gamma)
    assert out.F_L > 1e-3
    g = r.gradient(gamma, sol)
    assert np.all(g[lines] >= -1e-8)


def test_flat_region_gradient_is_zero(case30, r30):
    gamma = np.full(case30.n_line, 0.3)
    out, sol = r30.evaluate(gamma)
    assert out.F_L < 1e-6
    assert np.abs(r30.gradient(gamma, sol)).max() <= 1e-8
