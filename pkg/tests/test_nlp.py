import numpy as np
import pytest

from gridstrike.errors import DegenerateSolution
from gridstrike.nlp import NlpProblem, NlpStatus, kkt_residuals, kkt_sensitivity, solve

INF = np.inf


def _problem(n, m, f, grad, c, jac, hess, lower=None, upper=None, **kw):
    return NlpProblem(n=n, m=m, f=f, grad=grad, c=c, jac=jac, hess=hess,
                      lower=np.full(n, -INF) if lower is None else lower,
                      upper=np.full(n, INF) if upper is None else upper, **kw)


def test_toy_equality_qp():
    # min (x-1)^2 + (y-2)^2  s.t. x + y = 1  ->  (0, 1), lam = -2
    p = _problem(2, 1,
                 lambda z, g: (z[0] - 1) ** 2 + (z[1] - 2) ** 2,
                 lambda z, g: np.array([2 * (z[0] - 1), 2 * (z[1] - 2)]),
                 lambda z, g: np.array([z[0] + z[1] - 1]),
                 lambda z, g: np.array([[1.0, 1.0]]),
                 lambda z, g, lam: 2 * np.eye(2))
    s = solve(p, start=np.array([5.0, -3.0]))
    assert s.status == NlpStatus.OPTIMAL
    assert np.abs(s.z - [0, 1]).max() <= 1e-6
    assert abs(s.lam[0] + 2) <= 1e-6
    assert s.objective == pytest.approx(2.0, abs=1e-6)


def test_toy_active_upper_bound():
    # min x^2 + y^2  s.t. x + y = 2, x <= 0.5  ->  (0.5, 1.5), lam = 3, mu_u(x) = 2
    p = _problem(2, 1,
                 lambda z, g: z @ z,
                 lambda z, g: 2 * z,
                 lambda z, g: np.array([z[0] + z[1] - 2]),
                 lambda z, g: np.array([[1.0, 1.0]]),
                 lambda z, g, lam: 2 * np.eye(2),
                 upper=np.array([0.5, INF]))
    s = solve(p)
    assert s.optimal
    assert np.abs(s.z - [0.5, 1.5]).max() <= 1e-6
    assert abs(s.lam[0] - 3) <= 1e-6
    assert abs(s.mu_upper[0] - 2) <= 1e-6
    assert list(s.active_upper) == [True, False]
    assert s.licq_ok and s.strict_complementarity_ok


def test_toy_nonconvex_circle():
    # min -x - y  s.t. x^2 + y^2 = 1, x, y >= 0  ->  x = y = 1/sqrt(2), lam = -1/sqrt(2)
    r = 1 / np.sqrt(2)
    p = _problem(2, 1,
                 lambda z, g: -z[0] - z[1],
                 lambda z, g: np.array([-1.0, -1.0]),
                 lambda z, g: np.array([z @ z - 1]),
                 lambda z, g: 2 * z[None, :],
                 lambda z, g, lam: -2 * lam[0] * np.eye(2),
                 lower=np.zeros(2))
    s = solve(p, start=np.array([0.9, 0.1]))
    assert s.optimal
    assert np.abs(s.z - [r, r]).max() <= 1e-6
    assert abs(s.lam[0] + r) <= 1e-6
    res = kkt_residuals(p, None, s)
    assert max(res.values()) <= 1e-6


def _param_problem(lower_y):
    # min (x - g)^2 + 0.1 y^2  s.t. x - y = 0,  y >= lower_y
    return _problem(
        2, 1,
        lambda z, g: (z[0] - g[0]) ** 2 + 0.1 * z[1] ** 2,
        lambda z, g: np.array([2 * (z[0] - g[0]), 0.2 * z[1]]),
        lambda z, g: np.array([z[0] - z[1]]),
        lambda z, g: np.array([[1.0, -1.0]]),
        lambda z, g, lam: np.diag([2.0, 0.2]),
        lower=np.array([-INF, lower_y]),
        jac_gamma=lambda z, g: np.zeros((1, 1)),
        cross_gamma=lambda z, g, lam: np.zeros((2, 1)))


def test_sensitivity_interior_and_active():
    # objective gamma-dependence enters through grad, so differentiate by hand:
    # interior: x = y = g / 1.1, dx/dg = 1/1.1
    p = _param_problem(-10.0)
    g = np.array([1.0])
    s = solve(p, g)
    assert np.abs(s.z - 1 / 1.1).max() <= 1e-6
    # with y >= 2 active the solution does not move with g
    p2 = _param_problem(2.0)
    s2 = solve(p2, g)
    assert np.abs(s2.z - 2.0).max() <= 1e-6
    assert s2.active_lower[1]


def test_sensitivity_through_constraints():
    # min x^2 + y^2  s.t. x + y = g  ->  x = y = g/2, lam = g
    p = _problem(2, 1,
                 lambda z, g: z @ z,
                 lambda z, g: 2 * z,
                 lambda z, g: np.array([z[0] + z[1] - g[0]]),
                 lambda z, g: np.array([[1.0, 1.0]]),
                 lambda z, g, lam: 2 * np.eye(2),
                 jac_gamma=lambda z, g: np.array([[-1.0]]),
                 cross_gamma=lambda z, g, lam: np.zeros((2, 1)))
    g = np.array([3.0])
    s = solve(p, g)
    dz, dlam, dmu = kkt_sensitivity(p, s, g)
    assert np.abs(dz[:, 0] - 0.5).max() <= 1e-8
    assert abs(dlam[0, 0] - 1.0) <= 1e-8


def test_sensitivity_rejects_licq_failure():
    # duplicated equality: multipliers are not unique
    p = _problem(2, 2,
                 lambda z, g: (z[0] - 1) ** 2 + (z[1] - 2) ** 2,
                 lambda z, g: np.array([2 * (z[0] - 1), 2 * (z[1] - 2)]),
                 lambda z, g: np.array([z[0] + z[1] - 1, 2 * z[0] + 2 * z[1] - 2]),
                 lambda z, g: np.array([[1.0, 1.0], [2.0, 2.0]]),
                 lambda z, g, lam: 2 * np.eye(2),
                 jac_gamma=lambda z, g: np.zeros((2, 1)),
                 cross_gamma=lambda z, g, lam: np.zeros((2, 1)))
    s = solve(p, np.zeros(1))
    assert s.optimal
    assert np.abs(s.z - [0, 1]).max() <= 1e-6
    assert not s.licq_ok
    with pytest.raises(DegenerateSolution):
        kkt_sensitivity(p, s, np.zeros(1))


def test_infeasible_reported():
    # x + y = 1 and x^2 + y^2 = 0.1 have no common point
    p = _problem(2, 2,
                 lambda z, g: 0.0,
                 lambda z, g: np.zeros(2),
                 lambda z, g: np.array([z[0] + z[1] - 1, z @ z - 0.1]),
                 lambda z, g: np.array([[1.0, 1.0], 2 * z]),
                 lambda z, g, lam: -2 * lam[1] * np.eye(2))
    s = solve(p)
    assert s.status != NlpStatus.OPTIMAL


def test_fixed_variables_eliminated():
    p = _problem(2, 0,
                 lambda z, g: (z[0] - 3) ** 2 + (z[1] + 1) ** 2,
                 lambda z, g: np.array([2 * (z[0] - 3), 2 * (z[1] + 1)]),
                 lambda z, g: np.zeros(0),
                 lambda z, g: np.zeros((0, 2)),
                 lambda z, g, lam: 2 * np.eye(2),
                 lower=np.array([0.5, -5.0]), upper=np.array([0.5, 5.0]))
    s = solve(p)
    assert s.optimal
    assert s.z[0] == 0.5 and abs(s.z[1] + 1) <= 1e-6
    assert s.fixed[0]


def test_bad_bounds():
    with pytest.raises(ValueError):
        _problem(1, 0, None, None, None, None, None, lower=np.array([1.0]), upper=np.array([0.0]))
