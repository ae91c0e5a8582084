"""Primal-dual interior-point solver for bound-constrained smooth programs.

Solves::

    min f(z)  s.t.  c(z; gamma) = 0,  l <= z <= u

with a log barrier on the bounds, Newton steps on the perturbed KKT
conditions, fraction-to-boundary step rules, a monotone barrier schedule,
an l1 exact-penalty merit line search and a Gauss-Newton feasibility
restoration phase. After convergence the active set is identified and the
solution is polished by Newton's method on the active-set KKT equations,
which is the same system used by :func:`kkt_sensitivity`.

Multiplier signs follow the Lagrangian ``f - lam^T c - mu^T h`` with bound
constraints written ``h(z) >= 0``.
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DegenerateSolution

log = logging.getLogger(__name__)


class NlpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"
    DEGENERATE = "Degenerate"


@dataclass
class NlpProblem:
    """Callbacks take ``(z, gamma)``; Hessian callbacks also take ``lam``.

    ``hess(z, gamma, lam)`` returns the Lagrangian Hessian
    ``W = grad^2 f - sum_i lam_i grad^2 c_i``. ``jac_gamma(z, gamma)`` is
    ``dc/dgamma`` (m x p) and ``cross_gamma(z, gamma, lam)`` is
    ``sum_i lam_i d^2 c_i / dz dgamma`` (n x p). Both are only needed for
    sensitivities.
    """

    n: int
    m: int
    f: Callable
    grad: Callable
    c: Callable
    jac: Callable
    hess: Callable
    lower: np.ndarray
    upper: np.ndarray
    jac_gamma: Optional[Callable] = None
    cross_gamma: Optional[Callable] = None
    name: str = "nlp"

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != (self.n,) or self.upper.shape != (self.n,):
            raise ValueError("bound vectors must have length n")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")


@dataclass
class IpmOptions:
    tol: float = 1e-8
    max_iter: int = 300
    mu_init: float = 1e-1
    kappa_mu: float = 0.2
    theta_mu: float = 1.5
    tau_min: float = 0.99
    kappa_eps: float = 10.0
    bound_push: float = 1e-2
    bound_frac: float = 1e-2
    eps_act: float = 1e-6
    eps_sc: float = 1e-6
    dense_limit: int = 2500
    stall_tol: float = 1e-10
    stall_iters: int = 10
    restoration_max: int = 60
    polish: bool = True
    verbose: bool = False


@dataclass
class NlpSolution:
    z: np.ndarray
    lam: np.ndarray
    mu_lower: np.ndarray
    mu_upper: np.ndarray
    objective: float
    status: NlpStatus
    iterations: int
    active_lower: np.ndarray
    active_upper: np.ndarray
    fixed: np.ndarray
    licq_ok: bool = True
    strict_complementarity_ok: bool = True
    residuals: dict = field(default_factory=dict)
    barrier_history: list = field(default_factory=list)

    @property
    def optimal(self):
        return self.status == NlpStatus.OPTIMAL

    @property
    def mu(self):
        """Signed bound multipliers: positive on active lower, negative on upper."""
        return self.mu_lower - self.mu_upper

    @property
    def active_set(self):
        return np.flatnonzero(self.active_lower | self.active_upper)


def _to_dense(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A)


def _sparse(A):
    return A.tocsr() if sp.issparse(A) else sp.csr_matrix(np.atleast_2d(A))


class _KKTSolver:
    """Factorizes the regularized primal-dual matrix with inertia control."""

    def __init__(self, n, m, dense_limit):
        self.n, self.m = n, m
        self.dense = n + m <= dense_limit
        self.delta_last = 0.0

    def _factor(self, K):
        if self.dense:
            Kd = _to_dense(K)
            lu, d, perm = sla.ldl(Kd, lower=True)
            ev = _block_eigs(d)
            pos = int(np.sum(ev > 0))
            neg = int(np.sum(ev < 0))
            zero = len(ev) - pos - neg
            return (lu, d, perm), (pos, neg, zero)
        try:
            lu = spla.splu(sp.csc_matrix(K))
        except RuntimeError:
            return None, (0, 0, self.n + self.m)
        return lu, None

    def _solve_factor(self, fac, rhs):
        if self.dense:
            return _ldl_solve(*fac, rhs)
        return fac.solve(rhs)

    def solve(self, Hl, J, rhs, mu):
        n, m = self.n, self.m
        delta_c = 0.0
        delta = 0.0
        for attempt in range(60):
            K = sp.bmat([[Hl + delta * sp.eye(n), J.T],
                         [J, -delta_c * sp.eye(m) if m else None]], format="csc") if m else \
                sp.csc_matrix(Hl + delta * sp.eye(n))
            fac, inertia = self._factor(K)
            ok = fac is not None
            if ok and inertia is not None:
                pos, neg, zero = inertia
                if zero > 0 and delta_c == 0.0 and m:
                    delta_c = 1e-8 * mu ** 0.25
                    continue
                ok = pos == n and neg == m
            if ok:
                sol = self._solve_factor(fac, rhs)
                if not np.all(np.isfinite(sol)):
                    ok = False
                elif inertia is None:
                    # no inertia available: require positive curvature along dz
                    dz = sol[:n]
                    curv = dz @ (Hl @ dz) + delta * (dz @ dz)
                    ok = curv >= 1e-12 * (dz @ dz)
            if ok:
                if delta > 0:
                    self.delta_last = delta
                self.last = fac
                return sol, delta
            if delta == 0.0:
                delta = 1e-4 if self.delta_last == 0 else max(1e-20, self.delta_last / 3)
            else:
                delta *= 100 if self.delta_last == 0 else 8
            if delta > 1e40:
                break
        raise np.linalg.LinAlgError("could not regularize KKT matrix")

    def resolve(self, rhs):
        """Solve again with the most recent accepted factorization."""
        return self._solve_factor(self.last, rhs)


def _ldl_solve(lu, d, perm, rhs):
    """Solve with the factors of ``A = lu d lu^T`` from :func:`scipy.linalg.ldl`."""
    L = lu[perm]
    y = sla.solve_triangular(L, rhs[perm], lower=True, unit_diagonal=True)
    n = d.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = np.diag(d, 1)
    ab[1] = np.diag(d)
    ab[2, :-1] = np.diag(d, -1)
    w = sla.solve_banded((1, 1), ab, y)
    x = np.empty_like(w)
    x[perm] = sla.solve_triangular(L.T, w, lower=False, unit_diagonal=True)
    return x


def _block_eigs(d):
    """Eigenvalues of the block-diagonal factor from an LDL^T decomposition."""
    n = d.shape[0]
    ev = []
    i = 0
    while i < n:
        if i + 1 < n and d[i + 1, i] != 0.0:
            ev.extend(np.linalg.eigvalsh(d[i:i + 2, i:i + 2]))
            i += 2
        else:
            ev.append(d[i, i])
            i += 1
    return np.array(ev)


def _initial_point(z0, l, u, opts):
    z = np.array(z0, dtype=float)
    z = np.clip(z, l, u)
    has_l, has_u = np.isfinite(l), np.isfinite(u)
    pl = np.where(has_l, opts.bound_push * np.maximum(1.0, np.abs(l)), 0.0)
    pu = np.where(has_u, opts.bound_push * np.maximum(1.0, np.abs(u)), 0.0)
    both = has_l & has_u
    span = np.where(both, u - l, np.inf)
    pl = np.where(both, np.minimum(pl, opts.bound_frac * span), pl)
    pu = np.where(both, np.minimum(pu, opts.bound_frac * span), pu)
    z = np.where(has_l, np.maximum(z, l + pl), z)
    z = np.where(has_u, np.minimum(z, u - pu), z)
    return z


def _ftb(x, dx, tau):
    """Largest alpha in (0, 1] with x + alpha dx >= (1 - tau) x, x > 0."""
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * x[neg] / dx[neg])))


class _Reduced:
    """View of the problem with fixed variables (l == u) removed."""

    def __init__(self, prob, gamma, fixed_values, free):
        self.p, self.g = prob, gamma
        self.free = free
        self.full = fixed_values.copy()

    def expand(self, zf):
        z = self.full.copy()
        z[self.free] = zf
        return z

    def f(self, zf):
        return float(self.p.f(self.expand(zf), self.g))

    def grad(self, zf):
        return np.asarray(self.p.grad(self.expand(zf), self.g), dtype=float)[self.free]

    def c(self, zf):
        return np.asarray(self.p.c(self.expand(zf), self.g), dtype=float)

    def jac(self, zf):
        return _sparse(self.p.jac(self.expand(zf), self.g))[:, self.free]

    def hess(self, zf, lam):
        H = _sparse(self.p.hess(self.expand(zf), self.g, lam))
        return H[self.free][:, self.free]


def solve(problem, gamma=None, start=None, options=None):
    """Solve ``problem`` at parameter ``gamma`` from ``start``.

    Returns an :class:`NlpSolution`; infeasibility and iteration limits are
    reported through ``status`` rather than raised.
    """
    opts = options or IpmOptions()
    n, m = problem.n, problem.m
    l_all, u_all = problem.lower, problem.upper
    fixed = np.isclose(l_all, u_all, rtol=0, atol=1e-14)
    free = np.flatnonzero(~fixed)
    z_full = np.zeros(n) if start is None else np.array(start, dtype=float)
    z_full = np.clip(z_full, l_all, u_all)
    z_full[fixed] = l_all[fixed]
    R = _Reduced(problem, gamma, z_full, free)
    l, u = l_all[free], u_all[free]
    nf = len(free)
    has_l, has_u = np.isfinite(l), np.isfinite(u)

    z = _initial_point(z_full[free], l, u, opts)
    mu = opts.mu_init
    zl = np.where(has_l, 1.0, 0.0)
    zu = np.where(has_u, 1.0, 0.0)
    lam = np.zeros(m)
    kkt = _KKTSolver(nf, m, opts.dense_limit)
    nu = 1.0
    status = NlpStatus.MAX_ITER
    barrier_history = [mu]
    best_infeas = np.inf
    stall = 0

    def slacks(z):
        sl = np.where(has_l, z - l, 1.0)
        su = np.where(has_u, u - z, 1.0)
        return sl, su

    def barrier_obj(z, mu):
        sl, su = slacks(z)
        return R.f(z) - mu * (np.sum(np.log(sl[has_l])) + np.sum(np.log(su[has_u])))

    # least-squares multiplier estimate
    g = R.grad(z)
    J = R.jac(z)
    if m:
        try:
            A = sp.bmat([[sp.eye(nf), J.T], [J, None]], format="csc")
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", spla.MatrixRankWarning)
                sol = spla.spsolve(A, np.concatenate([g - zl + zu, np.zeros(m)]))
            lam_ls = -sol[nf:]
            if np.all(np.isfinite(lam_ls)) and np.max(np.abs(lam_ls)) < 1e3:
                lam = lam_ls
        except Exception:  # noqa: BLE001 - estimate only
            pass

    it = 0
    for it in range(1, opts.max_iter + 1):
        g = R.grad(z)
        cz = R.c(z)
        J = R.jac(z)
        sl, su = slacks(z)
        rd = g - J.T @ lam - zl + zu
        # optimality error (IPOPT-style scaling)
        s_max = 100.0
        denom = nf + m
        s_d = max(s_max, (np.abs(lam).sum() + zl.sum() + zu.sum()) / max(denom, 1)) / s_max
        s_c = max(s_max, (zl.sum() + zu.sum()) / max(nf, 1)) / s_max
        comp_l = np.where(has_l, sl * zl, 0.0)
        comp_u = np.where(has_u, su * zu, 0.0)

        def err(mu_):
            return max(np.linalg.norm(rd, np.inf) / s_d,
                       np.linalg.norm(cz, np.inf) if m else 0.0,
                       max(np.linalg.norm(comp_l - np.where(has_l, mu_, 0), np.inf),
                           np.linalg.norm(comp_u - np.where(has_u, mu_, 0), np.inf)) / s_c)

        if err(0.0) <= opts.tol:
            status = NlpStatus.OPTIMAL
            break
        while err(mu) <= opts.kappa_eps * mu and mu > opts.tol / 10:
            mu = max(opts.tol / 10, min(opts.kappa_mu * mu, mu ** opts.theta_mu))
            barrier_history.append(mu)

        infeas = np.abs(cz).sum() if m else 0.0
        if infeas < best_infeas * (1 - 1e-6) - opts.stall_tol:
            best_infeas, stall = infeas, 0
        else:
            stall += 1

        sig = np.where(has_l, zl / sl, 0.0) + np.where(has_u, zu / su, 0.0)
        W = R.hess(z, lam)
        Hl = (W + sp.diags(sig)).tocsc()
        grad_bar = g - np.where(has_l, mu / sl, 0.0) + np.where(has_u, mu / su, 0.0)
        rhs = -np.concatenate([grad_bar - J.T @ lam, cz])
        try:
            sol, delta = kkt.solve(Hl, J, rhs, mu)
        except np.linalg.LinAlgError:
            status = NlpStatus.DEGENERATE
            break
        dz = sol[:nf]
        # the J^T block carries -dlam
        dlam = -sol[nf:]
        dzl = np.where(has_l, mu / sl - zl - zl / sl * dz, 0.0)
        dzu = np.where(has_u, mu / su - zu + zu / su * dz, 0.0)

        tau = max(opts.tau_min, 1 - mu)
        a_max = min(_ftb(sl[has_l], dz[has_l], tau) if has_l.any() else 1.0,
                    _ftb(su[has_u], -dz[has_u], tau) if has_u.any() else 1.0)
        a_z = min(_ftb(zl[has_l], dzl[has_l], tau) if has_l.any() else 1.0,
                  _ftb(zu[has_u], dzu[has_u], tau) if has_u.any() else 1.0)

        # l1 merit line search
        phi0 = barrier_obj(z, mu)
        c1 = np.abs(cz).sum() if m else 0.0
        dphi = grad_bar @ dz
        curv = dz @ (Hl @ dz)
        if m and c1 > 0:
            nu_trial = (dphi + 0.5 * max(curv, 0.0)) / (0.9 * c1)
            if nu < nu_trial:
                nu = nu_trial + 1.0
        D = dphi - nu * c1
        merit0 = phi0 + nu * c1
        def merit(zt):
            ct = R.c(zt)
            try:
                return barrier_obj(zt, mu) + nu * np.abs(ct).sum(), ct
            except FloatingPointError:
                return np.inf, ct

        alpha = a_max
        accepted = False
        for trial in range(40):
            zt = z + alpha * dz
            mt, ct = merit(zt)
            if np.isfinite(mt) and mt <= merit0 + 1e-4 * alpha * min(D, 0.0):
                accepted = True
                break
            if trial == 0 and m and np.abs(ct).sum() >= c1:
                # second-order correction against the Maratos effect
                zs, dls = _second_order_correction(kkt, rhs, cz, ct, alpha, z, nf, sl, su,
                                                   has_l, has_u, tau, R, merit, merit0, D)
                if zs is not None:
                    dz = (zs - z) / alpha
                    dlam = dls
                    dzl = np.where(has_l, mu / sl - zl - zl / sl * dz, 0.0)
                    dzu = np.where(has_u, mu / su - zu + zu / su * dz, 0.0)
                    a_z = min(_ftb(zl[has_l], dzl[has_l], tau) if has_l.any() else 1.0,
                              _ftb(zu[has_u], dzu[has_u], tau) if has_u.any() else 1.0)
                    zt = zs
                    accepted = True
                    break
            alpha *= 0.5
            if alpha < 1e-14:
                break
        if not accepted:
            ok = _restoration(R, z, l, u, has_l, has_u, opts)
            if ok is None:
                status = NlpStatus.INFEASIBLE
                break
            z = ok
            sl, su = slacks(z)
            zl = np.where(has_l, np.minimum(zl, 1e3), 0.0)
            zu = np.where(has_u, np.minimum(zu, 1e3), 0.0)
            lam = np.zeros(m)
            nu = 1.0
            continue
        z = zt
        lam = lam + alpha * dlam
        zl = zl + a_z * dzl
        zu = zu + a_z * dzu
        sl, su = slacks(z)
        k_sig = 1e10
        zl = np.where(has_l, np.clip(zl, mu / (k_sig * sl), k_sig * mu / sl), 0.0)
        zu = np.where(has_u, np.clip(zu, mu / (k_sig * su), k_sig * mu / su), 0.0)
        if opts.verbose:
            log.info("it %3d mu %.1e |c| %.2e f %.6e alpha %.2e delta %.1e",
                     it, mu, c1, R.f(z), alpha, delta)
        if m and stall >= opts.stall_iters and best_infeas > 1e-4:
            # infeasibility stopped improving: try to regain it, but only a
            # failed line search followed by a failed restoration means infeasible
            ok = _restoration(R, z, l, u, has_l, has_u, opts)
            if ok is not None:
                z = ok
            stall = 0
            best_infeas = np.inf

    z_out = R.expand(z)
    lam_out = lam
    mul = np.zeros(n)
    muu = np.zeros(n)
    mul[free] = zl
    muu[free] = zu
    sol = NlpSolution(
        z=z_out, lam=lam_out, mu_lower=mul, mu_upper=muu,
        objective=float(problem.f(z_out, gamma)), status=status, iterations=it,
        active_lower=np.zeros(n, dtype=bool), active_upper=np.zeros(n, dtype=bool),
        fixed=fixed, barrier_history=barrier_history,
    )
    if status == NlpStatus.OPTIMAL:
        _classify_active(problem, sol, opts)
        if opts.polish:
            _polish(problem, gamma, sol, opts)
        _check_regularity(problem, gamma, sol, opts)
    sol.residuals = kkt_residuals(problem, gamma, sol)
    return sol


def _second_order_correction(kkt, rhs, cz, ct, alpha, z, nf, sl, su, has_l, has_u, tau,
                             R, merit, merit0, D, max_soc=4):
    """Corrected trial point ``(z, dlam)`` or ``(None, None)``."""
    c_soc = alpha * cz + ct
    theta_old = np.abs(ct).sum()
    for _ in range(max_soc):
        r = rhs.copy()
        r[nf:] = -c_soc
        try:
            sol = kkt.resolve(r)
        except Exception:  # noqa: BLE001 - correction is optional
            return None, None
        d = sol[:nf]
        if not np.all(np.isfinite(d)):
            return None, None
        a = min(_ftb(sl[has_l], d[has_l], tau) if has_l.any() else 1.0,
                _ftb(su[has_u], -d[has_u], tau) if has_u.any() else 1.0)
        if a < 1.0:
            return None, None
        zs = z + d
        ms, cs = merit(zs)
        if np.isfinite(ms) and ms <= merit0 + 1e-4 * min(D, 0.0):
            return zs, -sol[nf:]
        theta = np.abs(cs).sum()
        if theta > 0.99 * theta_old:
            return None, None
        theta_old = theta
        c_soc = c_soc + cs
    return None, None


def _restoration(R, z, l, u, has_l, has_u, opts):
    """Minimize ||c||^2 / 2 inside the bounds; ``None`` when it stalls."""
    c = R.c(z)
    target = 0.9 * np.abs(c).sum()
    best = np.abs(c).sum()
    stall = 0
    lm = 1e-4
    for _ in range(opts.restoration_max):
        J = R.jac(z)
        sl = np.where(has_l, z - l, 1.0)
        su = np.where(has_u, u - z, 1.0)
        mu_r = 1e-8
        sig = np.where(has_l, mu_r / sl**2, 0) + np.where(has_u, mu_r / su**2, 0)
        gbar = J.T @ c - np.where(has_l, mu_r / sl, 0) + np.where(has_u, mu_r / su, 0)
        A = (J.T @ J + sp.diags(sig + lm)).tocsc()
        try:
            dz = spla.spsolve(A, -gbar)
        except RuntimeError:
            return None
        a = min(_ftb(sl[has_l], dz[has_l], 0.99) if has_l.any() else 1.0,
                _ftb(su[has_u], -dz[has_u], 0.99) if has_u.any() else 1.0)
        moved = False
        for _ in range(30):
            ct = R.c(z + a * dz)
            if np.abs(ct).sum() < np.abs(c).sum():
                z = z + a * dz
                c = ct
                moved = True
                break
            a *= 0.5
        lm = lm / 3 if moved else lm * 10
        cur = np.abs(c).sum()
        if cur <= target or cur < 1e-8:
            return z
        if best - cur < opts.stall_tol:
            stall += 1
            if stall >= opts.stall_iters:
                return None
        else:
            stall = 0
        best = min(best, cur)
    return None


def _classify_active(problem, sol, opts):
    l, u, z = problem.lower, problem.upper, sol.z
    free = ~sol.fixed
    dl = z - l
    du = u - z
    # primal-dual classification: the multiplier dominates the slack
    sol.active_lower = free & np.isfinite(l) & ((dl <= opts.eps_act) | (sol.mu_lower > dl))
    sol.active_upper = free & np.isfinite(u) & ((du <= opts.eps_act) | (sol.mu_upper > du))
    sol.active_upper &= ~sol.active_lower


def _active_system(problem, gamma, sol):
    """Jacobian blocks of the active-set KKT equations at ``sol``.

    Variables are ordered (z, lam, mu_A). Fixed variables count as active
    lower bounds whose multiplier sign is unrestricted.
    """
    n, m = problem.n, problem.m
    z, lam = sol.z, sol.lam
    act_lo = np.flatnonzero(sol.active_lower | sol.fixed)
    act_up = np.flatnonzero(sol.active_upper)
    W = _sparse(problem.hess(z, gamma, lam))
    J = _sparse(problem.jac(z, gamma))
    na = len(act_lo) + len(act_up)
    rows = np.concatenate([act_lo, act_up])
    # grad h: +e_j for lower (z - l >= 0), -e_j for upper (u - z >= 0)
    sign = np.concatenate([np.ones(len(act_lo)), -np.ones(len(act_up))])
    Ha = sp.csr_matrix((sign, (rows, np.arange(na))), shape=(n, na))
    H = sp.bmat([[W, -J.T, -Ha],
                 [J, None, None],
                 [Ha.T, None, None]], format="csc")
    return H, J, Ha, act_lo, act_up


def _polish(problem, gamma, sol, opts):
    """Snap active bounds and refine with Newton on the active-set KKT system."""
    n, m = problem.n, problem.m
    l, u = problem.lower, problem.upper
    z = sol.z.copy()
    lam = sol.lam.copy()
    z[sol.active_lower | sol.fixed] = l[sol.active_lower | sol.fixed]
    z[sol.active_upper] = u[sol.active_upper]
    trial = NlpSolution(**{**sol.__dict__})
    trial.z = z
    H, J, Ha, act_lo, act_up = _active_system(problem, gamma, trial)
    muA = np.concatenate([sol.mu_lower[act_lo] - sol.mu_upper[act_lo], sol.mu_upper[act_up]])
    # multipliers of fixed vars were never tracked: recover them from stationarity
    g = np.asarray(problem.grad(z, gamma), float)
    r_full = g - J.T @ lam
    muA[: len(act_lo)] = np.where(sol.fixed[act_lo], r_full[act_lo], muA[: len(act_lo)])
    na = len(muA)
    inactive = ~(sol.active_lower | sol.active_upper | sol.fixed)
    best = None
    for _ in range(8):
        J = _sparse(problem.jac(z, gamma))
        g = np.asarray(problem.grad(z, gamma), float)
        F = np.concatenate([g - J.T @ lam - Ha @ muA, problem.c(z, gamma), np.zeros(na)])
        nrm = np.linalg.norm(F, np.inf)
        if best is None or nrm < best[0]:
            best = (nrm, z.copy(), lam.copy(), muA.copy())
        if nrm <= 1e-11:
            break
        trial.z, trial.lam = z, lam
        H = _active_system(problem, gamma, trial)[0]
        if not np.all(np.isfinite(H.data)):
            break
        try:
            step = spla.splu(sp.csc_matrix(H)).solve(-F)
        except RuntimeError:
            break
        if not np.all(np.isfinite(step)):
            break
        z = z + step[:n]
        lam = lam + step[n:n + m]
        muA = muA + step[n + m:]
    nrm, z, lam, muA = best
    ok_bounds = np.all(z[inactive] > l[inactive]) and np.all(z[inactive] < u[inactive])
    ok_sign = np.all(muA[: len(act_lo)][~sol.fixed[act_lo]] >= -1e-9) and \
        np.all(muA[len(act_lo):] >= -1e-9)
    if not (ok_bounds and ok_sign and nrm <= 1e-8):
        return False
    sol.z, sol.lam = z, lam
    mul = np.zeros(n)
    muu = np.zeros(n)
    mul[act_lo] = muA[: len(act_lo)]
    muu[act_up] = muA[len(act_lo):]
    sol.mu_lower, sol.mu_upper = mul, muu
    sol.objective = float(problem.f(z, gamma))
    return True


def _full_row_rank(Jf, tol=1e-10):
    """Rank test: SVD for small matrices, LU pivots of the augmented system otherwise."""
    m, n = Jf.shape
    if m * n <= 4_000_000:
        s = np.linalg.svd(_to_dense(Jf), compute_uv=False)
        return bool(len(s) == m and s[-1] > tol * max(1.0, s[0]))
    K = sp.bmat([[sp.eye(n), Jf.T], [Jf, None]], format="csc")
    try:
        lu = spla.splu(K)
    except RuntimeError:
        return False
    d = np.abs(lu.U.diagonal())
    return bool(d.min() > tol * max(1.0, d.max()))


def _check_regularity(problem, gamma, sol, opts):
    J = _sparse(problem.jac(sol.z, gamma))
    act = np.flatnonzero(sol.active_lower | sol.active_upper | sol.fixed)
    if problem.m or len(act):
        if problem.m + len(act) > problem.n:
            sol.licq_ok = False
        else:
            # rank via the free-variable part of J: active columns are identity rows
            keep = np.setdiff1d(np.arange(problem.n), act)
            if not problem.m:
                sol.licq_ok = True
            else:
                sol.licq_ok = _full_row_rank(J.tocsc()[:, keep])
    mus = np.concatenate([sol.mu_lower[sol.active_lower], sol.mu_upper[sol.active_upper]])
    sol.strict_complementarity_ok = bool(np.all(mus > opts.eps_sc))


def kkt_residuals(problem, gamma, sol):
    z = sol.z
    g = np.asarray(problem.grad(z, gamma), float)
    J = _sparse(problem.jac(z, gamma))
    stat = g - J.T @ sol.lam - sol.mu_lower + sol.mu_upper
    free = ~sol.fixed
    l, u = problem.lower, problem.upper
    lo = np.isfinite(l) & free
    up = np.isfinite(u) & free
    comp = np.concatenate([(z - l)[lo] * sol.mu_lower[lo], (u - z)[up] * sol.mu_upper[up]])
    return {
        "stationarity": float(np.linalg.norm(stat[free], np.inf)) if free.any() else 0.0,
        "feasibility": float(np.linalg.norm(problem.c(z, gamma), np.inf)) if problem.m else 0.0,
        "complementarity": float(np.linalg.norm(comp, np.inf)) if comp.size else 0.0,
        "bound_violation": float(max(0.0, np.max(l - z), np.max(z - u))),
    }


def kkt_sensitivity(problem, solution, gamma, eps_sc=1e-6):
    """Derivatives of ``(z, lam, mu_A)`` with respect to ``gamma``.

    Solves ``H [dz; dlam; dmu_A] = [sum lam_i d2c_i/dz dgamma; -dc/dgamma; 0]``
    where ``H`` is the Jacobian of the active-set KKT equations. Returns
    ``(dz, dlam, dmu)`` with one column per parameter.
    """
    if solution.status != NlpStatus.OPTIMAL:
        raise DegenerateSolution(f"solution status is {solution.status.value}")
    if problem.jac_gamma is None or problem.cross_gamma is None:
        raise ValueError("problem has no parametric callbacks")
    if not solution.licq_ok:
        raise DegenerateSolution("LICQ fails at the solution")
    mus = np.concatenate([solution.mu_lower[solution.active_lower],
                          solution.mu_upper[solution.active_upper]])
    if np.any(mus <= eps_sc):
        raise DegenerateSolution("strict complementarity fails on an active bound")
    n, m = problem.n, problem.m
    H, J, Ha, act_lo, act_up = _active_system(problem, gamma, solution)
    cg = _sparse(problem.jac_gamma(solution.z, gamma))
    cross = _sparse(problem.cross_gamma(solution.z, gamma, solution.lam))
    p = cg.shape[1]
    na = Ha.shape[1]
    rhs = sp.vstack([cross, -cg, sp.csr_matrix((na, p))]).toarray()
    try:
        lu = spla.splu(H)
        sol = lu.solve(rhs)
    except RuntimeError as exc:
        raise DegenerateSolution("KKT matrix is singular") from exc
    if not np.all(np.isfinite(sol)):
        raise DegenerateSolution("KKT matrix is numerically singular")
    resid = np.abs(H @ sol - rhs).max()
    if resid > 1e-6 * max(1.0, np.abs(rhs).max()):
        raise DegenerateSolution("KKT matrix is numerically singular")
    return sol[:n], sol[n:n + m], sol[n + m:]
