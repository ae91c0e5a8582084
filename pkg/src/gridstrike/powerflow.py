"""AC mismatch functions and a Newton power-flow solver.

Unknowns of the reduced system are the angles at every non-slack bus and
the magnitudes at demand buses; the residual stacks active mismatch at
generator buses, active mismatch at demand buses, and reactive mismatch at
demand buses.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import build_admittance

log = logging.getLogger(__name__)


class PFStatus(str, enum.Enum):
    CONVERGED = "Converged"
    DIVERGED = "Diverged"
    MAX_ITERATIONS = "MaxIterations"


@dataclass
class PFOptions:
    tol: float = 1e-8
    max_iter: int = 50
    growth_limit: int = 5
    v_floor: float = 0.2
    v_ceiling: float = 5.0
    retry_from_base: bool = True
    dense_below: int = 300


@dataclass
class PowerFlowSolution:
    V: np.ndarray
    theta: np.ndarray
    Q_gen: np.ndarray
    status: PFStatus
    iterations: int
    final_residual: float
    trace: list = field(default_factory=list)

    @property
    def converged(self):
        return self.status == PFStatus.CONVERGED

    @property
    def complex_voltage(self):
        return self.V * np.exp(1j * self.theta)


def power_injection(Ybus, V, theta):
    """Complex injections ``S_i = V_i conj(sum_k Y_ik V_k)`` at every bus."""
    Vc = V * np.exp(1j * theta)
    return Vc * np.conj(Ybus @ Vc)


def mismatch(grid, admittance, V, theta):
    """Residuals ``(F^P, F^Q)`` over all buses for fixed injections P, Q."""
    S = power_injection(admittance.Ybus, np.asarray(V, float), np.asarray(theta, float))
    return S.real - grid.P, S.imag - grid.Q


def dS_dV(Ybus, Vc):
    """Sparse ``dS/dVa`` and ``dS/dVm`` (polar), complex."""
    n = len(Vc)
    Ibus = Ybus @ Vc
    diagV = sp.diags(Vc)
    diagI = sp.diags(Ibus)
    diagVnorm = sp.diags(Vc / np.abs(Vc))
    dS_dVa = 1j * diagV @ np.conj(diagI - Ybus @ diagV)
    dS_dVm = diagV @ np.conj(Ybus @ diagVnorm) + np.conj(diagI) @ diagVnorm
    return sp.csr_matrix(dS_dVa), sp.csr_matrix(dS_dVm)


def d2S_dV2(Ybus, Vc, lam):
    """Second derivatives of ``lam^T S`` (complex ``lam``) in (Va, Vm) blocks."""
    n = len(Vc)
    Ibus = Ybus @ Vc
    diaglam = sp.diags(lam)
    diagV = sp.diags(Vc)
    A = sp.diags(lam * Vc)
    B = Ybus @ diagV
    C = A @ np.conj(B)
    D = Ybus.conj().T @ diagV
    E = np.conj(diagV) @ (D @ diaglam - sp.diags(D @ lam))
    F = C - A @ sp.diags(np.conj(Ibus))
    G = sp.diags(1.0 / np.abs(Vc))
    Gaa = E + F
    Gva = 1j * G @ (E - F)
    Gav = Gva.T
    Gvv = G @ (C + C.T) @ G
    return Gaa, Gav, Gva, Gvv


def reduced_index(grid):
    """Variable and residual index sets for the reduced system."""
    pvpq = grid.non_slack
    pq = grid.dem
    return pvpq, pq


def reduced_residual(grid, Ybus, V, theta, P=None, Q=None):
    S = power_injection(Ybus, V, theta)
    P = grid.P if P is None else P
    Q = grid.Q if Q is None else Q
    pvpq, pq = reduced_index(grid)
    return np.concatenate([(S.real - P)[pvpq], (S.imag - Q)[pq]])


def reduced_jacobian(grid, Ybus, V, theta):
    """Jacobian of the reduced residual with respect to (theta_{G,D}, V_D)."""
    pvpq, pq = reduced_index(grid)
    dVa, dVm = dS_dV(Ybus, V * np.exp(1j * theta))
    J11 = dVa[pvpq][:, pvpq].real
    J12 = dVm[pvpq][:, pq].real
    J21 = dVa[pq][:, pvpq].imag
    J22 = dVm[pq][:, pq].imag
    return sp.bmat([[J11, J12], [J21, J22]], format="csc")


def branch_power_gamma(grid, blocks_d, V, theta, weights=None):
    """``dS/dgamma`` contributions of every line at its two terminals.

    ``blocks_d`` are the gamma-derivative branch blocks (first or second
    order). Returns ``(dS_from, dS_to)``, each of length ``n_line``.
    """
    f, t = grid.line_from, grid.line_to
    a, b, c, d = blocks_d
    Vc = V * np.exp(1j * theta)
    dS_f = Vc[f] * np.conj(a * Vc[f] + b * Vc[t])
    dS_t = Vc[t] * np.conj(c * Vc[f] + d * Vc[t])
    return dS_f, dS_t


def mismatch_gamma_jacobian(grid, admittance, V, theta):
    """Sparse ``d(F^P, F^Q)/dgamma`` over all buses, shape ``(2 n_bus, n_line)``."""
    n, L = grid.n_bus, grid.n_line
    dS_f, dS_t = branch_power_gamma(grid, admittance.d_blocks, V, theta)
    f, t = grid.line_from, grid.line_to
    cols = np.arange(L)
    rows = np.concatenate([f, t, n + f, n + t])
    vals = np.concatenate([dS_f.real, dS_t.real, dS_f.imag, dS_t.imag])
    return sp.csr_matrix((vals, (rows, np.tile(cols, 4))), shape=(2 * n, L))


def reduced_gamma_jacobian(grid, admittance, V, theta):
    full = mismatch_gamma_jacobian(grid, admittance, V, theta)
    pvpq, pq = reduced_index(grid)
    return full[np.concatenate([pvpq, grid.n_bus + pq])]


def _solve(J, rhs, dense_below):
    if J.shape[0] < dense_below:
        return np.linalg.solve(J.toarray(), rhs)
    return spla.spsolve(J, rhs)


def newton(grid, Ybus, V0, theta0, options=None):
    """Plain Newton iteration on the reduced system from ``(V0, theta0)``."""
    opts = options or PFOptions()
    pvpq, pq = reduced_index(grid)
    npvpq = len(pvpq)
    V = np.array(V0, dtype=float)
    theta = np.array(theta0, dtype=float)
    F = reduced_residual(grid, Ybus, V, theta)
    norm = np.linalg.norm(F, np.inf)
    trace = [norm]
    growth = 0
    status = PFStatus.MAX_ITERATIONS
    it = 0
    while True:
        if norm <= opts.tol:
            status = PFStatus.CONVERGED
            break
        if it >= opts.max_iter:
            break
        J = reduced_jacobian(grid, Ybus, V, theta)
        try:
            dx = _solve(J, -F, opts.dense_below)
        except (np.linalg.LinAlgError, RuntimeError):
            status = PFStatus.DIVERGED
            break
        if not np.all(np.isfinite(dx)):
            status = PFStatus.DIVERGED
            break
        theta[pvpq] += dx[:npvpq]
        V[pq] += dx[npvpq:]
        it += 1
        F = reduced_residual(grid, Ybus, V, theta)
        new_norm = np.linalg.norm(F, np.inf)
        trace.append(new_norm)
        if not np.isfinite(new_norm) or np.any(V <= opts.v_floor) or np.any(V >= opts.v_ceiling):
            status = PFStatus.DIVERGED
            norm = new_norm
            break
        growth = growth + 1 if new_norm > norm else 0
        norm = new_norm
        if growth >= opts.growth_limit:
            status = PFStatus.DIVERGED
            break
    return V, theta, status, it, norm, trace


def flat_start(grid):
    V = np.ones(grid.n_bus)
    gs = np.concatenate([grid.gen, [grid.slack]])
    V[gs] = grid.Vset[gs]
    theta = np.zeros(grid.n_bus)
    theta[grid.slack] = grid.Va0[grid.slack]
    return V, theta


def solve_power_flow(grid, attack=None, init=None, options=None, base=None):
    """Solve ``F(V, theta; gamma) = 0``.

    Never raises on non-convergence: the returned status says whether a
    solution was found. ``base`` is an optional converged solution used for
    one retry (the unattacked operating point is a good warm start when
    the first attempt fails).
    """
    opts = options or PFOptions()
    adm = build_admittance(grid, attack)
    if init is None:
        V0, th0 = flat_start(grid)
    else:
        V0, th0 = (np.array(a, dtype=float) for a in init)
        fixed = np.concatenate([grid.gen, [grid.slack]])
        V0[fixed] = grid.Vset[fixed]
    V, theta, status, it, res, trace = newton(grid, adm.Ybus, V0, th0, opts)
    if status != PFStatus.CONVERGED and opts.retry_from_base:
        starts = []
        if base is not None:
            starts.append((base.V, base.theta))
        if init is not None:
            starts.append(flat_start(grid))
        for Vs, ths in starts:
            r = newton(grid, adm.Ybus, Vs, ths, opts)
            it += r[3]
            trace += r[5]
            if r[2] == PFStatus.CONVERGED:
                V, theta, status, _, res, _ = r
                break
    S = power_injection(adm.Ybus, V, theta)
    Q_gen = np.full(grid.n_bus, np.nan)
    gs = np.concatenate([grid.gen, [grid.slack]])
    Q_gen[gs] = S.imag[gs] + grid.Qd[gs]
    return PowerFlowSolution(V=V, theta=theta, Q_gen=Q_gen, status=status,
                             iterations=it, final_residual=float(res), trace=trace)
