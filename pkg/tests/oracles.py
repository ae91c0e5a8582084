"""Independent reference implementations used only by the tests."""

import cmath

import numpy as np


def dense_ybus(grid, gamma=None):
    """Bus admittance by a plain double loop over branches (pi model)."""
    n = grid.n_bus
    Y = [[0j] * n for _ in range(n)]
    for k in range(grid.n_line):
        g = 0.0 if gamma is None else float(gamma[k])
        z = complex(grid.r[k], grid.x[k]) * (1.0 + g)
        ys = 1.0 / z
        bc = grid.b_sh[k]
        a = grid.tap[k] * cmath.exp(1j * grid.shift[k])
        f, t = int(grid.line_from[k]), int(grid.line_to[k])
        for i in range(n):
            for j in range(n):
                if i == f and j == f:
                    Y[i][j] += (ys + 1j * bc / 2) / (a * a.conjugate())
                elif i == f and j == t:
                    Y[i][j] += -ys / a.conjugate()
                elif i == t and j == f:
                    Y[i][j] += -ys / a
                elif i == t and j == t:
                    Y[i][j] += ys + 1j * bc / 2
    for i in range(n):
        Y[i][i] += complex(grid.Gs[i], grid.Bs[i])
    return np.array(Y)


def naive_injection(Y, V, theta):
    """P_i, Q_i from the polar sum over all bus pairs."""
    n = len(V)
    P = np.zeros(n)
    Q = np.zeros(n)
    for i in range(n):
        for j in range(n):
            G, B = Y[i, j].real, Y[i, j].imag
            d = theta[i] - theta[j]
            P[i] += V[i] * V[j] * (G * np.cos(d) + B * np.sin(d))
            Q[i] += V[i] * V[j] * (G * np.sin(d) - B * np.cos(d))
    return P, Q
