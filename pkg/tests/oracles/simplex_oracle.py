"""Independent dense two-phase tableau simplex oracle (Bland's rule).

Deliberately naive and self-contained; cross-checks the package solvers on
small generated instances. Requires finite bounds on every variable.

Interface: min c'x  s.t.  rows A x (sense) b,  lb <= x <= ub (all finite).
"""
from __future__ import annotations

import numpy as np

EPS = 1e-9


def _pivot(T: np.ndarray, basis: list[int], row: int, col: int) -> None:
    T[row] /= T[row, col]
    for r in range(T.shape[0]):
        if r != row and T[r, col] != 0.0:
            T[r] -= T[r, col] * T[row]
    basis[row] = col


def _bland(T: np.ndarray, basis: list[int], ncols: int) -> str:
    m = T.shape[0] - 1
    for _ in range(100000):
        col = -1
        for j in range(ncols):
            if T[m, j] < -EPS:
                col = j
                break
        if col < 0:
            return "optimal"
        row, best = -1, np.inf
        for i in range(m):
            if T[i, col] > EPS:
                ratio = T[i, -1] / T[i, col]
                if ratio < best - EPS or (abs(ratio - best) <= EPS and (row < 0 or basis[i] < basis[row])):
                    best, row = ratio, i
        if row < 0:
            return "unbounded"
        _pivot(T, basis, row, col)
    raise RuntimeError("oracle simplex iteration limit")


def solve_oracle(c, A_rows, senses, b, lb, ub):
    """(status, objective, x); status in {'optimal', 'infeasible'}.

    All bounds must be finite (generated instances only), which rules out
    unboundedness by construction.
    """
    c = np.asarray(c, float)
    lb = np.asarray(lb, float)
    ub = np.asarray(ub, float)
    n = len(c)
    if not (np.all(np.isfinite(lb)) and np.all(np.isfinite(ub))):
        raise ValueError("oracle requires finite bounds")
    m = len(senses)
    A = np.asarray(A_rows, float).reshape(m, n) if m else np.zeros((0, n))
    b = np.asarray(b, float)

    # shift x = lb + y, add cap rows y <= ub - lb
    b_sh = b - (A @ lb if m else 0.0)
    rows = m + n
    A2 = np.zeros((rows, n))
    b2 = np.zeros(rows)
    if m:
        A2[:m] = A
        b2[:m] = b_sh
    senses2 = list(senses)
    for j in range(n):
        A2[m + j, j] = 1.0
        b2[m + j] = ub[j] - lb[j]
        senses2.append("<=")

    # slacks
    slack_cols = []
    for r, s in enumerate(senses2):
        if s in ("<=", ">="):
            col = np.zeros(rows)
            col[r] = 1.0 if s == "<=" else -1.0
            slack_cols.append(col)
    ncols = n + len(slack_cols)
    M = np.zeros((rows, ncols))
    M[:, :n] = A2
    for k, col in enumerate(slack_cols):
        M[:, n + k] = col
    c2 = np.concatenate([c, np.zeros(len(slack_cols))])
    for r in range(rows):
        if b2[r] < 0:
            M[r] *= -1
            b2[r] *= -1

    # phase 1
    T = np.zeros((rows + 1, ncols + rows + 1))
    T[:rows, :ncols] = M
    T[:rows, ncols : ncols + rows] = np.eye(rows)
    T[:rows, -1] = b2
    basis = list(range(ncols, ncols + rows))
    T[rows, :] = -T[:rows, :].sum(axis=0)
    T[rows, ncols : ncols + rows] = 0.0
    _bland(T, basis, ncols)
    if -T[rows, -1] > 1e-7:
        return "infeasible", None, None
    for i in range(rows):
        if basis[i] >= ncols:
            for j in range(ncols):
                if abs(T[i, j]) > 1e-7:
                    _pivot(T, basis, i, j)
                    break

    # phase 2
    T[rows, :] = 0.0
    T[rows, :ncols] = c2
    for i in range(rows):
        if basis[i] < ncols:
            T[rows] -= c2[basis[i]] * T[i]
    T[:, ncols : ncols + rows] = 0.0
    status = _bland(T, basis, ncols)
    if status == "unbounded":  # impossible with finite boxes; defensive
        return "infeasible", None, None
    y = np.zeros(ncols)
    for i in range(rows):
        if basis[i] < ncols:
            y[basis[i]] = T[i, -1]
    x = lb + y[:n]
    return "optimal", float(np.dot(c, x)), x
