"""Convex QP with diagonal quadratic objective.

Primal-dual interior point (Mehrotra predictor-corrector) on the slack-form
problem; feasibility is pre-certified with an LP phase so infeasibility is
never misreported, and KKT residuals are verified before claiming optimal.
"""
from __future__ import annotations

import numpy as np

from .lp import solve_lp
from .problem import INF, OptProblem, SolveResult, Status

KKT_TOL = 1e-9        # acceptance tolerance (relative)
TARGET_TOL = 1e-12    # keep iterating toward this while progress lasts
MAX_ITER = 120


def _feasibility_check(p: OptProblem) -> SolveResult:
    chk = OptProblem(f"{p.name}:feas")
    chk.var_names = p.var_names
    chk._index = p._index
    chk.lb = list(p.lb)
    chk.ub = list(p.ub)
    chk.binary = [False] * p.n
    chk.c = [0.0] * p.n
    chk.q = [0.0] * p.n
    chk.constraints = p.constraints
    return solve_lp(chk)


def _recession_unbounded(p: OptProblem) -> bool:
    """True if a feasible recession direction with c'd < 0 and Qd = 0 exists."""
    d = OptProblem(f"{p.name}:recession")
    for j in range(p.n):
        lo = 0.0 if p.lb[j] != -INF else -1.0
        hi = 0.0 if p.ub[j] != INF else 1.0
        if p.q[j] > 0.0:
            lo = hi = 0.0
        d.add_var(p.var_names[j], lo, hi)
        d.set_objective_term(j, linear=p.c[j])
    for con in p.constraints:
        sense = "=" if con.sense == "=" else con.sense
        d.add_constraint(con.coeffs, sense, 0.0)
    res = solve_lp(d)
    return res.ok and res.objective is not None and res.objective < -1e-9


def solve_qp(p: OptProblem, kkt_tol: float = 1e-7) -> SolveResult:
    """Solve min c'x + 0.5 x'diag(q)x; dispatches to B&B when binaries exist."""
    if p.has_binaries():
        from .mip import solve_mip

        return solve_mip(p)
    if not p.has_quadratic():
        return solve_lp(p)
    return solve_qp_continuous(p, kkt_tol=kkt_tol)


def solve_qp_continuous(p: OptProblem, kkt_tol: float = 1e-7) -> SolveResult:
    feas = _feasibility_check(p)
    if feas.status == Status.INFEASIBLE:
        return SolveResult(Status.INFEASIBLE, message="LP feasibility phase infeasible", problem=p)
    if feas.status != Status.OPTIMAL:
        return SolveResult(feas.status, message=f"feasibility phase: {feas.message}", problem=p)

    x, ok = _mehrotra(p)
    if ok:
        for tol in (1e-7, 1e-5, 1e-3):
            xp = _polish(p, x, act_tol=tol)
            if xp is not x:
                x = xp
                break
    if ok and p.max_violation(x) <= 1e-8:
        # convergence criteria inside the IPM are the KKT conditions at
        # 1e-9 relative tolerance; feasibility re-checked independently here
        return SolveResult(Status.OPTIMAL, p.objective_value(x), x, problem=p)

    # degenerate stall or marginal feasibility: snap onto the active set and
    # accept only with an explicit KKT certificate
    for tol in (1e-6, 1e-4, 1e-2):
        xp = _polish(p, x, act_tol=tol)
        if p.max_violation(xp) <= 1e-8 and _kkt_certified(p, xp):
            return SolveResult(Status.OPTIMAL, p.objective_value(xp), xp, problem=p)
    # proximal-regularization ladder: strictly convex surrogates keep the
    # Newton systems well conditioned on degenerate instances
    x_ref = feas.x if feas.x is not None else x
    for sigma in (1e-4, 1e-6, 1e-8):
        prox = p.copy_with_bounds(p.lb, p.ub)
        prox.q = [qj + 2.0 * sigma for qj in p.q]
        prox.c = [cj - 2.0 * sigma * xr for cj, xr in zip(p.c, x_ref)]
        x2, ok2 = _mehrotra(prox)
        if ok2:
            x_ref = x2
    cand = np.asarray(x_ref, float)
    for tol in (1e-7, 1e-5, 1e-3):
        xp = _polish(p, cand, act_tol=tol)
        if xp is not cand:
            cand = xp
            break
    if p.max_violation(cand) <= 1e-8 and _kkt_certified(p, cand):
        return SolveResult(Status.OPTIMAL, p.objective_value(cand), cand, problem=p)
    if _recession_unbounded(p):
        return SolveResult(Status.UNBOUNDED, message="objective unbounded along recession direction", problem=p)
    return SolveResult(Status.ITERATION_LIMIT, message="interior point did not converge", problem=p)


def _kkt_certified(p: OptProblem, x: np.ndarray, act_tol: float = 1e-7, tol: float = 1e-7) -> bool:
    """Certify optimality: -grad lies in the cone of active constraint
    normals, with multipliers fit by nonnegative least squares."""
    from scipy.optimize import nnls

    n = p.n
    g = np.asarray(p.c, float) + np.asarray(p.q, float) * x
    cols: list[np.ndarray] = []
    lb, ub = p.bounds_arrays()
    for j in range(n):
        if lb[j] != -INF and x[j] - lb[j] <= act_tol:
            e = np.zeros(n)
            e[j] = -1.0
            cols.append(e)
        if ub[j] != INF and ub[j] - x[j] <= act_tol:
            e = np.zeros(n)
            e[j] = 1.0
            cols.append(e)
    for con in p.constraints:
        a = np.zeros(n)
        for j, v in con.coeffs.items():
            a[j] = v
        lhs = float(a @ x)
        if con.sense == "=":
            cols.append(a)
            cols.append(-a)
        elif con.sense == "<=" and con.rhs - lhs <= act_tol:
            cols.append(a)
        elif con.sense == ">=" and lhs - con.rhs <= act_tol:
            cols.append(-a)
    scale = 1.0 + float(np.max(np.abs(g), initial=0.0))
    if not cols:
        return float(np.max(np.abs(g), initial=0.0)) <= tol * scale
    M = np.stack(cols, axis=1)
    try:
        _, res = nnls(M, -g)
    except Exception:
        return False
    return float(res) <= tol * scale


def _polish(p: OptProblem, x: np.ndarray, act_tol: float = 1e-6) -> np.ndarray:
    """Snap the interior-point iterate onto its active set.

    Solves the equality-constrained QP on the near-active constraints and
    keeps the result only when it stays feasible and does not worsen the
    objective; degenerate actives fall back to the least-norm solution.
    """
    n = p.n
    rows: list[np.ndarray] = []
    rhs: list[float] = []
    lb, ub = p.bounds_arrays()
    for j in range(n):
        if lb[j] != -INF and x[j] - lb[j] <= act_tol:
            e = np.zeros(n)
            e[j] = 1.0
            rows.append(e)
            rhs.append(lb[j])
        elif ub[j] != INF and ub[j] - x[j] <= act_tol:
            e = np.zeros(n)
            e[j] = 1.0
            rows.append(e)
            rhs.append(ub[j])
    for con in p.constraints:
        lhs = sum(v * x[j] for j, v in con.coeffs.items())
        active = con.sense == "=" or (con.sense == "<=" and con.rhs - lhs <= act_tol) or (
            con.sense == ">=" and lhs - con.rhs <= act_tol
        )
        if active:
            a = np.zeros(n)
            for j, v in con.coeffs.items():
                a[j] = v
            rows.append(a)
            rhs.append(con.rhs)
    m = len(rows)
    q = np.asarray(p.q, float)
    c = np.asarray(p.c, float)
    g = q * x + c
    eps = 1e-8
    # step around x: min 0.5 d'(Q+eps I)d + g'd  s.t.  A(x+d) = rhs
    if m:
        A = np.stack(rows)
        K = np.zeros((n + m, n + m))
        K[:n, :n] = np.diag(q + eps)
        K[:n, n:] = A.T
        K[n:, :n] = A
        r = np.concatenate([-g, np.asarray(rhs) - A @ x])
    else:
        K = np.diag(q + eps)
        r = -g
    try:
        sol = np.linalg.lstsq(K, r, rcond=None)[0]
    except np.linalg.LinAlgError:
        return x
    xp = x + sol[:n]
    if not np.all(np.isfinite(xp)):
        return x
    if p.max_violation(xp) > 1e-9:
        return x
    if p.objective_value(xp) > p.objective_value(x) + 1e-9 * (1.0 + abs(p.objective_value(x))):
        return x
    return xp


def _mehrotra(p: OptProblem) -> tuple[np.ndarray, bool]:
    """Predictor-corrector IPM on slack form; returns (x, converged).

    Zero-curvature columns without a finite lower bound are normalized first
    (upper-only bounds flipped, free variables split into two nonnegative
    parts) so the condensed Newton system stays well conditioned.
    """
    n0 = p.n
    A_ub, b_ub, A_eq, b_eq = p.split_rows()
    m_ub = A_ub.shape[0]
    ns = n0 + m_ub
    lb_s = np.concatenate([np.asarray(p.lb, float), np.zeros(m_ub)])
    ub_s = np.concatenate([np.asarray(p.ub, float), np.full(m_ub, INF)])
    q_s = np.concatenate([np.asarray(p.q, float), np.zeros(m_ub)])
    c_s = np.concatenate([np.asarray(p.c, float), np.zeros(m_ub)])

    if m_ub or A_eq.shape[0]:
        import scipy.sparse as sp

        A_s = sp.vstack(
            [
                sp.hstack([A_ub, sp.eye(m_ub, format="csr")], format="csr"),
                sp.hstack([A_eq, sp.csr_matrix((A_eq.shape[0], m_ub))], format="csr"),
            ],
            format="csr",
        ).toarray()
        b = np.concatenate([b_ub, b_eq])
    else:
        A_s = np.zeros((0, ns))
        b = np.zeros(0)
    m = A_s.shape[0]

    # normalization: ("id", j) | ("flip", j) | ("pos", j) + ("neg", j);
    # fixed columns (lb == ub) are substituted out entirely
    cols: list[tuple[str, int]] = []
    fixed: dict[int, float] = {}
    for j in range(ns):
        if ub_s[j] - lb_s[j] <= 1e-12 and lb_s[j] != -INF:
            fixed[j] = 0.5 * (lb_s[j] + ub_s[j])
        elif lb_s[j] != -INF or q_s[j] > 0.0:
            cols.append(("id", j))
        elif ub_s[j] != INF:
            cols.append(("flip", j))
        else:
            cols.append(("pos", j))
            cols.append(("neg", j))
    n = len(cols)
    if n == 0:
        out = np.zeros(ns)
        for j, v in fixed.items():
            out[j] = v
        return out[:n0], True
    A = np.zeros((m, n))
    lb = np.zeros(n)
    ub = np.full(n, INF)
    q = np.zeros(n)
    c = np.zeros(n)
    b = b.copy()
    for j, v in fixed.items():
        if v != 0.0:
            b -= A_s[:, j] * v
    for k, (kind, j) in enumerate(cols):
        if kind == "id":
            A[:, k] = A_s[:, j]
            lb[k], ub[k], q[k], c[k] = lb_s[j], ub_s[j], q_s[j], c_s[j]
        elif kind == "flip":  # x_j = ub_j - y,  y >= 0
            A[:, k] = -A_s[:, j]
            b -= A_s[:, j] * ub_s[j]
            lb[k], ub[k], c[k] = 0.0, INF, -c_s[j]
        elif kind == "pos":
            A[:, k] = A_s[:, j]
            lb[k], c[k] = 0.0, c_s[j]
        else:  # neg
            A[:, k] = -A_s[:, j]
            lb[k], c[k] = 0.0, -c_s[j]

    def recover(x: np.ndarray) -> np.ndarray:
        out = np.zeros(ns)
        for j, v in fixed.items():
            out[j] = v
        for k, (kind, j) in enumerate(cols):
            if kind == "id":
                out[j] = x[k]
            elif kind == "flip":
                out[j] = ub_s[j] - x[k]
            elif kind == "pos":
                out[j] += x[k]
            else:
                out[j] -= x[k]
        return out[:n0]

    has_lb = lb != -INF
    has_ub = ub != INF

    # strictly interior start
    x = np.zeros(n)
    for j in range(n):
        if has_lb[j] and has_ub[j]:
            x[j] = 0.5 * (lb[j] + ub[j])
        elif has_lb[j]:
            x[j] = lb[j] + 1.0
        elif has_ub[j]:
            x[j] = ub[j] - 1.0
    margin = np.where(has_lb & has_ub, 0.25 * np.maximum(ub - lb, 1e-12), 1.0)
    gl = np.where(has_lb, np.maximum(x - lb, margin), 1.0)
    gu = np.where(has_ub, np.maximum(ub - x, margin), 1.0)
    x = np.where(has_lb, lb + gl, x)
    gu = np.where(has_ub, np.maximum(ub - x, 1e-8), 1.0)
    zl = np.where(has_lb, 1.0, 0.0)
    zu = np.where(has_ub, 1.0, 0.0)
    y = np.zeros(m)

    nbar = max(1, int(np.sum(has_lb) + np.sum(has_ub)))
    norm_b = 1.0 + float(np.max(np.abs(b), initial=0.0))
    norm_c = 1.0 + float(np.max(np.abs(c), initial=0.0))
    delta = 1e-10
    best: tuple[float, np.ndarray] | None = None
    stall = 0
    mu_prev = float("inf")

    for _ in range(MAX_ITER):
        r_d = q * x + c + (A.T @ y if m else 0.0) - zl + zu
        r_p = (A @ x - b) if m else np.zeros(0)
        mu = (float(gl @ zl) + float(gu @ zu)) / nbar

        rp_ok = float(np.max(np.abs(r_p), initial=0.0)) <= KKT_TOL * norm_b
        rd_ok = float(np.max(np.abs(r_d), initial=0.0)) <= KKT_TOL * norm_c
        if rp_ok and rd_ok and mu <= KKT_TOL:
            if best is None or mu < best[0]:
                best = (mu, x.copy())
            if mu <= TARGET_TOL:
                return recover(best[1]), True
        stall = stall + 1 if mu > 0.5 * mu_prev else 0
        mu_prev = mu
        if stall >= 4:
            break

        dl = np.where(has_lb, zl / np.maximum(gl, 1e-300), 0.0)
        du = np.where(has_ub, zu / np.maximum(gu, 1e-300), 0.0)
        H = q + dl + du + delta

        def solve_kkt(rd: np.ndarray, rp: np.ndarray, rc_l: np.ndarray, rc_u: np.ndarray):
            # solves: H dx + A' dy = -rd + rc_l/gl - rc_u/gu ;  A dx = -rp
            # with dzl = (rc_l - zl*dx)/gl,  dzu = (rc_u + zu*dx)/gu
            rhs_x = -rd + np.where(has_lb, rc_l / np.maximum(gl, 1e-300), 0.0) - np.where(
                has_ub, rc_u / np.maximum(gu, 1e-300), 0.0
            )
            if m:
                Hinv = 1.0 / H
                S = (A * Hinv) @ A.T + delta * np.eye(m)
                rhs_y = A @ (Hinv * rhs_x) + rp
                try:
                    dy = np.linalg.solve(S, rhs_y)
                except np.linalg.LinAlgError:
                    dy = np.linalg.lstsq(S, rhs_y, rcond=None)[0]
                dx = Hinv * (rhs_x - A.T @ dy)
            else:
                dy = np.zeros(0)
                dx = rhs_x / H
            dzl = np.where(has_lb, (rc_l - zl * dx) / np.maximum(gl, 1e-300), 0.0)
            dzu = np.where(has_ub, (rc_u + zu * dx) / np.maximum(gu, 1e-300), 0.0)
            return dx, dy, dzl, dzu

        # predictor
        rc_l = -gl * zl
        rc_u = -gu * zu
        dx, dy, dzl, dzu = solve_kkt(r_d, r_p, rc_l, rc_u)

        def step_len(v: np.ndarray, dv: np.ndarray, mask: np.ndarray) -> float:
            neg = mask & (dv < 0)
            if not np.any(neg):
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        a_p = min(step_len(gl, dx, has_lb), step_len(gu, -dx, has_ub))
        a_d = min(step_len(zl, dzl, has_lb), step_len(zu, dzu, has_ub))
        mu_aff = (
            float((gl + a_p * np.where(has_lb, dx, 0.0)) @ (zl + a_d * dzl))
            + float((gu - a_p * np.where(has_ub, dx, 0.0)) @ (zu + a_d * dzu))
        ) / nbar
        sigma = (mu_aff / max(mu, 1e-300)) ** 3 if mu > 0 else 0.0

        # corrector
        rc_l = -gl * zl + sigma * mu - np.where(has_lb, dx, 0.0) * dzl
        rc_u = -gu * zu + sigma * mu + np.where(has_ub, dx, 0.0) * dzu
        dx, dy, dzl, dzu = solve_kkt(r_d, r_p, rc_l, rc_u)

        a_p = 0.995 * min(step_len(gl, dx, has_lb), step_len(gu, -dx, has_ub))
        a_d = 0.995 * min(step_len(zl, dzl, has_lb), step_len(zu, dzu, has_ub))
        a_p, a_d = min(a_p, 1.0), min(a_d, 1.0)

        x = x + a_p * dx
        gl = np.where(has_lb, x - lb, 1.0)
        gu = np.where(has_ub, ub - x, 1.0)
        y = y + a_d * dy
        zl = np.where(has_lb, np.maximum(zl + a_d * dzl, 1e-300), 0.0)
        zu = np.where(has_ub, np.maximum(zu + a_d * dzu, 1e-300), 0.0)
        if np.any(gl[has_lb] <= 0) or np.any(gu[has_ub] <= 0):
            break
        if float(np.max(np.abs(x), initial=0.0)) > 1e14:
            break

    if best is not None:
        return recover(best[1]), True
    return recover(x), False
