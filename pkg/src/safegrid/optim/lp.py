"""LP solving behind the OptProblem contract.

Backed by scipy's HiGHS interface; every "optimal" answer is re-verified
against the raw constraint data before being reported, so a numerical
failure can never masquerade as a wrong optimum.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

from .problem import INF, OptProblem, SolveResult, Status

FEAS_TOL = 1e-8


def solve_lp(p: OptProblem, feas_tol: float = FEAS_TOL) -> SolveResult:
    """Solve an LP (no unfixed binaries, no quadratic objective)."""
    if p.has_binaries():
        raise ValueError("solve_lp: problem has unfixed binaries; use solve_mip")
    if p.has_quadratic():
        raise ValueError("solve_lp: problem has quadratic objective; use solve_qp")
    if p.n == 0:
        return SolveResult(Status.OPTIMAL, p.obj_const, np.zeros(0), problem=p)

    A_ub, b_ub, A_eq, b_eq = p.split_rows()
    lb, ub = p.bounds_arrays()
    bounds = [(None if l == -INF else l, None if u == INF else u) for l, u in zip(lb, ub)]
    res = linprog(
        c=np.asarray(p.c, float),
        A_ub=A_ub if A_ub.shape[0] else None,
        b_ub=b_ub if len(b_ub) else None,
        A_eq=A_eq if A_eq.shape[0] else None,
        b_eq=b_eq if len(b_eq) else None,
        bounds=bounds,
        method="highs",
    )
    if res.status == 2:
        return SolveResult(Status.INFEASIBLE, message=res.message, problem=p)
    if res.status == 3:
        return SolveResult(Status.UNBOUNDED, message=res.message, problem=p)
    if res.status != 0 or res.x is None:
        return SolveResult(Status.ITERATION_LIMIT, message=res.message, problem=p)
    x = np.asarray(res.x, float)
    viol = p.max_violation(x)
    if viol > feas_tol:
        return SolveResult(Status.ITERATION_LIMIT, message=f"solution violates constraints by {viol:g}", problem=p)
    return SolveResult(Status.OPTIMAL, p.objective_value(x), x, problem=p)
