"""Best-first branch and bound over LP/QP relaxations for binary variables.

Branching: most-fractional binary, ties broken by lowest variable index;
node ordering: (relaxation bound, node id), so runs are deterministic.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .lp import solve_lp
from .problem import OptProblem, SolveResult, Status

BINARY_CAP = 256
ABS_GAP = 1e-6
INT_TOL = 1e-6
NODE_LIMIT = 200_000


@dataclass(order=True)
class _Node:
    bound: float
    nid: int
    lb: list[float]
    ub: list[float]
    x: Optional[np.ndarray]


def _relaxation_solver(p: OptProblem) -> Callable[[OptProblem], SolveResult]:
    if p.has_quadratic():
        from .qp import solve_qp_continuous

        return solve_qp_continuous
    return solve_lp


def solve_mip(
    p: OptProblem,
    abs_gap: float = ABS_GAP,
    binary_cap: int = BINARY_CAP,
    node_limit: int = NODE_LIMIT,
    first_feasible: bool = False,
) -> SolveResult:
    """Solve with binaries; returns optimal within ``abs_gap`` or a bounded
    gap-limit result. ``first_feasible`` stops at the first incumbent
    (used for action replacement)."""
    bin_idx = [i for i, b in enumerate(p.binary) if b and p.lb[i] != p.ub[i]]
    if len(bin_idx) > binary_cap:
        raise ValueError(f"{len(bin_idx)} unfixed binaries exceed cap {binary_cap}")
    relax = _relaxation_solver(p)

    root = p.copy_with_bounds(p.lb, p.ub)
    root.binary = [False] * p.n
    res0 = relax(root)
    if res0.status in (Status.INFEASIBLE, Status.UNBOUNDED):
        return SolveResult(res0.status, message=f"root relaxation: {res0.status.value}", problem=p, nodes=1)
    if res0.status != Status.OPTIMAL:
        return SolveResult(Status.ITERATION_LIMIT, message=res0.message, problem=p, nodes=1)
    if not bin_idx:
        return SolveResult(Status.OPTIMAL, res0.objective, res0.x, best_bound=res0.objective, nodes=1, problem=p)

    heap: list[_Node] = []
    next_id = 0
    heapq.heappush(heap, _Node(res0.objective, next_id, list(p.lb), list(p.ub), res0.x))
    next_id += 1
    incumbent: Optional[np.ndarray] = None
    inc_obj = float("inf")
    nodes = 0

    def fractional(x: np.ndarray) -> Optional[int]:
        best, best_frac = None, INT_TOL
        for i in bin_idx:
            f = abs(x[i] - round(x[i]))
            if f > best_frac:
                best, best_frac = i, f
        return best

    while heap:
        if nodes >= node_limit:
            gap = inc_obj - heap[0].bound if heap else 0.0
            status = Status.GAP_LIMIT if incumbent is not None else Status.ITERATION_LIMIT
            return SolveResult(
                status,
                inc_obj if incumbent is not None else None,
                incumbent,
                mip_gap=gap if incumbent is not None else None,
                best_bound=heap[0].bound if heap else None,
                nodes=nodes,
                problem=p,
                message="node limit reached",
            )
        node = heapq.heappop(heap)
        if node.bound >= inc_obj - abs_gap:
            break  # best-first: all remaining bounds are >= this one
        nodes += 1
        if node.x is None:
            sub = p.copy_with_bounds(node.lb, node.ub)
            sub.binary = [False] * p.n
            r = relax(sub)
            if r.status == Status.INFEASIBLE:
                continue
            if r.status != Status.OPTIMAL:
                # a numerical failure must never silently prune a subtree
                return SolveResult(Status.ITERATION_LIMIT, message=f"node relaxation failed: {r.message}", problem=p, nodes=nodes)
            node.bound, node.x = r.objective, r.x
            if node.bound >= inc_obj - abs_gap:
                continue
        j = fractional(node.x)
        if j is None:
            # integral: candidate incumbent (round binaries exactly)
            x = node.x.copy()
            for i in bin_idx:
                x[i] = round(x[i])
            obj = node.bound
            if obj < inc_obj:
                incumbent, inc_obj = x, obj
                if first_feasible:
                    return SolveResult(Status.OPTIMAL, inc_obj, incumbent, mip_gap=0.0, best_bound=inc_obj, nodes=nodes, problem=p)
            continue
        for val in (0.0, 1.0):
            lb2, ub2 = list(node.lb), list(node.ub)
            lb2[j] = ub2[j] = val
            sub = p.copy_with_bounds(lb2, ub2)
            sub.binary = [False] * p.n
            r = relax(sub)
            if r.status == Status.INFEASIBLE:
                next_id += 1
                continue
            if r.status != Status.OPTIMAL:
                return SolveResult(Status.ITERATION_LIMIT, message=f"node relaxation failed: {r.message}", problem=p, nodes=nodes)
            if r.objective < inc_obj - abs_gap:
                heapq.heappush(heap, _Node(r.objective, next_id, lb2, ub2, r.x))
            next_id += 1

    if incumbent is None:
        return SolveResult(Status.INFEASIBLE, message="no integral feasible point", problem=p, nodes=nodes)
    bound = min([n.bound for n in heap], default=inc_obj)
    return SolveResult(
        Status.OPTIMAL,
        inc_obj,
        incumbent,
        mip_gap=max(0.0, inc_obj - bound),
        best_bound=bound,
        nodes=nodes,
        problem=p,
    )
