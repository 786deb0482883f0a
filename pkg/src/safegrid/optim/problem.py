"""Optimization problem container and solve results."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

INF = float("inf")


class Status(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    GAP_LIMIT = "gap-limit"
    ITERATION_LIMIT = "iteration-limit"


@dataclass
class Constraint:
    coeffs: dict[int, float]
    sense: str  # '<=', '=', '>='
    rhs: float
    name: str = ""


class OptProblem:
    """min c'x + 0.5 x'diag(q)x subject to linear constraints and bounds.

    Quadratic coefficients must be >= 0 (convexity); binaries carry [0, 1]
    bounds implicitly.
    """

    def __init__(self, name: str = "problem"):
        self.name = name
        self.var_names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.binary: list[bool] = []
        self.c: list[float] = []
        self.q: list[float] = []
        self.obj_const: float = 0.0
        self.constraints: list[Constraint] = []
        self._index: dict[str, int] = {}

    # -- construction ------------------------------------------------------------

    def add_var(self, name: str, lb: float = -INF, ub: float = INF, binary: bool = False) -> int:
        if name in self._index:
            raise ValueError(f"duplicate variable {name!r}")
        if binary:
            lb, ub = max(lb, 0.0), min(ub, 1.0)
        if lb > ub:
            raise ValueError(f"{name}: bound inversion [{lb}, {ub}]")
        idx = len(self.var_names)
        self.var_names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.binary.append(binary)
        self.c.append(0.0)
        self.q.append(0.0)
        self._index[name] = idx
        return idx

    def index(self, name: str) -> int:
        return self._index[name]

    @property
    def n(self) -> int:
        return len(self.var_names)

    def set_objective_term(self, idx: int, linear: float = 0.0, quadratic: float = 0.0) -> None:
        if quadratic < 0:
            raise ValueError("quadratic coefficients must be >= 0")
        self.c[idx] += linear
        self.q[idx] += quadratic

    def add_constraint(self, coeffs: dict[int, float], sense: str, rhs: float, name: str = "") -> None:
        if sense not in ("<=", "=", ">="):
            raise ValueError(f"bad sense {sense!r}")
        self.constraints.append(Constraint({int(k): float(v) for k, v in coeffs.items() if v != 0.0}, sense, float(rhs), name))

    # -- views -------------------------------------------------------------------

    def has_binaries(self) -> bool:
        return any(b and self.lb[i] != self.ub[i] for i, b in enumerate(self.binary))

    def has_quadratic(self) -> bool:
        return any(v != 0.0 for v in self.q)

    def bounds_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.lb, float), np.asarray(self.ub, float)

    def split_rows(self) -> tuple[sp.csr_matrix, np.ndarray, sp.csr_matrix, np.ndarray]:
        """(A_ub, b_ub, A_eq, b_eq) with >= rows negated into <= form."""
        ub_rows, ub_rhs, eq_rows, eq_rhs = [], [], [], []
        for con in self.constraints:
            if con.sense == "=":
                eq_rows.append(con)
                eq_rhs.append(con.rhs)
            else:
                ub_rows.append(con)
                ub_rhs.append(con.rhs if con.sense == "<=" else -con.rhs)

        def build(rows: list[Constraint], negate: bool) -> sp.csr_matrix:
            data, ri, ci = [], [], []
            for r, con in enumerate(rows):
                s = -1.0 if (negate and con.sense == ">=") else 1.0
                for j, v in con.coeffs.items():
                    ri.append(r)
                    ci.append(j)
                    data.append(s * v)
            return sp.csr_matrix((data, (ri, ci)), shape=(len(rows), self.n))

        return build(ub_rows, True), np.asarray(ub_rhs, float), build(eq_rows, False), np.asarray(eq_rhs, float)

    def max_violation(self, x: np.ndarray) -> float:
        """Largest constraint/bound violation at x, independent of any solver."""
        lb, ub = self.bounds_arrays()
        viol = max(float(np.max(lb - x, initial=0.0)), float(np.max(x - ub, initial=0.0)))
        for con in self.constraints:
            lhs = sum(v * x[j] for j, v in con.coeffs.items())
            if con.sense == "<=":
                viol = max(viol, lhs - con.rhs)
            elif con.sense == ">=":
                viol = max(viol, con.rhs - lhs)
            else:
                viol = max(viol, abs(lhs - con.rhs))
        return viol

    def objective_value(self, x: np.ndarray) -> float:
        val = self.obj_const + float(np.dot(self.c, x))
        if self.has_quadratic():
            val += 0.5 * float(np.dot(self.q, x * x))
        return val

    def copy_with_bounds(self, lb: Sequence[float], ub: Sequence[float]) -> "OptProblem":
        out = OptProblem(self.name)
        out.var_names = self.var_names
        out._index = self._index
        out.lb = list(lb)
        out.ub = list(ub)
        out.binary = self.binary
        out.c = self.c
        out.q = self.q
        out.obj_const = self.obj_const
        out.constraints = self.constraints
        return out


@dataclass
class SolveResult:
    status: Status
    objective: Optional[float] = None
    x: Optional[np.ndarray] = None
    mip_gap: Optional[float] = None
    best_bound: Optional[float] = None
    nodes: int = 0
    message: str = ""
    problem: Optional[OptProblem] = None

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL

    def assignment(self) -> dict[str, float]:
        if self.x is None or self.problem is None:
            return {}
        return {n: float(v) for n, v in zip(self.problem.var_names, self.x)}

    def value(self, name: str) -> float:
        assert self.x is not None and self.problem is not None
        return float(self.x[self.problem.index(name)])
