import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from safegrid.optim import OptProblem


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_boxed_lp(rng, n_max=20, m_max=12, feasible=True) -> OptProblem:
    """Random LP with finite boxes; feasible by construction when asked."""
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(0, m_max + 1))
    p = OptProblem("random-lp")
    lb = rng.uniform(-3, 0, n)
    ub = lb + rng.uniform(0.2, 4.0, n)
    for j in range(n):
        p.add_var(f"x{j}", lb[j], ub[j])
        p.set_objective_term(j, linear=float(rng.normal()))
    x_feas = rng.uniform(lb, ub)
    for i in range(m):
        row = rng.normal(size=n)
        row[rng.uniform(size=n) < 0.4] = 0.0
        if not row.any():
            continue
        sense = str(rng.choice(["<=", ">=", "="]))
        v = float(row @ x_feas)
        margin = float(rng.uniform(0, 1.0))
        rhs = v + margin if sense == "<=" else v - margin if sense == ">=" else v
        if not feasible:
            rhs += float(rng.normal() * 3)
        p.add_constraint({j: row[j] for j in range(n) if row[j] != 0.0}, sense, rhs)
    return p


def random_mip(rng, max_binaries=12, n_cont_max=6) -> OptProblem:
    """Random mixed problem with a feasible continuous core and binaries that
    gate rows via big-M style couplings."""
    nb = int(rng.integers(1, max_binaries + 1))
    nc = int(rng.integers(1, n_cont_max + 1))
    p = OptProblem("random-mip")
    lb = rng.uniform(-2, 0, nc)
    ub = lb + rng.uniform(0.5, 3.0, nc)
    for j in range(nc):
        p.add_var(f"x{j}", lb[j], ub[j])
        p.set_objective_term(j, linear=float(rng.normal()))
    for k in range(nb):
        j = p.add_var(f"b{k}", binary=True)
        p.set_objective_term(j, linear=float(rng.normal()))
    x_feas = rng.uniform(lb, ub)
    m = int(rng.integers(1, 6))
    for i in range(m):
        row = rng.normal(size=nc)
        bcoef = {nc + int(k): float(rng.normal()) for k in rng.choice(nb, size=min(nb, 2), replace=False)}
        sense = str(rng.choice(["<=", ">="]))
        v = float(row @ x_feas)  # feasible with all binaries at 0
        margin = float(rng.uniform(0.1, 1.5))
        rhs = v + margin if sense == "<=" else v - margin
        coeffs = {j: row[j] for j in range(nc) if row[j] != 0.0}
        coeffs.update(bcoef)
        p.add_constraint(coeffs, sense, rhs)
    return p
