"""Embedded LP/QP/MIP solving."""
from .lp import solve_lp
from .lpformat import export_lp
from .mip import solve_mip
from .problem import OptProblem, SolveResult, Status
from .qp import solve_qp

__all__ = ["OptProblem", "SolveResult", "Status", "solve_lp", "solve_qp", "solve_mip", "export_lp"]
