"""Optional subprocess bridge to an external LP/MIP solver.

Writes the problem in LP format, runs a user-supplied command, and parses the
solution with a user-supplied callable. Cross-validation convenience only;
nothing in the package or its tests requires an external solver.
"""
from __future__ import annotations

import subprocess
import tempfile
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .lpformat import export_lp
from .problem import OptProblem, SolveResult, Status


def solve_with_command(
    p: OptProblem,
    command: Sequence[str],
    parse_solution: Callable[[str, OptProblem], dict[str, float]],
    timeout: float = 60.0,
) -> SolveResult:
    """Run ``command`` (with ``{lp}``/``{out}`` placeholders) on the exported
    problem and map the parsed name->value assignment into a SolveResult."""
    with tempfile.TemporaryDirectory(prefix="safegrid_lp_") as td:
        lp_path = Path(td) / "problem.lp"
        out_path = Path(td) / "solution.out"
        lp_path.write_text(export_lp(p))
        cmd = [c.format(lp=str(lp_path), out=str(out_path)) for c in command]
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
        if proc.returncode != 0:
            return SolveResult(Status.ITERATION_LIMIT, message=proc.stderr.strip() or "external solver failed", problem=p)
        payload = out_path.read_text() if out_path.exists() else proc.stdout
        assignment = parse_solution(payload, p)
    x = np.zeros(p.n)
    for name, value in assignment.items():
        x[p.index(name)] = value
    if p.max_violation(x) > 1e-6:
        return SolveResult(Status.ITERATION_LIMIT, message="external solution infeasible", problem=p)
    return SolveResult(Status.OPTIMAL, p.objective_value(x), x, problem=p)
