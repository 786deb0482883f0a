"""Export problems in the standard CPLEX LP text format for external solvers."""
from __future__ import annotations

import re

from .problem import INF, OptProblem

_SANITIZE = re.compile(r"[^A-Za-z0-9_!#$%&()/,;?@'`{}|~.]")


def _lp_name(name: str, idx: int) -> str:
    clean = _SANITIZE.sub("_", name.replace("[", "(").replace("]", ")"))
    if not clean or clean[0].isdigit() or clean[0] in ".0123456789eE":
        clean = f"v{idx}_{clean}"
    return clean


def export_lp(p: OptProblem) -> str:
    """Serialize to CPLEX LP format (minimization)."""
    names = [_lp_name(n, i) for i, n in enumerate(p.var_names)]
    if len(set(names)) != len(names):
        names = [f"v{i}" for i in range(p.n)]
    lines = [f"\\ {p.name}", "Minimize"]
    obj_bits = []
    for i, coef in enumerate(p.c):
        if coef:
            obj_bits.append(f"{'+' if coef >= 0 else '-'} {abs(coef):.17g} {names[i]}")
    quad_bits = [f"{'+' if q >= 0 else '-'} {abs(q):.17g} {names[i]} ^ 2" for i, q in enumerate(p.q) if q]
    obj = " ".join(obj_bits) if obj_bits else "0 " + (names[0] if p.n else "x0")
    if quad_bits:
        obj += " + [ " + " ".join(quad_bits) + " ] / 2"
    lines.append(f" obj: {obj}")
    lines.append("Subject To")
    for k, con in enumerate(p.constraints):
        bits = []
        for j in sorted(con.coeffs):
            v = con.coeffs[j]
            bits.append(f"{'+' if v >= 0 else '-'} {abs(v):.17g} {names[j]}")
        sense = {"<=": "<=", ">=": ">=", "=": "="}[con.sense]
        cname = _lp_name(con.name, k) if con.name else f"c{k}"
        lines.append(f" {cname}: {' '.join(bits) if bits else '0 ' + names[0]} {sense} {con.rhs:.17g}")
    lines.append("Bounds")
    for i in range(p.n):
        lo, hi = p.lb[i], p.ub[i]
        if lo == -INF and hi == INF:
            lines.append(f" {names[i]} free")
        elif lo == -INF:
            lines.append(f" -inf <= {names[i]} <= {hi:.17g}")
        elif hi == INF:
            lines.append(f" {names[i]} >= {lo:.17g}")
        else:
            lines.append(f" {lo:.17g} <= {names[i]} <= {hi:.17g}")
    bins = [names[i] for i, b in enumerate(p.binary) if b]
    if bins:
        lines.append("Binaries")
        lines.append(" " + " ".join(bins))
    lines.append("End")
    return "\n".join(lines) + "\n"
