"""Mixed-integer piecewise machinery based on the big-M method.

Generates indicator binaries for affine-expression sign conditions, logical
combinations of binaries, and binary*continuous product variables, adding the
auxiliary constraints to the owning entity.
"""
from __future__ import annotations

from typing import Optional, Sequence

from .expr import Factor, LinearExpr, Term, VarRef
from .symbolic import ConstraintTemplate, Domain, EntityModel, SymbolicVar, TimeRange, VarKind

M_SLACK = 1.05  # derived M = 1.05 x bound-implied magnitude

LOGIC_OPS = ("and", "or", "not")
SIGN_OPS = (">=", ">")


def _ranges_for(target: EntityModel, expr: LinearExpr) -> dict[VarRef, tuple[float, float]]:
    out: dict[VarRef, tuple[float, float]] = {}
    for ref in expr.refs():
        if ref.entity != "" or ref.name not in target.vars:
            raise ValueError(f"big-M magnitude needs local declared symbols; got {ref}")
        var = target.vars[ref.name]
        if var.kind == VarKind.PARAMETER:
            if ref.name in target.param_uncertainty:
                out[ref] = target.param_uncertainty[ref.name]
            else:
                v = target.param_values[ref.name]
                out[ref] = (v, v)
        else:
            lo, hi = var.effective_bounds()
            if lo == -float("inf") or hi == float("inf"):
                raise ValueError(f"cannot derive big-M: {ref.name} is unbounded")
            out[ref] = (lo, hi)
    return out


def implied_magnitude(target: EntityModel, expr: LinearExpr) -> float:
    lo, hi = expr.interval(_ranges_for(target, expr))
    return max(abs(lo), abs(hi))


def big_m_indicator(
    target: EntityModel,
    expr=None,
    op: str = ">=",
    M: Optional[float] = None,
    name: Optional[str] = None,
    operands: Sequence[str] = (),
) -> SymbolicVar:
    """Create a binary b on ``target`` linked to ``expr``/``operands`` by op.

    op '>=' (or '>', relaxed non-strictly): b=1 <=> expr >= 0, via
    expr >= -M(1-b) and expr <= M*b. op 'and'/'or'/'not': standard
    linearizations over the named binary operands.
    """
    if op in SIGN_OPS:
        if not isinstance(expr, LinearExpr):
            raise TypeError("sign indicator needs a LinearExpr")
        mag = implied_magnitude(target, expr)
        if M is None:
            M = M_SLACK * mag if mag > 0 else 1.0
        elif M <= 0 or M < mag:
            raise ValueError(f"M={M} does not dominate expression magnitude {mag}")
        bname = name or target.fresh_name("b")
        b = target.add_var(SymbolicVar(bname, VarKind.ALGEBRAIC, Domain.BINARY))
        bref = target.ref(bname)
        # expr >= -M(1-b)  <->  expr - M*b + M >= 0
        target.add_template(
            ConstraintTemplate(f"{bname}_lo", expr + LinearExpr.var(bref, -M) + M, ">=")
        )
        # expr <= M*b
        target.add_template(ConstraintTemplate(f"{bname}_hi", expr + LinearExpr.var(bref, -M), "<="))
        return b

    if op not in LOGIC_OPS:
        raise ValueError(f"unsupported op {op!r}")
    for o in operands:
        v = target.vars.get(o)
        if v is None or v.domain != Domain.BINARY:
            raise ValueError(f"logical op {op!r} needs binary operands; {o!r} is not")
    bname = name or target.fresh_name("b")
    b = target.add_var(SymbolicVar(bname, VarKind.ALGEBRAIC, Domain.BINARY))
    bref = LinearExpr.var(target.ref(bname))

    def opref(i: int) -> LinearExpr:
        return LinearExpr.var(target.ref(operands[i]))

    if op == "not":
        if len(operands) != 1:
            raise ValueError("not takes exactly one operand")
        target.add_template(ConstraintTemplate(f"{bname}_not", bref + opref(0) - 1.0, "="))
    else:
        if len(operands) != 2:
            raise ValueError(f"{op} takes exactly two operands")
        b1, b2 = opref(0), opref(1)
        if op == "and":
            target.add_template(ConstraintTemplate(f"{bname}_le1", bref - b1, "<="))
            target.add_template(ConstraintTemplate(f"{bname}_le2", bref - b2, "<="))
            target.add_template(ConstraintTemplate(f"{bname}_ge", bref - b1 - b2 + 1.0, ">="))
        else:  # or
            target.add_template(ConstraintTemplate(f"{bname}_ge1", bref - b1, ">="))
            target.add_template(ConstraintTemplate(f"{bname}_ge2", bref - b2, ">="))
            target.add_template(ConstraintTemplate(f"{bname}_le", bref - b1 - b2, "<="))
    return b


def big_m_product(
    target: EntityModel,
    binary: str,
    cont: str,
    name: Optional[str] = None,
    bounds: Optional[tuple[float, float]] = None,
) -> SymbolicVar:
    """Create z = binary * cont via the exact McCormick linearization.

    ``bounds`` may tighten z's declared box when the caller knows the binary
    is sign-linked to ``cont`` (e.g. an indicator), which keeps downstream
    interval analysis sharp.
    """
    bv = target.vars.get(binary)
    cv = target.vars.get(cont)
    if bv is None or bv.domain != Domain.BINARY:
        raise ValueError(f"{binary!r} is not a declared binary")
    if cv is None:
        raise ValueError(f"{cont!r} is not declared")
    lo, hi = cv.effective_bounds()
    if lo == -float("inf") or hi == float("inf"):
        raise ValueError(f"product linearization needs finite bounds on {cont!r}")
    zname = name or target.fresh_name(f"{binary}_{cont}_")
    zbounds = bounds if bounds is not None else (min(lo, 0.0), max(hi, 0.0))
    z = target.add_var(SymbolicVar(zname, VarKind.ALGEBRAIC, Domain.REAL, zbounds))
    zr = LinearExpr.var(target.ref(zname))
    br = LinearExpr.var(target.ref(binary))
    cr = LinearExpr.var(target.ref(cont))
    target.add_template(ConstraintTemplate(f"{zname}_ub_b", zr - br.scaled(hi), "<="))
    target.add_template(ConstraintTemplate(f"{zname}_lb_b", zr - br.scaled(lo), ">="))
    target.add_template(ConstraintTemplate(f"{zname}_ub_c", zr - cr + br.scaled(-lo) + lo, "<="))
    target.add_template(ConstraintTemplate(f"{zname}_lb_c", zr - cr + br.scaled(-hi) + hi, ">="))
    return z
