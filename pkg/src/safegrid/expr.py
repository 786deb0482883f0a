"""Affine expressions over namespaced, time-indexed variable references.

Expressions are affine in decision variables. Parameters and disturbances may
additionally enter multiplicatively (as ``Factor``s with exponent +-1); they
are substituted with numbers before an expression reaches a solver, so the
substituted expression is always affine in the remaining decision variables.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Union


@dataclass(frozen=True, order=True)
class VarRef:
    """Reference to a variable of one entity at a relative (or absolute) time.

    ``t_offset`` is relative to the constraint's running time index; for
    trajectory-coupled constraints it is interpreted as an absolute time.
    Non-indexed symbols (plain parameters, scalar helpers) ignore it.
    """

    entity: str
    name: str
    t_offset: int = 0

    def at(self, t_offset: int) -> "VarRef":
        return VarRef(self.entity, self.name, t_offset)

    def key(self) -> tuple:
        return (self.entity, self.name)

    def __str__(self) -> str:
        if self.t_offset == 0:
            return f"{self.entity}.{self.name}[t]"
        sign = "+" if self.t_offset > 0 else "-"
        return f"{self.entity}.{self.name}[t{sign}{abs(self.t_offset)}]"


@dataclass(frozen=True, order=True)
class Factor:
    """Multiplicative occurrence of a parameter or disturbance.

    ``exponent`` is +1 or -1 (e.g. 1/eta_d in storage discharge dynamics).
    """

    ref: VarRef
    exponent: int = 1

    def value(self, x: float) -> float:
        if self.exponent == 1:
            return x
        if x == 0.0:
            raise ZeroDivisionError(f"factor {self.ref} has exponent -1 but value 0")
        return 1.0 / x


@dataclass(frozen=True)
class Term:
    """coeff * prod(factors) * var; ``var=None`` makes a parametric constant."""

    coeff: float
    var: Optional[VarRef] = None
    factors: tuple[Factor, ...] = ()

    def scaled(self, s: float) -> "Term":
        return Term(self.coeff * s, self.var, self.factors)


class LinearExpr:
    """Sum of terms plus a numeric constant."""

    __slots__ = ("terms", "constant")

    def __init__(self, terms: Iterable[Term] = (), constant: float = 0.0):
        self.terms: tuple[Term, ...] = tuple(terms)
        self.constant: float = float(constant)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def of(*items: Union[Term, float, "LinearExpr"]) -> "LinearExpr":
        terms: list[Term] = []
        const = 0.0
        for it in items:
            if isinstance(it, Term):
                terms.append(it)
            elif isinstance(it, LinearExpr):
                terms.extend(it.terms)
                const += it.constant
            else:
                const += float(it)
        return LinearExpr(terms, const)

    @staticmethod
    def var(ref: VarRef, coeff: float = 1.0) -> "LinearExpr":
        return LinearExpr((Term(coeff, ref),))

    def __add__(self, other: Union["LinearExpr", float]) -> "LinearExpr":
        if isinstance(other, LinearExpr):
            return LinearExpr(self.terms + other.terms, self.constant + other.constant)
        return LinearExpr(self.terms, self.constant + float(other))

    def __sub__(self, other: Union["LinearExpr", float]) -> "LinearExpr":
        if isinstance(other, LinearExpr):
            return self + other.scaled(-1.0)
        return LinearExpr(self.terms, self.constant - float(other))

    def scaled(self, s: float) -> "LinearExpr":
        return LinearExpr(tuple(t.scaled(s) for t in self.terms), self.constant * s)

    # -- introspection ---------------------------------------------------------

    def refs(self) -> set[VarRef]:
        """All referenced symbols, decision variables and factors alike."""
        out: set[VarRef] = set()
        for t in self.terms:
            if t.var is not None:
                out.add(t.var)
            for f in t.factors:
                out.add(f.ref)
        return out

    def var_refs(self) -> set[VarRef]:
        return {t.var for t in self.terms if t.var is not None}

    def factor_refs(self) -> set[VarRef]:
        return {f.ref for t in self.terms for f in t.factors}

    def shifted(self, dt: int) -> "LinearExpr":
        """Shift every reference's time offset by ``dt``."""
        return self.map_refs(lambda r: r.at(r.t_offset + dt))

    def map_refs(self, fn: Callable[[VarRef], VarRef]) -> "LinearExpr":
        terms = tuple(
            Term(
                t.coeff,
                fn(t.var) if t.var is not None else None,
                tuple(Factor(fn(f.ref), f.exponent) for f in t.factors),
            )
            for t in self.terms
        )
        return LinearExpr(terms, self.constant)

    # -- substitution / evaluation ---------------------------------------------

    def substitute(self, values: Mapping[VarRef, float]) -> "LinearExpr":
        """Replace matched factor refs (and factor-only vars) with numbers.

        Decision-variable slots are substituted too when present in ``values``;
        terms whose every symbol is resolved collapse into the constant.
        """
        terms: list[Term] = []
        const = self.constant
        for t in self.terms:
            coeff = t.coeff
            factors: list[Factor] = []
            for f in t.factors:
                if f.ref in values:
                    coeff *= f.value(values[f.ref])
                else:
                    factors.append(f)
            var = t.var
            if var is not None and var in values:
                coeff *= values[var]
                var = None
            if var is None and not factors:
                const += coeff
            else:
                terms.append(Term(coeff, var, tuple(factors)))
        return LinearExpr(tuple(terms), const)

    def evaluate(self, values: Mapping[VarRef, float]) -> float:
        out = self.substitute(values)
        if out.terms:
            missing = sorted(str(r) for r in out.refs())
            raise KeyError(f"unresolved refs in evaluation: {missing}")
        return out.constant

    def interval(self, boxes: Mapping[VarRef, tuple[float, float]]) -> tuple[float, float]:
        """Interval range of the expression given per-ref value ranges."""
        lo = hi = self.constant
        for t in self.terms:
            tlo, thi = t.coeff, t.coeff
            parts = list(t.factors) + ([Factor(t.var)] if t.var is not None else [])
            for f in parts:
                if f.ref not in boxes:
                    raise KeyError(f"no range for {f.ref}")
                a, b = boxes[f.ref]
                if f.exponent == -1:
                    if a <= 0.0 <= b:
                        raise ValueError(f"inverse factor {f.ref} range crosses zero")
                    a, b = 1.0 / b, 1.0 / a
                cands = (tlo * a, tlo * b, thi * a, thi * b)
                tlo, thi = min(cands), max(cands)
            lo += tlo
            hi += thi
        return lo, hi

    # -- formatting -------------------------------------------------------------

    def __repr__(self) -> str:
        return f"LinearExpr({self.format()})"

    def format(self) -> str:
        bits: list[str] = []
        for t in self.terms:
            parts = []
            for f in t.factors:
                parts.append(str(f.ref) if f.exponent == 1 else f"{f.ref}^-1")
            if t.var is not None:
                parts.append(str(t.var))
            body = "*".join(parts)
            coeff = t.coeff
            if not bits:
                lead = "-" if coeff < 0 else ""
            else:
                lead = " - " if coeff < 0 else " + "
            mag = abs(coeff)
            if math.isclose(mag, 1.0) and body:
                bits.append(f"{lead}{body}")
            else:
                bits.append(f"{lead}{mag!r}*{body}" if body else f"{lead}{mag!r}")
        if self.constant != 0.0 or not bits:
            lead = "" if not bits else (" - " if self.constant < 0 else " + ")
            mag = abs(self.constant) if bits else self.constant
            bits.append(f"{lead}{mag!r}")
        return "".join(bits)
