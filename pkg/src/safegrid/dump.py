"""Scenario-dump format: line-oriented text serialization of a global model.

One declaration per line; expressions in a canonical parseable infix form.
``parse_dump(dump_model(m))`` yields a model that validates identically and
re-serializes byte-identically.
"""
from __future__ import annotations

import re
from typing import Optional

from .expr import Factor, LinearExpr, Term, VarRef
from .global_model import Block, GlobalModel, ModelError
from .symbolic import ConstraintTemplate, CostBlock, Domain, SymbolicVar, TimeRange, VarKind, DECISION_KINDS

FORMAT_VERSION = 1

_REF_RE = re.compile(r"^(?P<full>[A-Za-z0-9_.@]+)\[t(?P<off>[+-]\d+)?\](?P<inv>\^-1)?$")


def _fmt_float(x: float) -> str:
    if x == float("inf"):
        return "inf"
    if x == -float("inf"):
        return "-inf"
    return repr(float(x))


def _fmt_ref(r: VarRef, inv: bool = False) -> str:
    off = "" if r.t_offset == 0 else f"{r.t_offset:+d}"
    return f"{r.entity}.{r.name}[t{off}]" + ("^-1" if inv else "")


def emit_expr(e: LinearExpr) -> str:
    bits = []
    for t in e.terms:
        parts = [_fmt_float(t.coeff)]
        parts.extend(_fmt_ref(f.ref, f.exponent == -1) for f in t.factors)
        if t.var is not None:
            parts.append(_fmt_ref(t.var))
        bits.append("*".join(parts))
    if e.constant != 0.0 or not bits:
        bits.append(_fmt_float(e.constant))
    return " + ".join(bits)


def _parse_ref(token: str) -> tuple[VarRef, bool]:
    m = _REF_RE.match(token)
    if not m:
        raise ModelError(f"bad reference token {token!r}")
    full = m.group("full")
    if "." not in full:
        raise ModelError(f"reference {token!r} lacks an entity path")
    entity, name = full.rsplit(".", 1)
    off = int(m.group("off") or 0)
    return VarRef(entity, name, off), bool(m.group("inv"))


def parse_expr(text: str, model: GlobalModel) -> LinearExpr:
    terms: list[Term] = []
    constant = 0.0
    for raw in text.split(" + "):
        parts = raw.strip().split("*")
        coeff = float(parts[0])
        refs = [_parse_ref(tok) for tok in parts[1:]]
        if not refs:
            constant += coeff
            continue
        var: Optional[VarRef] = None
        factors: list[Factor] = []
        for ref, inv in refs:
            kind = model.var(ref.entity, ref.name).kind
            if kind in DECISION_KINDS and not inv:
                if var is not None:
                    raise ModelError(f"two decision variables in one term: {raw!r}")
                var = ref
            else:
                factors.append(Factor(ref, -1 if inv else 1))
        terms.append(Term(coeff, var, tuple(factors)))
    return LinearExpr(terms, constant)


def _emit_constraint(kind: str, owner: str, tpl: ConstraintTemplate) -> str:
    win = ""
    if tpl.window is not None:
        win = f" window {tpl.window[0]} {tpl.window[1]} {'inside' if tpl.inside else 'outside'}"
    return f"{kind} {owner} {tpl.name} {tpl.trange.value} {tpl.sense}{win} : {emit_expr(tpl.expr)}"


def dump_model(m: GlobalModel) -> str:
    lines = [f"safegrid-model {FORMAT_VERSION}", f"horizon {_fmt_float(m.horizon)}", f"tau {_fmt_float(m.tau)}"]
    for path, blk in m.blocks.items():
        lines.append(f"block {path} kind {blk.kind_name} prefix {blk.class_prefix} parent {blk.parent or '-'}")
        for name, v in blk.vars.items():
            lo, hi = v.effective_bounds()
            lines.append(
                f"var {path}.{name} kind {v.kind.value} domain {v.domain.value} "
                f"bounds {_fmt_float(lo)} {_fmt_float(hi)} indexed {int(v.indexed)}"
            )
        for name, value in blk.param_values.items():
            lines.append(f"param {path}.{name} value {_fmt_float(value)}")
        for name, (lo, hi) in blk.param_uncertainty.items():
            lines.append(f"uncertain {path}.{name} {_fmt_float(lo)} {_fmt_float(hi)}")
        for tpl in blk.templates:
            lines.append(_emit_constraint("constraint", path, tpl))
        for state, tpl in blk.dynamics.items():
            lines.append(f"dynamics {path}.{state} template {tpl.name}")
        for cb in blk.cost_blocks:
            aux = ",".join(cb.aux_vars) or "-"
            tpls = ",".join(cb.aux_templates) or "-"
            lines.append(f"cost {path} {cb.name} aux {aux} templates {tpls} : {emit_expr(cb.expr)}")
    for path, name in m.objective_terms:
        lines.append(f"objective {path} {name}")
    if m.powerflow_kind:
        lines.append(f"powerflow {m.powerflow_kind}")
    for tpl in m.powerflow_templates:
        lines.append(_emit_constraint("pfconstraint", "-", tpl))
    return "\n".join(lines) + "\n"


def parse_dump(text: str) -> GlobalModel:
    lines = [ln.rstrip("\n") for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("safegrid-model "):
        raise ModelError("not a scenario dump")
    version = int(lines[0].split()[1])
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported dump version {version}")
    horizon = float(lines[1].split()[1])
    tau = float(lines[2].split()[1])
    m = GlobalModel(horizon, tau)

    deferred: list[tuple[str, str]] = []  # (line, kind) for expression-bearing lines
    for ln in lines[3:]:
        op, rest = ln.split(" ", 1)
        if op == "block":
            toks = rest.split()
            path = toks[0]
            kind = toks[toks.index("kind") + 1]
            prefix = toks[toks.index("prefix") + 1]
            parent = toks[toks.index("parent") + 1]
            blk = Block(path, kind, prefix, None if parent == "-" else parent)
            if blk.parent and blk.parent in m.blocks:
                m.blocks[blk.parent].children.append(path)
            m.blocks[path] = blk
        elif op == "var":
            toks = rest.split()
            entity, name = toks[0].rsplit(".", 1)
            kind = VarKind(toks[toks.index("kind") + 1])
            domain = Domain(toks[toks.index("domain") + 1])
            lo = float(toks[toks.index("bounds") + 1])
            hi = float(toks[toks.index("bounds") + 2])
            indexed = bool(int(toks[toks.index("indexed") + 1]))
            bounds = None if (lo == -float("inf") and hi == float("inf")) else (lo, hi)
            m.block(entity).vars[name] = SymbolicVar(name, kind, domain, bounds, indexed)
        elif op == "param":
            toks = rest.split()
            entity, name = toks[0].rsplit(".", 1)
            m.block(entity).param_values[name] = float(toks[toks.index("value") + 1])
        elif op == "uncertain":
            toks = rest.split()
            entity, name = toks[0].rsplit(".", 1)
            m.block(entity).param_uncertainty[name] = (float(toks[1]), float(toks[2]))
        elif op in ("constraint", "pfconstraint", "cost", "dynamics", "objective", "powerflow"):
            deferred.append((op, rest))
        else:
            raise ModelError(f"unknown dump line {op!r}")

    for op, rest in deferred:
        if op in ("constraint", "pfconstraint"):
            head, expr_text = rest.split(" : ", 1)
            toks = head.split()
            owner, name, trange, sense = toks[0], toks[1], TimeRange(toks[2]), toks[3]
            window = None
            inside = True
            if "window" in toks:
                wi = toks.index("window")
                window = (int(toks[wi + 1]), int(toks[wi + 2]))
                inside = toks[wi + 3] == "inside"
            tpl = ConstraintTemplate(name, parse_expr(expr_text, m), sense, trange, window, inside)
            if op == "constraint":
                m.block(owner).templates.append(tpl)
            else:
                m.powerflow_templates.append(tpl)
        elif op == "dynamics":
            target, tpl_name = rest.split(" template ")
            entity, state = target.rsplit(".", 1)
            blk = m.block(entity)
            tpl = next((t for t in blk.templates if t.name == tpl_name), None)
            if tpl is None:
                raise ModelError(f"dynamics references unknown template {tpl_name!r}")
            blk.dynamics[state] = tpl
        elif op == "cost":
            head, expr_text = rest.split(" : ", 1)
            toks = head.split()
            path, name = toks[0], toks[1]
            aux = [] if toks[3] == "-" else toks[3].split(",")
            tpls = [] if toks[5] == "-" else toks[5].split(",")
            m.block(path).cost_blocks.append(CostBlock(name, parse_expr(expr_text, m), aux, tpls))
        elif op == "objective":
            path, name = rest.split()
            m.objective_terms.append((path, name))
        elif op == "powerflow":
            m.powerflow_kind = rest.strip()
    return m
