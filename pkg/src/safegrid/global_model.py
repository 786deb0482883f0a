"""Global model assembly: flatten an entity tree into namespaced blocks.

Depth-first traversal assigns ids (parent path + class prefix + per-prefix
index), absolutizes all local references, and appends power flow constraints
last. The result is immutable after build except for parameter value slots.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .expr import LinearExpr, VarRef
from .symbolic import (
    AlgebraicRule,
    Branch,
    ConstraintTemplate,
    CostBlock,
    EntityModel,
    SymbolicVar,
    TimeRange,
    VarKind,
)


class ModelError(ValueError):
    pass


@dataclass
class Block:
    path: str
    kind_name: str
    class_prefix: str
    parent: Optional[str]
    children: list[str] = field(default_factory=list)
    vars: "OrderedDict[str, SymbolicVar]" = field(default_factory=OrderedDict)
    templates: list[ConstraintTemplate] = field(default_factory=list)
    dynamics: "OrderedDict[str, ConstraintTemplate]" = field(default_factory=OrderedDict)
    branches: list[Branch] = field(default_factory=list)
    algebraic_rules: list[AlgebraicRule] = field(default_factory=list)
    cost_blocks: list[CostBlock] = field(default_factory=list)
    param_values: dict[str, float] = field(default_factory=dict)
    param_uncertainty: dict[str, tuple[float, float]] = field(default_factory=dict)
    data_bindings: dict[str, object] = field(default_factory=dict)
    disturbance_defaults: dict[str, float] = field(default_factory=dict)
    initializers: dict[str, object] = field(default_factory=dict)
    reward_shapes: dict[str, object] = field(default_factory=dict)
    window: object = None

    def select_branch(self, input_values: dict[str, float]):
        if not self.branches:
            return None
        for b in self.branches:
            if b.matches(input_values):
                return b
        raise ModelError(f"{self.path}: no branch matches inputs {input_values}")


@dataclass
class RobustInfo:
    """Bookkeeping added by robustification (see uncertainty.robustify_ocp)."""

    mode: object
    bound_vars: dict[tuple[str, str], tuple[str, str]] = field(default_factory=dict)
    vertex_params: dict[tuple[str, str], tuple[str, str]] = field(default_factory=dict)
    vertex_disturbances: dict[tuple[str, str], tuple[str, str]] = field(default_factory=dict)
    scenarios: list = field(default_factory=list)
    dependent_cost_blocks: set = field(default_factory=set)
    epigraph: Optional[tuple[str, str]] = None  # (block path, var name)
    capped: bool = False


class GlobalModel:
    def __init__(self, horizon: float, tau: float):
        if tau <= 0 or horizon <= 0:
            raise ModelError("horizon and tau must be positive")
        steps = horizon / tau
        if abs(steps - round(steps)) > 1e-9:
            raise ModelError(f"horizon {horizon} not an integral multiple of tau {tau}")
        self.horizon = float(horizon)
        self.tau = float(tau)
        self.T = int(round(steps))
        self.blocks: "OrderedDict[str, Block]" = OrderedDict()
        self.powerflow_templates: list[ConstraintTemplate] = []
        self.powerflow_kind: Optional[str] = None
        self.powerflow = None
        self.objective_terms: list[tuple[str, str]] = []  # (block path, cost block name)
        self.robust: Optional[RobustInfo] = None
        self._line_counter = 0

    # -- structure --------------------------------------------------------------

    @property
    def time_set(self) -> range:
        return range(self.T + 1)

    def block(self, path: str) -> Block:
        try:
            return self.blocks[path]
        except KeyError:
            raise ModelError(f"no block {path!r}") from None

    def var(self, path: str, name: str) -> SymbolicVar:
        blk = self.block(path)
        try:
            return blk.vars[name]
        except KeyError:
            raise ModelError(f"no variable {name!r} on block {path!r}") from None

    def has_var(self, ref: VarRef) -> bool:
        blk = self.blocks.get(ref.entity)
        return blk is not None and ref.name in blk.vars

    def fresh_line_id(self) -> str:
        lid = f"l{self._line_counter}"
        self._line_counter += 1
        return lid

    def set_param(self, path: str, name: str, value: float) -> None:
        blk = self.block(path)
        if name not in blk.param_values:
            raise ModelError(f"no parameter {name!r} on {path!r}")
        blk.param_values[name] = float(value)

    def param_value(self, path: str, name: str) -> float:
        return self.block(path).param_values[name]

    def all_templates(self) -> Iterable[tuple[str, ConstraintTemplate]]:
        for path, blk in self.blocks.items():
            for tpl in blk.templates:
                yield path, tpl
        for tpl in self.powerflow_templates:
            yield "<powerflow>", tpl

    def cost_block_exprs(self) -> list[tuple[str, CostBlock]]:
        return [(p, cb) for p, n in self.objective_terms for cb in [self._cost_block(p, n)]]

    def _cost_block(self, path: str, name: str) -> CostBlock:
        for cb in self.block(path).cost_blocks:
            if cb.name == name:
                return cb
        raise ModelError(f"no cost block {name!r} on {path!r}")


def _resolve_local(ref: VarRef, entity: EntityModel, path: str, ancestry: list[tuple[str, EntityModel]], child_paths: list[str]) -> VarRef:
    """Map a local/child reference to an absolute one."""
    if ref.entity.startswith("@"):
        idx = int(ref.entity[1:])
        if idx >= len(child_paths):
            raise ModelError(f"{path}: child reference {ref.entity} out of range")
        return VarRef(child_paths[idx], ref.name, ref.t_offset)
    if ref.entity != "":
        return ref  # already absolute
    if ref.name in entity.vars:
        return VarRef(path, ref.name, ref.t_offset)
    for apath, aent in reversed(ancestry):
        if ref.name in aent.vars:
            return VarRef(apath, ref.name, ref.t_offset)
    raise ModelError(f"{path}: symbol {ref.name!r} not declared here or on an ancestor")


def build_global_model(
    system: EntityModel,
    horizon: float,
    tau: float,
    powerflow=None,
) -> GlobalModel:
    """Flatten the entity tree into a GlobalModel by depth-first traversal.

    Sibling order is insertion order; ids are parent path + class prefix +
    per-prefix running index. ``powerflow`` (a PowerFlowModel) is applied
    last when given.
    """
    model = GlobalModel(horizon, tau)
    seen: set[int] = set()

    def attach(entity: EntityModel, path: str, parent: Optional[str], ancestry: list[tuple[str, EntityModel]]) -> None:
        if id(entity) in seen:
            raise ModelError(f"entity object reused in tree at {path!r}")
        seen.add(id(entity))
        if path in model.blocks:
            raise ModelError(f"duplicate entity id {path!r}")

        counters: dict[str, int] = {}
        child_paths: list[str] = []
        for child in entity.children:
            i = counters.get(child.class_prefix, 0)
            counters[child.class_prefix] = i + 1
            child_paths.append(f"{path}.{child.class_prefix}{i}")

        def absolutize(expr: LinearExpr) -> LinearExpr:
            return expr.map_refs(lambda r: _resolve_local(r, entity, path, ancestry, child_paths))

        blk = Block(path, entity.kind_name, entity.class_prefix, parent)
        blk.children = list(child_paths)
        for name, var in entity.vars.items():
            blk.vars[name] = SymbolicVar(name, var.kind, var.domain, var.bounds, var.indexed, var.doc)
        for tpl in entity.templates:
            blk.templates.append(
                ConstraintTemplate(tpl.name, absolutize(tpl.expr), tpl.sense, tpl.trange, tpl.window, tpl.inside)
            )
        for state, tpl in entity.dynamics.items():
            # reuse the freshly absolutized template object for identity
            match = next(t for t in blk.templates if t.name == tpl.name)
            blk.dynamics[state] = match
        for br in entity.branches:
            blk.branches.append(
                Branch(br.name, br.guard, {s: absolutize(e) for s, e in br.dynamics.items()})
            )
        for rule in entity.algebraic_rules:
            blk.algebraic_rules.append(
                AlgebraicRule(
                    rule.name,
                    {k: absolutize(e) for k, e in rule.per_branch.items()},
                    rule.input_determined,
                    rule.absolute,
                    rule.clip,
                )
            )
        for cb in entity.cost_blocks:
            blk.cost_blocks.append(CostBlock(cb.name, absolutize(cb.expr), list(cb.aux_vars), list(cb.aux_templates)))
        blk.param_values = dict(entity.param_values)
        blk.param_uncertainty = dict(entity.param_uncertainty)
        blk.data_bindings = dict(entity.data_bindings)
        blk.disturbance_defaults = dict(entity.disturbance_defaults)
        blk.initializers = dict(entity.initializers)
        blk.reward_shapes = dict(entity.reward_shapes)
        blk.window = entity.window
        model.blocks[path] = blk
        for cb in blk.cost_blocks:
            model.objective_terms.append((path, cb.name))

        for child, cpath in zip(entity.children, child_paths):
            attach(child, cpath, path, ancestry + [(path, entity)])

    attach(system, "sys", None, [])

    if powerflow is not None:
        from .powerflow import apply_powerflow

        apply_powerflow(powerflow, model)
    return model


def validate_model(model: GlobalModel) -> list[str]:
    """Well-formedness report; empty iff the model is valid."""
    issues: list[str] = []
    for path, blk in model.blocks.items():
        for name, var in blk.vars.items():
            lo, hi = var.effective_bounds()
            if lo > hi:
                issues.append(f"{path}.{name}: bound inversion [{lo}, {hi}]")
            if var.kind == VarKind.STATE and name not in blk.dynamics:
                issues.append(f"{path}: state {name!r} lacks dynamics")
        for name in blk.param_values:
            if name not in blk.vars:
                issues.append(f"{path}: parameter value for undeclared {name!r}")

    def check_expr(owner: str, cname: str, tpl: ConstraintTemplate) -> None:
        for ref in tpl.expr.refs():
            if not model.has_var(ref):
                issues.append(f"{owner}.{cname}: unresolved reference {ref}")
                continue
            if tpl.trange == TimeRange.ALL_T and ref.t_offset != 0:
                target = model.var(ref.entity, ref.name)
                if target.indexed:
                    issues.append(f"{owner}.{cname}: offset {ref.t_offset} in an all-t constraint")
            if tpl.trange == TimeRange.DYN and ref.t_offset not in (0, 1):
                issues.append(f"{owner}.{cname}: offset {ref.t_offset} outside [0, 1] in dynamics range")
            if tpl.trange == TimeRange.COUPLED and not (0 <= ref.t_offset):
                issues.append(f"{owner}.{cname}: negative absolute time {ref.t_offset}")

    for owner, tpl in model.all_templates():
        check_expr(owner, tpl.name, tpl)
    return issues
