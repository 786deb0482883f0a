"""Closed-loop simulation engine over the true system.

Executes the input-switched branch dynamics with sampled true parameters,
evaluates algebraic variables via entity rules, and solves the power flow
algebraics numerically each step. Keeps the full value trajectory.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .expr import VarRef
from .global_model import GlobalModel, ModelError
from .powerflow import solve_powerflow_numeric
from .symbolic import VarKind

BOUND_TOL = 1e-7


@dataclass
class Violation:
    step: int
    path: str
    name: str
    value: float
    lower: float
    upper: float

    def describe(self) -> str:
        return f"step {self.step}: {self.path}.{self.name}={self.value:.6g} outside [{self.lower:g}, {self.upper:g}]"


class _Resolver(Mapping):
    """VarRef -> value view over the trajectory store at a fixed time."""

    def __init__(self, sim: "Simulator", t: int):
        self.sim = sim
        self.t = t

    def __getitem__(self, ref: VarRef) -> float:
        return self.sim.lookup(ref.entity, ref.name, self.t + ref.t_offset)

    def __contains__(self, ref) -> bool:
        try:
            self[ref]
            return True
        except KeyError:
            return False

    def __iter__(self):
        return iter(())

    def __len__(self) -> int:
        return 0


class Simulator:
    def __init__(self, model: GlobalModel, true_params: Optional[Mapping[tuple[str, str], float]] = None):
        self.model = model
        self.true_params = dict(true_params or {})
        self.values: dict[tuple[str, str, int], float] = {}
        self.t = 0

    # -- value store -------------------------------------------------------------

    def lookup(self, path: str, name: str, t: int) -> float:
        blk = self.model.block(path)
        var = blk.vars.get(name)
        if var is None:
            raise KeyError(f"unknown symbol {path}.{name}")
        if var.kind == VarKind.PARAMETER:
            if (path, name) in self.true_params:
                return self.true_params[(path, name)]
            return blk.param_values[name]
        if not var.indexed:
            t = 0
        key = (path, name, t)
        if key not in self.values:
            raise KeyError(f"{path}.{name} has no value at t={t}")
        return self.values[key]

    def set_value(self, path: str, name: str, t: int, value: float) -> None:
        self.values[(path, name, t)] = float(value)

    def states(self, t: Optional[int] = None) -> dict[tuple[str, str], float]:
        t = self.t if t is None else t
        out = {}
        for path, blk in self.model.blocks.items():
            for name, var in blk.vars.items():
                if var.kind == VarKind.STATE and not name.endswith(("__lo", "__hi")):
                    out[(path, name)] = self.lookup(path, name, t)
        return out

    # -- lifecycle ---------------------------------------------------------------

    def reset(self, initial_states: Mapping[tuple[str, str], float]) -> None:
        self.values.clear()
        self.t = 0
        for (path, name), v in initial_states.items():
            self.set_value(path, name, 0, v)

    def record_disturbances(self, t: int, w: Mapping[tuple[str, str], float]) -> None:
        for (path, name), v in w.items():
            self.set_value(path, name, t, v)

    def record_inputs(self, t: int, u: Mapping[tuple[str, str], float]) -> None:
        for (path, name), v in u.items():
            self.set_value(path, name, t, v)

    def _branch_for(self, path: str, t: int):
        blk = self.model.block(path)
        if not blk.branches:
            return None
        inputs = {n: self.lookup(path, n, t) for n, v in blk.vars.items() if v.kind == VarKind.INPUT}
        return blk.select_branch(inputs)

    def execute_dynamics(self, t: int, scope: Optional[set[str]] = None) -> None:
        """x_{t+1} = f_true(x_t, u_t, w_t) via branch expressions."""
        res = _Resolver(self, t)
        for path, blk in self.model.blocks.items():
            if scope is not None and path not in scope:
                continue
            if not blk.branches:
                continue
            branch = self._branch_for(path, t)
            for state, expr in branch.dynamics.items():
                self.set_value(path, state, t + 1, expr.evaluate(res))

    def solve_algebraic(self, t: int, scope: Optional[set[str]] = None) -> None:
        """Evaluate algebraic rules; children before parents (aggregation)."""
        res = _Resolver(self, t)
        for path in reversed(list(self.model.blocks)):
            if scope is not None and path not in scope:
                continue
            blk = self.model.block(path)
            if not blk.algebraic_rules:
                continue
            branch = self._branch_for(path, t)
            for rule in blk.algebraic_rules:
                expr = rule.expr_for(branch)
                self.set_value(path, rule.name, t, rule.finish(expr.evaluate(res)))

    def solve_powerflow(self, t: int) -> None:
        pf = self.model.powerflow
        if pf is None:
            return
        bus_p = {
            path: self.lookup(path, "p", t)
            for path, blk in self.model.blocks.items()
            if blk.class_prefix == "n" and path != pf.slack
        }
        for (path, name), value in solve_powerflow_numeric(pf, self.model, bus_p).items():
            self.set_value(path, name, t, value)

    def check_violations(self, t: int) -> list[Violation]:
        """Realized state/input box violations at time t."""
        out: list[Violation] = []
        for path, blk in self.model.blocks.items():
            for name, var in blk.vars.items():
                if var.kind not in (VarKind.STATE, VarKind.INPUT):
                    continue
                if name.endswith(("__lo", "__hi")):
                    continue
                lo, hi = var.effective_bounds()
                if lo == -float("inf") and hi == float("inf"):
                    continue
                try:
                    v = self.lookup(path, name, t)
                except KeyError:
                    continue
                if v < lo - BOUND_TOL or v > hi + BOUND_TOL:
                    out.append(Violation(t, path, name, v, lo, hi))
        return out

    def snapshot(self, t: int) -> dict[str, float]:
        """All known values at time t keyed 'path.name' (deterministic order)."""
        out: dict[str, float] = {}
        for path, blk in self.model.blocks.items():
            for name, var in blk.vars.items():
                if var.kind == VarKind.PARAMETER:
                    continue
                try:
                    out[f"{path}.{name}"] = self.lookup(path, name, t)
                except KeyError:
                    continue
        return out

    def stage_cost(self, t: int, paths: list[str]) -> float:
        """Realized stage cost of the given blocks at t, honoring reward shapes."""
        total = 0.0
        res = _Resolver(self, t)
        for path in paths:
            blk = self.model.block(path)
            for cb in blk.cost_blocks:
                shape = blk.reward_shapes.get(cb.name)
                if shape is not None:
                    total += float(shape(_ShapeView(self), t, path))
                else:
                    total += cb.expr.evaluate(res)
        return total


class _ShapeView:
    """(path, name, t) -> value view handed to reward-shape callables."""

    def __init__(self, sim: Simulator):
        self.sim = sim

    def __getitem__(self, key: tuple[str, str, int]) -> float:
        path, name, t = key
        return self.sim.lookup(path, name, t)
