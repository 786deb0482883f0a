"""Symbolic entity models: variables, constraint templates, branch dynamics.

An entity (system, bus, device) declares its variables and constraints
locally; references use local names until the global build assigns ids and
absolutizes them. Dynamics additionally carry an input-switched branch map
used by the simulator and by interval bound propagation.
"""
from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence, Union

from .expr import Factor, LinearExpr, Term, VarRef

SELF = ""  # entity field of a local reference, resolved at build time


class VarKind(enum.Enum):
    STATE = "state"
    INPUT = "input"
    DISTURBANCE = "disturbance"
    PARAMETER = "parameter"
    ALGEBRAIC = "algebraic"


class Domain(enum.Enum):
    REAL = "real"
    NONNEG = "nonneg-real"
    BINARY = "binary"


DECISION_KINDS = (VarKind.STATE, VarKind.INPUT, VarKind.ALGEBRAIC)


@dataclass(frozen=True)
class EntityId:
    """Dot-separated path of class-prefixed segments, e.g. ``sys.n0.d1``."""

    segments: tuple[str, ...]

    @staticmethod
    def parse(path: str) -> "EntityId":
        if not path:
            raise ValueError("empty entity path")
        return EntityId(tuple(path.split(".")))

    @property
    def path(self) -> str:
        return ".".join(self.segments)

    @property
    def parent(self) -> Optional["EntityId"]:
        if len(self.segments) <= 1:
            return None
        return EntityId(self.segments[:-1])

    def child(self, segment: str) -> "EntityId":
        return EntityId(self.segments + (segment,))

    def is_ancestor_of(self, other: "EntityId") -> bool:
        return len(other.segments) > len(self.segments) and other.segments[: len(self.segments)] == self.segments

    def __str__(self) -> str:
        return self.path


@dataclass
class SymbolicVar:
    name: str
    kind: VarKind
    domain: Domain = Domain.REAL
    bounds: Optional[tuple[float, float]] = None
    indexed: bool = True
    doc: str = ""

    def __post_init__(self) -> None:
        if self.domain == Domain.BINARY:
            self.bounds = (0.0, 1.0)
        if self.kind == VarKind.PARAMETER:
            self.indexed = False
        if self.bounds is not None and self.bounds[0] > self.bounds[1]:
            raise ValueError(f"{self.name}: lower bound {self.bounds[0]} > upper bound {self.bounds[1]}")

    def effective_bounds(self) -> tuple[float, float]:
        lo, hi = self.bounds if self.bounds is not None else (-float("inf"), float("inf"))
        if self.domain == Domain.NONNEG:
            lo = max(lo, 0.0)
        return lo, hi


class TimeRange(enum.Enum):
    ALL_T = "all"          # t in {0..T}
    DYN = "dyn"            # t in {0..T-1}; expressions may reference t+1
    INITIAL = "t0"         # t = 0
    COUPLED = "coupled"    # instantiated once; offsets are absolute episode times


@dataclass
class ConstraintTemplate:
    """``expr SENSE 0`` over a time range.

    ``window`` optionally restricts instantiation to episode times in
    [start, end) (``inside=True``) or its complement (``inside=False``).
    """

    name: str
    expr: LinearExpr
    sense: str  # one of '<=', '=', '>='
    trange: TimeRange = TimeRange.ALL_T
    window: Optional[tuple[int, int]] = None
    inside: bool = True

    def __post_init__(self) -> None:
        if self.sense not in ("<=", "=", ">="):
            raise ValueError(f"bad sense {self.sense!r}")

    def active_at(self, episode_t: int) -> bool:
        if self.window is None:
            return True
        a, b = self.window
        inside = a <= episode_t < b
        return inside if self.inside else not inside


@dataclass
class Branch:
    """One piece of input-switched dynamics.

    ``guard`` is (input name, sense) with threshold 0; ``None`` for single
    branch. ``dynamics`` maps state name -> next-value expression in local
    references at time t.
    """

    name: str
    guard: Optional[tuple[str, str]]  # (input, '>=') or (input, '<')
    dynamics: dict[str, LinearExpr] = field(default_factory=dict)

    def matches(self, input_values: dict[str, float]) -> bool:
        if self.guard is None:
            return True
        var, sense = self.guard
        v = input_values[var]
        return v >= 0.0 if sense == ">=" else v < 0.0


@dataclass
class AlgebraicRule:
    """Closed-form evaluation of one algebraic variable during simulation.

    ``per_branch`` maps branch name -> expr (or the single key ``None``).
    ``input_determined`` marks rules free of state references, which may
    safely appear inside dynamics branch expressions. ``absolute`` takes
    |expr|; ``clip`` takes the positive ("pos") or negated-negative ("neg")
    part, realizing exact import/export and deviation splits.
    """

    name: str
    per_branch: dict[Optional[str], LinearExpr]
    input_determined: bool = False
    absolute: bool = False
    clip: Optional[str] = None

    def expr_for(self, branch: Optional[Branch]) -> LinearExpr:
        if None in self.per_branch:
            return self.per_branch[None]
        assert branch is not None, f"rule {self.name} needs a branch"
        return self.per_branch[branch.name]

    def finish(self, value: float) -> float:
        if self.absolute:
            return abs(value)
        if self.clip == "pos":
            return max(value, 0.0)
        if self.clip == "neg":
            return max(-value, 0.0)
        return value


@dataclass
class CostBlock:
    """One additive stage-cost contribution with its defining machinery.

    ``aux_vars``/``aux_templates`` are duplicated per robust cost scenario
    when ``expr`` (or the aux templates) reference scenario-substituted
    symbols; ``expr`` is the per-timestep contribution to the objective.
    """

    name: str
    expr: LinearExpr
    aux_vars: list[str] = field(default_factory=list)       # names declared on the entity
    aux_templates: list[str] = field(default_factory=list)   # template names on the entity


class EntityModel:
    """Symbolic model of one entity plus its children (pre-build: no id)."""

    def __init__(self, class_prefix: str, kind_name: str):
        self.class_prefix = class_prefix
        self.kind_name = kind_name
        self.vars: "OrderedDict[str, SymbolicVar]" = OrderedDict()
        self.templates: list[ConstraintTemplate] = []
        self.dynamics: "OrderedDict[str, ConstraintTemplate]" = OrderedDict()
        self.branches: list[Branch] = []
        self.algebraic_rules: list[AlgebraicRule] = []
        self.cost_blocks: list[CostBlock] = []
        self.children: list[EntityModel] = []
        self.param_values: dict[str, float] = {}
        self.param_uncertainty: dict[str, tuple[float, float]] = {}
        self.data_bindings: dict[str, object] = {}   # disturbance name -> provider spec
        self.disturbance_defaults: dict[str, float] = {}  # used when no provider is bound
        self.initializers: dict[str, object] = {}    # param name -> ParamInitializer
        self.reward_shapes: dict[str, Callable] = {}  # cost block name -> fn(values, t, path)
        self.window: Optional[tuple[int, int]] = None  # availability window (EV)
        self._fresh = 0

    # -- declaration helpers ---------------------------------------------------

    def ref(self, name: str, t_offset: int = 0) -> VarRef:
        return VarRef(SELF, name, t_offset)

    def add_var(self, var: SymbolicVar) -> SymbolicVar:
        if var.name in self.vars:
            raise ValueError(f"duplicate variable {var.name!r} on {self.kind_name}")
        self.vars[var.name] = var
        return var

    def add_template(self, tpl: ConstraintTemplate) -> ConstraintTemplate:
        self.templates.append(tpl)
        return tpl

    def set_dynamics(self, state: str, rhs: LinearExpr, name: Optional[str] = None) -> None:
        """Declare state(t+1) = rhs(t); creates the canonical dyn template."""
        if state not in self.vars or self.vars[state].kind != VarKind.STATE:
            raise ValueError(f"{state!r} is not a declared state")
        if state in self.dynamics:
            raise ValueError(f"state {state!r} already has dynamics")
        expr = LinearExpr.var(self.ref(state, 1)) - rhs
        tpl = ConstraintTemplate(name or f"dyn_{state}", expr, "=", TimeRange.DYN)
        self.dynamics[state] = tpl
        self.templates.append(tpl)

    def fresh_name(self, base: str) -> str:
        while f"{base}{self._fresh}" in self.vars:
            self._fresh += 1
        name = f"{base}{self._fresh}"
        self._fresh += 1
        return name

    def declare_state(
        self,
        name: str,
        bounds: Optional[tuple[float, float]] = None,
        init_value: float = 0.0,
        domain: Domain = Domain.REAL,
    ) -> SymbolicVar:
        """Declare a state with its auto-generated init parameter + constraint."""
        var = self.add_var(SymbolicVar(name, VarKind.STATE, domain, bounds))
        init = f"{name}_init"
        self.add_var(SymbolicVar(init, VarKind.PARAMETER, domain))
        self.param_values[init] = float(init_value)
        expr = LinearExpr.var(self.ref(name)) - LinearExpr((Term(1.0, None, (Factor(self.ref(init)),)),))
        self.templates.append(ConstraintTemplate(f"init_{name}", expr, "=", TimeRange.INITIAL))
        return var

    def declare_param(self, name: str, value: float, uncertainty: Optional[tuple[float, float]] = None) -> SymbolicVar:
        var = self.add_var(SymbolicVar(name, VarKind.PARAMETER))
        self.param_values[name] = float(value)
        if uncertainty is not None:
            lo, hi = float(uncertainty[0]), float(uncertainty[1])
            if not (lo <= value <= hi):
                raise ValueError(f"{name}: nominal {value} outside uncertainty box [{lo}, {hi}]")
            self.param_uncertainty[name] = (lo, hi)
        return var

    # -- tree walking ------------------------------------------------------------

    def walk(self) -> Iterable["EntityModel"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def states(self) -> list[str]:
        return [n for n, v in self.vars.items() if v.kind == VarKind.STATE]

    def inputs(self) -> list[str]:
        return [n for n, v in self.vars.items() if v.kind == VarKind.INPUT]

    def disturbances(self) -> list[str]:
        return [n for n, v in self.vars.items() if v.kind == VarKind.DISTURBANCE]

    def select_branch(self, input_values: dict[str, float]) -> Optional[Branch]:
        if not self.branches:
            return None
        for b in self.branches:
            if b.matches(input_values):
                return b
        raise RuntimeError(f"no branch of {self.kind_name} matches inputs {input_values}")
