"""Robust MPC, two-stage dispatch, solver-based safeguards, and imbalance
redistribution over coalitions of prosumers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .global_model import GlobalModel, ModelError
from .ocp import CompiledOCP, TerminalSpec, compile_ocp, subtree_paths
from .optim import SolveResult, Status, solve_lp, solve_mip, solve_qp
from .symbolic import VarKind
from .uncertainty import RobustCostMode, robustify_ocp

log = logging.getLogger(__name__)


class ControlError(RuntimeError):
    pass


class InfeasibleProblem(ControlError):
    pass


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------


@dataclass
class ControllerSpec:
    kind: str = "mpc"  # mpc | external | rule
    robust: Optional[str] = "worst-case"  # None/"naive" | nominal | worst-case | weighted
    weights: Optional[list[float]] = None
    rule: Optional[Callable] = None  # rule(t, observation) -> action array

    def robust_mode(self) -> Optional[RobustCostMode]:
        if self.robust in (None, "naive", "none"):
            return None
        return RobustCostMode(self.robust, self.weights)


@dataclass
class SafeguardSpec:
    mode: str = "projection"  # projection | replacement
    penalty: str = "distance"  # distance | constant | none
    weight: float = 1.0        # distance-mode weight (>= 0)
    constant: float = -50.0    # constant-mode reward term when intervened
    seed: int = 0              # replacement variable-ordering seed

    def __post_init__(self) -> None:
        if self.mode not in ("projection", "replacement"):
            raise ValueError(f"unknown safeguard mode {self.mode!r}")
        if self.penalty not in ("distance", "constant", "none"):
            raise ValueError(f"unknown penalty kind {self.penalty!r}")
        if self.weight < 0:
            raise ValueError("penalty weight must be >= 0")

    def penalty_for(self, a: np.ndarray, u: np.ndarray, intervened: bool) -> float:
        """Additive reward term R_pen."""
        if not intervened or self.penalty == "none":
            return 0.0
        if self.penalty == "distance":
            return -self.weight * float(np.linalg.norm(a - u))
        return float(self.constant)


@dataclass
class Coalition:
    name: str
    buses: list[str]
    controller: ControllerSpec = field(default_factory=ControllerSpec)
    safeguard: Optional[SafeguardSpec] = None


@dataclass
class ControlAssignment:
    coalitions: list[Coalition]
    balancing_controller: ControllerSpec = field(default_factory=lambda: ControllerSpec(kind="mpc"))
    balancing: list[str] = field(default_factory=list)  # filled by validate()

    def validate(self, model: GlobalModel) -> None:
        buses = [p for p, b in model.blocks.items() if b.class_prefix == "n"]
        seen: set[str] = set()
        for co in self.coalitions:
            if not co.buses:
                raise ModelError(f"coalition {co.name!r} has no buses")
            for b in co.buses:
                if b not in buses:
                    raise ModelError(f"coalition {co.name!r}: {b!r} is not a bus")
                if b in seen:
                    raise ModelError(f"bus {b!r} assigned to more than one coalition")
                seen.add(b)
        self.balancing = [b for b in buses if b not in seen]

    @property
    def centralized(self) -> bool:
        return len(self.coalitions) == 1 and not self.balancing


# ---------------------------------------------------------------------------
# data bundle handed to OCP builds
# ---------------------------------------------------------------------------


@dataclass
class OcpData:
    """Numeric inputs for one OCP build at one episode time."""

    x0: dict[tuple[str, str], float] = field(default_factory=dict)
    series: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    boxes: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def restricted(self, paths: Sequence[str]) -> "OcpData":
        keep = set(paths)
        return OcpData(
            {k: v for k, v in self.x0.items() if k[0] in keep},
            {k: v for k, v in self.series.items() if k[0] in keep},
            {k: v for k, v in self.boxes.items() if k[0] in keep},
        )


def _solve_compiled(c: CompiledOCP, first_feasible: bool = False, shuffle_seed: Optional[int] = None) -> SolveResult:
    p = c.problem
    if shuffle_seed is not None:
        p = _shuffled(p, shuffle_seed)
    if p.has_binaries():
        res = solve_mip(p, first_feasible=first_feasible)
    elif p.has_quadratic():
        res = solve_qp(p)
    else:
        res = solve_lp(p)
    if shuffle_seed is not None and res.x is not None:
        res = _unshuffle(res, c.problem)
    return res


def _shuffled(p, seed: int):
    """Column-permuted copy (replacement randomness is seeded, reproducible)."""
    from .optim.problem import OptProblem

    rng = np.random.default_rng(seed)
    perm = rng.permutation(p.n)
    inv = np.argsort(perm)
    out = OptProblem(p.name + ":shuffled")
    for new_j in range(p.n):
        j = int(perm[new_j])
        out.add_var(p.var_names[j], p.lb[j], p.ub[j], p.binary[j])
        out.c[new_j] = p.c[j]
        out.q[new_j] = p.q[j]
    out.obj_const = p.obj_const
    for con in p.constraints:
        out.add_constraint({int(inv[j]): v for j, v in con.coeffs.items()}, con.sense, con.rhs, con.name)
    out._perm = perm
    return out


def _unshuffle(res: SolveResult, original) -> SolveResult:
    perm = res.problem._perm
    x = np.zeros(len(perm))
    for new_j, j in enumerate(perm):
        x[int(j)] = res.x[new_j]
    return SolveResult(res.status, res.objective, x, res.mip_gap, res.best_bound, res.nodes, res.message, original)


# ---------------------------------------------------------------------------
# MPC
# ---------------------------------------------------------------------------


@dataclass
class MpcResult:
    inputs: dict[tuple[str, str], float]
    objective: float
    compiled: CompiledOCP
    result: SolveResult

    def bus_power_trajectory(self, model: GlobalModel, bus: str, T: int) -> np.ndarray:
        col = self.compiled.columns
        return np.array([self.result.x[col[(bus, "p", t)]] for t in range(T + 1)])


def mpc_step(
    model: GlobalModel,
    coalition: Sequence[str],
    x0: Mapping[tuple[str, str], float],
    data: OcpData,
    T: int,
    start: int = 0,
    include_powerflow: bool = False,
    fixed_bus_powers: Optional[Mapping[str, Sequence[float]]] = None,
    terminal: Optional[TerminalSpec] = None,
    objective: Union[str, tuple] = "cost",
) -> MpcResult:
    """Solve the coalition's receding-horizon OCP and return first-step inputs.

    ``model`` must already be robustified for robust control (see
    ``prepare_controller_model``). Infeasibility raises, never relaxes.
    """
    compiled = compile_ocp(
        model,
        list(coalition),
        T,
        start=start,
        x0=dict(x0),
        disturbances=data.series,
        boxes=data.boxes,
        objective=objective,
        include_powerflow=include_powerflow,
        fixed_bus_powers=fixed_bus_powers,
        terminal=terminal,
        name=f"mpc@{start}",
    )
    res = _solve_compiled(compiled)
    if res.status == Status.INFEASIBLE:
        raise InfeasibleProblem(f"coalition OCP infeasible at step {start}")
    if res.status not in (Status.OPTIMAL, Status.GAP_LIMIT):
        raise ControlError(f"coalition OCP solve failed: {res.status.value} ({res.message})")
    inputs = {
        (path, name): float(res.x[col])
        for (path, name, t), col in compiled.columns.items()
        if t == 0 and compiled._kinds.get((path, name)) == VarKind.INPUT
    }
    return MpcResult(inputs, float(res.objective), compiled, res)


def prepare_controller_model(
    base: GlobalModel, spec: ControllerSpec, uncertain_disturbances: Optional[set] = None
) -> GlobalModel:
    """Robustify the base model per the controller's robust-cost mode."""
    mode = spec.robust_mode()
    if mode is None:
        return base
    return robustify_ocp(base, mode, uncertain_disturbances)


# ---------------------------------------------------------------------------
# safety filter: action projection / action replacement
# ---------------------------------------------------------------------------


@dataclass
class SafeguardResult:
    action: np.ndarray          # proposed (after box clamping)
    safe_action: np.ndarray
    penalty: float              # additive reward term R_pen
    intervened: bool
    inputs: dict[tuple[str, str], float]
    compiled: CompiledOCP
    result: SolveResult


def safeguard(
    model: GlobalModel,
    coalition: Sequence[str],
    x0: Mapping[tuple[str, str], float],
    data: OcpData,
    spec: SafeguardSpec,
    action: Sequence[float],
    action_order: Sequence[tuple[str, str, float, float]],  # (path, input, lo, hi)
    T: int,
    start: int = 0,
    terminal: Optional[TerminalSpec] = None,
) -> SafeguardResult:
    """Map a proposed action to a provably safe one over the robustified
    coalition constraints; infeasibility is a hard error (well-posedness)."""
    a = np.asarray(action, float)
    if len(a) != len(action_order):
        raise ControlError(f"action has {len(a)} entries, expected {len(action_order)}")
    clamped = a.copy()
    for i, (_, _, lo, hi) in enumerate(action_order):
        clamped[i] = min(max(a[i], lo), hi)
    if np.any(clamped != a):
        log.warning("safeguard: proposed action clamped into its box")

    targets = {(path, name): float(clamped[i]) for i, (path, name, _, _) in enumerate(action_order)}
    objective: Union[str, tuple]
    shuffle_seed = None
    if spec.mode == "projection":
        objective = ("projection", targets)
    else:
        objective = "zero"
        shuffle_seed = spec.seed + start
    compiled = compile_ocp(
        model,
        list(coalition),
        T,
        start=start,
        x0=dict(x0),
        disturbances=data.series,
        boxes=data.boxes,
        objective=objective,
        terminal=terminal,
        name=f"safeguard@{start}",
    )
    res = _solve_compiled(compiled, first_feasible=(spec.mode == "replacement"), shuffle_seed=shuffle_seed)
    if res.status == Status.INFEASIBLE:
        raise InfeasibleProblem(
            f"safeguard problem infeasible at step {start}: no safe action exists (well-posedness violated)"
        )
    if res.status not in (Status.OPTIMAL, Status.GAP_LIMIT):
        raise ControlError(f"safeguard solve failed: {res.status.value} ({res.message})")
    u = np.array([res.x[compiled.columns[(path, name, 0)]] for (path, name, _, _) in action_order])
    intervened = bool(np.max(np.abs(clamped - u), initial=0.0) > 1e-7)
    if not intervened:
        u = clamped.copy()
    penalty = spec.penalty_for(clamped, u, intervened)
    inputs = {(path, name): float(u[i]) for i, (path, name, _, _) in enumerate(action_order)}
    return SafeguardResult(clamped, u, penalty, intervened, inputs, compiled, res)


# ---------------------------------------------------------------------------
# imbalance redistribution
# ---------------------------------------------------------------------------


def redistribute_imbalance(
    cost: float,
    deviations: Mapping[str, float],
    rule: Union[str, Callable[[float, Mapping[str, float]], Mapping[str, float]]] = "proportional",
) -> dict[str, float]:
    """Split the stage-2 imbalance cost over coalitions; charges sum to cost."""
    names = list(deviations)
    if callable(rule):
        charges = dict(rule(cost, deviations))
        total = sum(charges.values())
        if abs(total - cost) > 1e-9 * max(1.0, abs(cost)):
            raise ControlError(f"custom redistribution rule lost cost: {total} != {cost}")
        return charges
    if rule == "equal" or not names:
        return {n: cost / len(names) for n in names} if names else {}
    if rule != "proportional":
        raise ControlError(f"unknown redistribution rule {rule!r}")
    weights = {n: abs(float(deviations[n])) for n in names}
    total = sum(weights.values())
    if total <= 0:
        return {n: cost / len(names) for n in names}
    return {n: cost * weights[n] / total for n in names}


# ---------------------------------------------------------------------------
# two-stage dispatch
# ---------------------------------------------------------------------------


@dataclass
class StageOneOutcome:
    coalition: str
    inputs: dict[tuple[str, str], float]
    bus_powers: dict[str, np.ndarray]  # predicted nominal trajectories
    penalty: float = 0.0
    intervened: bool = False
    objective: Optional[float] = None
    compiled: Optional[CompiledOCP] = None
    result: Optional[SolveResult] = None


@dataclass
class TwoStageResult:
    stage1: list[StageOneOutcome]
    stage2_inputs: dict[tuple[str, str], float] = field(default_factory=dict)
    stage2_objective: Optional[float] = None
    imbalance_cost: float = 0.0
    charges: dict[str, float] = field(default_factory=dict)
    skipped_stage2: bool = False

    def all_inputs(self) -> dict[tuple[str, str], float]:
        out: dict[tuple[str, str], float] = {}
        for s in self.stage1:
            out.update(s.inputs)
        out.update(self.stage2_inputs)
        return out


class Dispatcher:
    """Owns prepared (robustified) per-coalition models and runs dispatch steps."""

    def __init__(
        self,
        model: GlobalModel,
        assignment: ControlAssignment,
        T: int,
        terminal: Optional[TerminalSpec] = None,
        uncertain_disturbances: Optional[set] = None,
        balancing_effort_weight: float = 1.0,
    ):
        assignment.validate(model)
        self.model = model
        self.assignment = assignment
        self.T = T
        self.terminal = terminal
        self.balancing_effort_weight = balancing_effort_weight
        self.include_powerflow_centralized = True
        self.models: dict[str, GlobalModel] = {}
        self.safeguard_models: dict[str, GlobalModel] = {}
        for co in assignment.coalitions:
            self.models[co.name] = prepare_controller_model(model, co.controller, uncertain_disturbances)
            if co.safeguard is not None:
                robust = self.models[co.name]
                if robust.robust is None:
                    robust = robustify_ocp(model, RobustCostMode("nominal"), uncertain_disturbances)
                self.safeguard_models[co.name] = robust
        if assignment.balancing:
            self.models["__balancing__"] = prepare_controller_model(
                model, assignment.balancing_controller, uncertain_disturbances
            )

    def coalition_scope(self, co: Coalition) -> list[str]:
        return list(co.buses)

    def action_order(self, co: Coalition) -> list[tuple[str, str, float, float]]:
        out = []
        for path in subtree_paths(self.model, co.buses):
            blk = self.model.block(path)
            for name, var in blk.vars.items():
                if var.kind == VarKind.INPUT:
                    lo, hi = var.effective_bounds()
                    out.append((path, name, lo, hi))
        return out

    def stage1(
        self,
        x0: Mapping[tuple[str, str], float],
        data: OcpData,
        start: int = 0,
        external_actions: Optional[Mapping[str, Sequence[float]]] = None,
    ) -> list[StageOneOutcome]:
        """Stage-1 inputs per coalition (independent robust OCPs / safeguarded
        external actions); coalition OCPs never include power flow except in
        the centralized single-stage case."""
        external_actions = dict(external_actions or {})
        stage1: list[StageOneOutcome] = []
        centralized = self.assignment.centralized

        for co in self.assignment.coalitions:
            scope = self.coalition_scope(co)
            sub_paths = set(subtree_paths(self.model, scope))
            sub_x0 = {k: v for k, v in dict(x0).items() if k[0] in sub_paths}
            sub = data.restricted(sub_paths)
            use_pf = centralized and self.include_powerflow_centralized and self.model.powerflow_kind is not None
            if co.controller.kind == "mpc":
                mpc = mpc_step(
                    self.models[co.name], scope, sub_x0, sub, self.T, start,
                    include_powerflow=use_pf, terminal=self.terminal,
                )
                outcome = StageOneOutcome(
                    co.name,
                    mpc.inputs,
                    {b: mpc.bus_power_trajectory(self.model, b, self.T) for b in co.buses},
                    objective=mpc.objective,
                    compiled=mpc.compiled,
                    result=mpc.result,
                )
            else:
                if co.controller.kind == "rule":
                    if co.controller.rule is None:
                        raise ControlError(f"coalition {co.name!r}: rule controller without rule")
                    action = np.asarray(co.controller.rule(start, sub_x0), float)
                elif co.name in external_actions:
                    action = np.asarray(external_actions[co.name], float)
                else:
                    raise ControlError(f"no action supplied for external coalition {co.name!r}")
                order = self.action_order(co)
                if co.safeguard is not None:
                    sg = safeguard(
                        self.safeguard_models[co.name], scope, sub_x0, sub, co.safeguard,
                        action, order, self.T, start, terminal=self.terminal,
                    )
                    inputs = sg.inputs
                    penalty, intervened = sg.penalty, sg.intervened
                    compiled, res = sg.compiled, sg.result
                    bus_tr = {
                        b: np.array([res.x[compiled.columns[(b, "p", t)]] for t in range(self.T + 1)])
                        for b in co.buses
                    }
                else:
                    clamped = np.clip(action, [o[2] for o in order], [o[3] for o in order])
                    targets = {(p, n): float(clamped[i]) for i, (p, n, _, _) in enumerate(order)}
                    compiled, res, bus_tr = self._completion(co, scope, sub_x0, sub, targets, start)
                    inputs = targets
                    penalty, intervened = 0.0, False
                outcome = StageOneOutcome(co.name, inputs, bus_tr, penalty, intervened, compiled=compiled, result=res)
            stage1.append(outcome)
        return stage1

    def stage2(
        self,
        stage1: list[StageOneOutcome],
        x0: Mapping[tuple[str, str], float],
        data: OcpData,
        start: int = 0,
    ) -> TwoStageResult:
        """Dispatch balancing assets with power flow on the nominal trajectory
        and stage-1 bus powers fixed; centralized mode skips stage 2."""
        result = TwoStageResult(stage1)
        if self.assignment.centralized or not self.assignment.balancing:
            result.skipped_stage2 = True
            return result

        fixed: dict[str, np.ndarray] = {}
        for s in stage1:
            fixed.update(s.bus_powers)
        bal_scope = self.assignment.balancing
        bal_paths = set(subtree_paths(self.model, bal_scope))
        bal_x0 = {k: v for k, v in dict(x0).items() if k[0] in bal_paths}
        bal_data = data.restricted(bal_paths)
        compiled = compile_ocp(
            self.models["__balancing__"],
            bal_scope,
            self.T,
            start=start,
            x0=bal_x0,
            disturbances=bal_data.series,
            boxes=bal_data.boxes,
            objective=("effort", self.balancing_effort_weight),
            include_powerflow=True,
            fixed_bus_powers=fixed,
            terminal=self.terminal,
            name=f"stage2@{start}",
        )
        res = _solve_compiled(compiled)
        if res.status == Status.INFEASIBLE:
            nets = {s.coalition: round(float(sum(tr[0] for tr in s.bus_powers.values())), 6) for s in stage1}
            raise InfeasibleProblem(
                f"stage-2 dispatch infeasible at step {start}: balancing assets cannot restore "
                f"feasibility (coalition net powers: {nets})"
            )
        if res.status not in (Status.OPTIMAL, Status.GAP_LIMIT):
            raise ControlError(f"stage-2 solve failed: {res.status.value} ({res.message})")
        result.stage2_inputs = {
            (path, name): float(res.x[col])
            for (path, name, t), col in compiled.columns.items()
            if t == 0 and compiled._kinds.get((path, name)) == VarKind.INPUT
        }
        result.stage2_objective = float(res.objective)
        return result

    def step(
        self,
        x0: Mapping[tuple[str, str], float],
        data: OcpData,
        start: int = 0,
        external_actions: Optional[Mapping[str, Sequence[float]]] = None,
    ) -> TwoStageResult:
        s1 = self.stage1(x0, data, start, external_actions)
        return self.stage2(s1, x0, data, start)

    def _completion(self, co, scope, sub_x0, sub, targets, start):
        """Nominal trajectory completion for unsafeguarded external actions.

        If no feasible continuation exists (unsafe action), fall back to an
        unconstrained nominal prediction so the violation can play out in
        simulation; stage 2 only needs some nominal bus trajectory."""
        model = self.models.get(co.name, self.model)
        compiled = compile_ocp(
            model, scope, self.T, start=start, x0=sub_x0,
            disturbances=sub.series, boxes=sub.boxes,
            objective="zero", fixed_inputs=targets, name=f"completion@{start}",
        )
        res = _solve_compiled(compiled, first_feasible=True)
        if res.status in (Status.OPTIMAL, Status.GAP_LIMIT):
            bus_tr = {
                b: np.array([res.x[compiled.columns[(b, "p", t)]] for t in range(self.T + 1)])
                for b in co.buses
            }
            return compiled, res, bus_tr
        if res.status != Status.INFEASIBLE:
            raise ControlError(f"completion solve failed: {res.status.value}")
        return None, None, self._predict_unconstrained(co, scope, sub_x0, sub, targets, start)

    def _predict_unconstrained(self, co, scope, sub_x0, sub, targets, start):
        """Open-loop rollout with u_0 = action and future inputs at zero,
        ignoring state constraints; used only as a stage-2 nominal guess."""
        from .simulate import Simulator

        sim = Simulator(self.model)
        sim.reset(dict(sub_x0))
        paths = subtree_paths(self.model, scope)
        scope_set = set(paths)
        bus_tr = {b: np.zeros(self.T + 1) for b in co.buses}
        for t in range(self.T + 1):
            w = {key: float(series[t]) for key, series in sub.series.items()}
            sim.record_disturbances(t, w)
            u = {}
            for path in paths:
                blk = self.model.block(path)
                for name, var in blk.vars.items():
                    if var.kind == VarKind.INPUT:
                        if t == 0 and (path, name) in targets:
                            u[(path, name)] = targets[(path, name)]
                        else:
                            lo, hi = var.effective_bounds()
                            u[(path, name)] = min(max(0.0, lo), hi)
            sim.record_inputs(t, u)
            sim.solve_algebraic(t, scope=scope_set)
            for b in co.buses:
                bus_tr[b][t] = sim.lookup(b, "p", t)
            if t < self.T:
                sim.execute_dynamics(t, scope=scope_set)
        return bus_tr


def two_stage_step(
    dispatcher: Dispatcher,
    x0: Mapping[tuple[str, str], float],
    data: OcpData,
    start: int = 0,
    external_actions: Optional[Mapping[str, Sequence[float]]] = None,
) -> TwoStageResult:
    """Stage 1 then stage 2 for one step (see Dispatcher for the pieces)."""
    return dispatcher.step(x0, data, start, external_actions)
