"""Compile a (possibly robustified) global model slice into an OptProblem.

The compiler instantiates constraint templates over the control horizon,
substitutes parameter/disturbance values (vertex slots included), expands
robust cost scenarios, and exposes the column map plus per-scenario cost
forms for diagnostics.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .expr import LinearExpr, VarRef
from .global_model import GlobalModel, ModelError
from .optim import OptProblem
from .symbolic import DECISION_KINDS, ConstraintTemplate, Domain, TimeRange, VarKind
from .uncertainty import SCENARIO_CAP, RobustCostMode, ScenarioDim

log = logging.getLogger(__name__)

INF = float("inf")


@dataclass
class TerminalSpec:
    """Terminal state box at t = T with a symmetric safety margin.

    Approximates the robust control invariant terminal condition; applied to
    the nominal trajectory and, when present, both bound trajectories.
    """

    boxes: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)
    margin: float = 0.0


@dataclass
class LinearForm:
    coeffs: dict[int, float] = field(default_factory=dict)
    const: float = 0.0

    def add(self, col: Optional[int], coeff: float) -> None:
        if coeff == 0.0:
            return
        if col is None:
            self.const += coeff
        else:
            self.coeffs[col] = self.coeffs.get(col, 0.0) + coeff

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[j] for j, c in self.coeffs.items())


@dataclass
class CompiledOCP:
    problem: OptProblem
    columns: dict[tuple[str, str, Optional[int]], int]
    T: int
    start: int
    scope: list[str]
    nominal_cost: LinearForm = field(default_factory=LinearForm)
    scenario_costs: list[LinearForm] = field(default_factory=list)
    scenario_labels: list[str] = field(default_factory=list)
    capped: bool = False

    def col(self, path: str, name: str, t: Optional[int]) -> int:
        return self.columns[(path, name, t)]

    def input_columns(self, t: int = 0) -> list[tuple[str, str, int]]:
        out = []
        for (path, name, tt), col in self.columns.items():
            if tt == t and self._kind(path, name) == VarKind.INPUT:
                out.append((path, name, col))
        return out

    _kinds: dict = field(default_factory=dict)

    def _kind(self, path: str, name: str):
        return self._kinds.get((path, name))


def subtree_paths(model: GlobalModel, roots: Sequence[str]) -> list[str]:
    """Root paths plus all descendants, in model block order."""
    keep: set[str] = set()
    for r in roots:
        if r not in model.blocks:
            raise ModelError(f"unknown block {r!r}")
        stack = [r]
        while stack:
            cur = stack.pop()
            keep.add(cur)
            stack.extend(model.block(cur).children)
    return [p for p in model.blocks if p in keep]


def compile_ocp(
    model: GlobalModel,
    scope: Sequence[str],
    T: int,
    start: int = 0,
    x0: Optional[Mapping[tuple[str, str], float]] = None,
    disturbances: Optional[Mapping[tuple[str, str], Sequence[float]]] = None,
    boxes: Optional[Mapping[tuple[str, str], tuple[Sequence[float], Sequence[float]]]] = None,
    objective: Union[str, tuple] = "cost",
    include_powerflow: bool = False,
    fixed_bus_powers: Optional[Mapping[str, Sequence[float]]] = None,
    fixed_inputs: Optional[Mapping[tuple[str, str], float]] = None,
    terminal: Optional[TerminalSpec] = None,
    name: str = "ocp",
) -> CompiledOCP:
    """Build the horizon-T optimization problem over the given blocks.

    ``x0`` overrides initial-value parameters; ``disturbances`` supplies
    nominal series of length T+1 per bound disturbance; ``boxes`` supplies
    (lower, upper) series for uncertain disturbances (vertex slots collapse
    to the nominal series when absent).
    """
    if T < 1:
        raise ModelError("horizon must be at least 1 step")
    x0 = dict(x0 or {})
    disturbances = {k: np.asarray(v, float) for k, v in (disturbances or {}).items()}
    boxes = {k: (np.asarray(lo, float), np.asarray(hi, float)) for k, (lo, hi) in (boxes or {}).items()}
    scope_list = subtree_paths(model, scope)
    scope_set = set(scope_list)
    info = model.robust
    bound_var_names: set[tuple[str, str]] = set()
    if info is not None:
        for (p, s), (lo_n, hi_n) in info.bound_vars.items():
            bound_var_names.update({(p, lo_n), (p, hi_n)})

    prob = OptProblem(name)
    compiled = CompiledOCP(prob, {}, T, start, scope_list)

    # -- columns ---------------------------------------------------------------
    def add_col(path: str, vname: str, t: Optional[int], lo: float, hi: float, binary: bool) -> int:
        label = f"{path}.{vname}" + (f"[{t}]" if t is not None else "")
        idx = prob.add_var(label, lo, hi, binary)
        compiled.columns[(path, vname, t)] = idx
        return idx

    pf_extra_blocks: list[str] = []
    if include_powerflow:
        pf_extra_blocks = [
            p for p, blk in model.blocks.items() if blk.class_prefix == "l" and p not in scope_set
        ]

    for path in scope_list + pf_extra_blocks:
        blk = model.block(path)
        for vname, var in blk.vars.items():
            if var.kind not in DECISION_KINDS:
                continue
            lo, hi = var.effective_bounds()
            binary = var.domain == Domain.BINARY
            if var.indexed:
                for t in range(T + 1):
                    add_col(path, vname, t, lo, hi, binary)
            else:
                add_col(path, vname, None, lo, hi, binary)
            compiled._kinds[(path, vname)] = var.kind
    if include_powerflow:
        # angle/voltage variables of out-of-scope buses still participate
        for path, blk in model.blocks.items():
            if blk.class_prefix != "n" or path in scope_set:
                continue
            for vname in ("theta", "v"):
                if vname in blk.vars:
                    var = blk.vars[vname]
                    lo, hi = var.effective_bounds()
                    for t in range(T + 1):
                        add_col(path, vname, t, lo, hi, False)
                    compiled._kinds[(path, vname)] = var.kind

    # -- parameter / disturbance values -----------------------------------------
    param_override: dict[tuple[str, str], float] = {}
    for (path, state), value in x0.items():
        blk = model.block(path)
        for suffix in ("", "__lo", "__hi"):
            pname = f"{state}_init{suffix}"
            alt = f"{state}{suffix}_init"
            if pname in blk.param_values:
                param_override[(path, pname)] = float(value)
            if alt in blk.param_values:
                param_override[(path, alt)] = float(value)

    dist_series: dict[tuple[str, str], np.ndarray] = {}

    def series_for(path: str, vname: str) -> np.ndarray:
        key = (path, vname)
        if key in dist_series:
            return dist_series[key]
        blk = model.block(path)
        base = vname
        side = None
        if vname.endswith("__lo"):
            base, side = vname[:-4], 0
        elif vname.endswith("__hi"):
            base, side = vname[:-4], 1
        if side is not None:
            if (path, base) in boxes:
                arr = boxes[(path, base)][side]
            else:
                arr = series_for(path, base)
        elif key in disturbances:
            arr = disturbances[key]
        elif base in blk.disturbance_defaults:
            arr = np.full(T + 1, blk.disturbance_defaults[base])
        else:
            raise ModelError(f"no series provided for disturbance {path}.{vname}")
        arr = np.asarray(arr, float)
        if len(arr) < T + 1:
            raise ModelError(f"series for {path}.{vname} must cover T+1={T + 1} steps, got {len(arr)}")
        dist_series[key] = arr
        return arr

    def factor_value(ref: VarRef, t: int, scen: Optional[dict] = None) -> float:
        blk = model.block(ref.entity)
        var = blk.vars.get(ref.name)
        if var is None:
            raise ModelError(f"unresolved reference {ref}")
        if var.kind == VarKind.PARAMETER:
            if scen:
                side = scen.get(("param", ref.entity, ref.name, None))
                if side is not None:
                    lo, hi = blk.param_uncertainty[ref.name]
                    return hi if side > 0 else lo
            key = (ref.entity, ref.name)
            if key in param_override:
                return param_override[key]
            return blk.param_values[ref.name]
        if var.kind == VarKind.DISTURBANCE:
            tt = min(max(t + ref.t_offset, 0), T)
            if scen:
                side = scen.get(("disturbance", ref.entity, ref.name, tt))
                if side is not None:
                    lo, hi = boxes[(ref.entity, ref.name)]
                    return float(hi[tt]) if side > 0 else float(lo[tt])
            return float(series_for(ref.entity, ref.name)[tt])
        raise ModelError(f"{ref} is not a parameter or disturbance")

    # -- template instantiation ---------------------------------------------------
    def instantiate(
        expr: LinearExpr,
        t: int,
        absolute_time: bool = False,
        scen: Optional[dict] = None,
        remap: Optional[Mapping[tuple[str, str], tuple[str, Optional[str]]]] = None,
    ) -> Optional[LinearForm]:
        """Row form of expr at time t. ``remap`` maps (path, name) of decision
        refs to (new name, None) columns (scenario aux/state substitution).
        Returns None when an out-of-horizon coupled reference appears."""
        row = LinearForm(const=expr.constant)
        for term in expr.terms:
            coeff = term.coeff
            for f in term.factors:
                ft = (f.ref.t_offset - start) if absolute_time else t
                v = factor_value(VarRef(f.ref.entity, f.ref.name, 0 if absolute_time else f.ref.t_offset), ft, scen)
                coeff *= v if f.exponent == 1 else 1.0 / v
            if term.var is None:
                row.add(None, coeff)
                continue
            ref = term.var
            path, vname = ref.entity, ref.name
            # metadata (indexedness) comes from the original declaration even
            # when the column is a per-scenario aux clone
            var = model.block(path).vars.get(vname)
            if remap and (path, vname) in remap:
                vname = remap[(path, vname)][0]
                var = model.block(path).vars.get(vname, var)
            tt: Optional[int]
            if var is None:
                raise ModelError(f"unresolved reference {path}.{vname}")
            if not var.indexed:
                tt = None
            elif absolute_time:
                tt = ref.t_offset - start
                if tt < 0 or tt > T:
                    return None
            else:
                tt = t + ref.t_offset
                if tt < 0 or tt > T:
                    return None
            colkey = (path, vname, tt)
            if colkey in compiled.columns:
                row.add(compiled.columns[colkey], coeff)
            elif fixed_bus_powers is not None and vname == "p" and path in fixed_bus_powers:
                row.add(None, coeff * float(fixed_bus_powers[path][tt if tt is not None else 0]))
            else:
                raise ModelError(f"reference {path}.{vname} outside OCP scope")
        return row

    def add_template(owner: str, tpl: ConstraintTemplate, scen: Optional[dict] = None, remap=None, tag: str = "") -> None:
        if tpl.trange == TimeRange.COUPLED:
            if not tpl.active_at(start):
                return
            row = instantiate(tpl.expr, 0, absolute_time=True, scen=scen, remap=remap)
            if row is None:
                return
            prob.add_constraint(row.coeffs, tpl.sense, -row.const, f"{owner}.{tpl.name}{tag}")
            return
        if tpl.trange == TimeRange.INITIAL:
            times: Sequence[int] = (0,)
        elif tpl.trange == TimeRange.DYN:
            times = range(T)
        else:
            times = range(T + 1)
        for t in times:
            if not tpl.active_at(start + t):
                continue
            row = instantiate(tpl.expr, t, scen=scen, remap=remap)
            if row is None:
                continue
            prob.add_constraint(row.coeffs, tpl.sense, -row.const, f"{owner}.{tpl.name}{tag}[{t}]")

    dependent = info.dependent_cost_blocks if info is not None else set()
    for path in scope_list:
        blk = model.block(path)
        for tpl in blk.templates:
            add_template(path, tpl)

    if include_powerflow:
        for tpl in model.powerflow_templates:
            add_template("pf", tpl)

    # -- fixed first-step inputs ----------------------------------------------------
    if fixed_inputs:
        for (path, vname), value in fixed_inputs.items():
            col = compiled.columns[(path, vname, 0)]
            # intersect with the declared box: fixing outside it is infeasible
            prob.lb[col] = max(prob.lb[col], float(value))
            prob.ub[col] = min(prob.ub[col], float(value))

    # -- terminal box -----------------------------------------------------------------
    if terminal is not None:
        for (path, state), (lo, hi) in terminal.boxes.items():
            margin = terminal.margin
            names = [state]
            if info is not None and (path, state) in info.bound_vars:
                names += list(info.bound_vars[(path, state)])
            for nm in names:
                key = (path, nm, T)
                if key not in compiled.columns:
                    continue
                col = compiled.columns[key]
                if lo != -INF:
                    prob.add_constraint({col: 1.0}, ">=", lo + margin, f"terminal_lo.{path}.{nm}")
                if hi != INF:
                    prob.add_constraint({col: 1.0}, "<=", hi - margin, f"terminal_hi.{path}.{nm}")

    # -- objective ---------------------------------------------------------------------
    nominal = LinearForm()
    for path, cb_name in model.objective_terms:
        if path not in scope_set:
            continue
        blk = model.block(path)
        cb = next(c for c in blk.cost_blocks if c.name == cb_name)
        for t in range(T + 1):
            row = instantiate(cb.expr, t)
            if row is None:
                continue
            for j, c in row.coeffs.items():
                nominal.add(j, c)
            nominal.add(None, row.const)
    compiled.nominal_cost = nominal

    if objective == "zero":
        pass
    elif isinstance(objective, tuple) and objective[0] == "projection":
        targets: Mapping[tuple[str, str], float] = objective[1]
        for (path, vname), target in targets.items():
            col = compiled.columns[(path, vname, 0)]
            prob.set_objective_term(col, linear=-2.0 * float(target), quadratic=2.0)
            prob.obj_const += float(target) ** 2
    elif isinstance(objective, tuple) and objective[0] == "effort":
        weight = float(objective[1])
        for (path, vname, t), col in compiled.columns.items():
            if compiled._kinds.get((path, vname)) == VarKind.INPUT:
                prob.set_objective_term(col, quadratic=2.0 * weight)
    elif objective == "cost":
        scen_list, labels, capped = _scenario_assignments(model, scope_set, T, boxes)
        compiled.capped = capped
        mode = info.mode if info is not None else RobustCostMode("nominal")
        if scen_list and mode.mode != "nominal":
            for k, scen in enumerate(scen_list):
                total = LinearForm()
                for path, cb_name in model.objective_terms:
                    if path not in scope_set:
                        continue
                    blk = model.block(path)
                    cb = next(c for c in blk.cost_blocks if c.name == cb_name)
                    if (path, cb_name) in dependent:
                        remap: dict[tuple[str, str], tuple[str, Optional[str]]] = {}
                        for aux in cb.aux_vars:
                            new = f"{aux}__s{k}"
                            base = blk.vars[aux]
                            for t in range(T + 1):
                                add_col(path, new, t, *base.effective_bounds(), False)
                            remap[(path, aux)] = (new, None)
                        for (kind, bpath, nm, _st), side in list(scen.items()):
                            if kind == "state":
                                lo_n, hi_n = info.bound_vars[(bpath, nm)]
                                remap[(bpath, nm)] = (hi_n if side > 0 else lo_n, None)
                        for tname in cb.aux_templates:
                            tpl = next(t2 for t2 in blk.templates if t2.name == tname)
                            add_template(path, tpl, scen=scen, remap=remap, tag=f"__s{k}")
                        for t in range(T + 1):
                            row = instantiate(cb.expr, t, scen=scen, remap=remap)
                            if row is None:
                                continue
                            for j, c in row.coeffs.items():
                                total.add(j, c)
                            total.add(None, row.const)
                    else:
                        for t in range(T + 1):
                            row = instantiate(cb.expr, t)
                            if row is None:
                                continue
                            for j, c in row.coeffs.items():
                                total.add(j, c)
                            total.add(None, row.const)
                compiled.scenario_costs.append(total)
                compiled.scenario_labels.append(labels[k])

        if mode.mode == "nominal" or not compiled.scenario_costs:
            for j, c in nominal.coeffs.items():
                prob.set_objective_term(j, linear=c)
            prob.obj_const += nominal.const
        elif mode.mode == "worst-case":
            epi = prob.add_var("__worst_cost", -INF, INF)
            compiled.columns[("__objective", "__worst_cost", None)] = epi
            prob.set_objective_term(epi, linear=1.0)
            for k, total in enumerate(compiled.scenario_costs):
                coeffs = dict(total.coeffs)
                coeffs[epi] = coeffs.get(epi, 0.0) - 1.0
                prob.add_constraint(coeffs, "<=", -total.const, f"epigraph__s{k}")
        else:  # weighted
            ws = mode.weights
            if ws is not None and len(ws) != len(compiled.scenario_costs):
                raise ModelError(
                    f"{len(ws)} weights given for {len(compiled.scenario_costs)} scenarios"
                )
            if ws is None:
                ws = [1.0 / len(compiled.scenario_costs)] * len(compiled.scenario_costs)
            for w, total in zip(ws, compiled.scenario_costs):
                for j, c in total.coeffs.items():
                    prob.set_objective_term(j, linear=w * c)
                prob.obj_const += w * total.const
    else:
        raise ModelError(f"unknown objective spec {objective!r}")

    return compiled


def _scenario_assignments(model: GlobalModel, scope_set: set, T: int, boxes) -> tuple[list[dict], list[str], bool]:
    """Expand scenario dims into vertex assignments; cap per SCENARIO_CAP."""
    info = model.robust
    if info is None or not info.scenarios:
        return [], [], False
    dims: list[tuple] = []  # (kind, block, name, step or None, worst)
    for d in info.scenarios:
        if d.block not in scope_set:
            continue
        if d.per_step:
            if (d.block, d.name) not in boxes:
                continue  # no uncertainty series bound in this OCP
            for t in range(T + 1):
                dims.append((d.kind, d.block, d.name, t, d.worst))
        else:
            dims.append((d.kind, d.block, d.name, None, d.worst))
    if not dims:
        return [], [], False
    if 2 ** len(dims) > SCENARIO_CAP:
        log.warning(
            "cost-scenario count 2^%d exceeds cap %d; using nominal + elementwise-worst vertices",
            len(dims),
            SCENARIO_CAP,
        )
        state_dims = [d for d in dims if d[0] == "state"]
        factor_dims = [d for d in dims if d[0] != "state"]
        for d in factor_dims:
            if d[4] == 0:
                raise ModelError(f"cost-worst endpoint indeterminate for {d[1]}.{d[2]}; cannot cap scenarios")
        base = {(k, b, n, t): w for (k, b, n, t, w) in factor_dims}
        scens: list[dict] = []
        labels: list[str] = []
        if state_dims:
            for side, lbl in ((-1, "states-lo"), (1, "states-hi")):
                scen = dict(base)
                for (k, b, n, t, _) in state_dims:
                    scen[(k, b, n, t)] = side
                scens.append(scen)
                labels.append(f"worst+{lbl}")
        else:
            scens.append(base)
            labels.append("worst")
        return scens, labels, True
    scens = []
    labels = []
    import itertools as _it

    for sides in _it.product((-1, 1), repeat=len(dims)):
        scen = {}
        for (k, b, n, t, _), side in zip(dims, sides):
            scen[(k, b, n, t)] = side
        scens.append(scen)
        labels.append(",".join(f"{n}{'+' if s > 0 else '-'}" for (_, _, n, t, _), s in zip(dims, sides)))
    return scens, labels, False
