"""Interval uncertainty: hyperbox sets, mixed-monotone bound propagation,
signature validation, forecast boxes, and symbolic OCP robustification.

Bound propagation evaluates each input-switched dynamics branch at two
sign-determined vertices of the uncertainty hypercube, giving guaranteed
lower/upper state trajectories for sign-stable models.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .expr import Factor, LinearExpr, Term, VarRef
from .global_model import Block, GlobalModel, ModelError
from .symbolic import (
    Branch,
    ConstraintTemplate,
    Domain,
    EntityModel,
    SymbolicVar,
    TimeRange,
    VarKind,
)

log = logging.getLogger(__name__)

SCENARIO_CAP = 64  # 2**6
SIGN_TOL = 1e-12


class SignatureError(ValueError):
    pass


# ---------------------------------------------------------------------------
# boxes and trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntervalBox:
    """Componentwise box [lower, upper]."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lo = np.atleast_1d(np.asarray(self.lower, float))
        hi = np.atleast_1d(np.asarray(self.upper, float))
        if lo.shape != hi.shape:
            raise ValueError("box lower/upper shapes differ")
        if np.any(lo > hi + 1e-15):
            raise ValueError("box lower exceeds upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @staticmethod
    def point(values) -> "IntervalBox":
        v = np.atleast_1d(np.asarray(values, float))
        return IntervalBox(v, v)

    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, values, tol: float = 1e-12) -> bool:
        v = np.atleast_1d(np.asarray(values, float))
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)


@dataclass
class BoundedTrajectory:
    """Per-state lower/upper series over [0, T]; both equal x0 at t=0."""

    states: list[str]
    lower: np.ndarray  # (T+1, n_states)
    upper: np.ndarray

    def bounds_at(self, t: int, state: str) -> tuple[float, float]:
        j = self.states.index(state)
        return float(self.lower[t, j]), float(self.upper[t, j])

    def encloses(self, t: int, values: Mapping[str, float], tol: float = 1e-9) -> bool:
        return all(
            self.lower[t, j] - tol <= values[s] <= self.upper[t, j] + tol for j, s in enumerate(self.states)
        )


@dataclass
class RobustCostMode:
    mode: str = "worst-case"  # nominal | worst-case | weighted
    weights: Optional[list[float]] = None

    def __post_init__(self) -> None:
        if self.mode not in ("nominal", "worst-case", "weighted"):
            raise ValueError(f"unknown robust cost mode {self.mode!r}")
        if self.weights is not None:
            if self.mode != "weighted":
                raise ValueError("weights only apply to weighted mode")
            w = np.asarray(self.weights, float)
            if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
                raise ValueError("weights must be nonnegative and sum to 1")


@dataclass
class MonotoneSignature:
    """Per branch, per state: sign (+1/-1/0) of df/dq for each interval-valued
    quantity (states, uncertain parameters, boxed disturbances)."""

    signs: dict[str, dict[str, dict[tuple, int]]]  # branch -> state -> ref key -> sign

    def sign(self, branch: str, state: str, key: tuple) -> Optional[int]:
        return self.signs[branch][state].get(key)


# ---------------------------------------------------------------------------
# forecast boxes
# ---------------------------------------------------------------------------


def forecast_box(
    forecast: Sequence[float],
    truth: Optional[Sequence[float]] = None,
    error_spec: Optional[tuple[str, float]] = None,
) -> IntervalBox:
    """Per-step box enclosing forecast and truth, or forecast +- an error spec.

    ``error_spec`` is ("abs", eps) or ("rel", r). Perfect foresight yields a
    zero-width box (pass truth == forecast or eps == 0).
    """
    f = np.asarray(forecast, float)
    if truth is not None:
        w = np.asarray(truth, float)
        if w.shape != f.shape:
            raise ValueError("forecast and truth lengths differ")
        return IntervalBox(np.minimum(f, w), np.maximum(f, w))
    if error_spec is not None:
        kind, val = error_spec
        if val < 0:
            raise ValueError("error magnitude must be >= 0")
        if kind == "abs":
            return IntervalBox(f - val, f + val)
        if kind == "rel":
            lo = np.minimum(f * (1 - val), f * (1 + val))
            hi = np.maximum(f * (1 - val), f * (1 + val))
            return IntervalBox(lo, hi)
        raise ValueError(f"unknown error spec kind {kind!r}")
    raise ValueError("forecast_box needs truth or an error spec")


# ---------------------------------------------------------------------------
# sign analysis
# ---------------------------------------------------------------------------


def _interval_sign(lo: float, hi: float) -> Optional[int]:
    if abs(lo) <= SIGN_TOL and abs(hi) <= SIGN_TOL:
        return 0
    if lo >= -SIGN_TOL:
        return 1
    if hi <= SIGN_TOL:
        return -1
    return None


def _derivative_interval(expr: LinearExpr, key: tuple, ranges: Mapping[tuple, tuple[float, float]]) -> tuple[float, float]:
    """Interval of d(expr)/d(ref) over the given per-ref value ranges.

    ``key`` is (entity, name); time structure is handled by the caller.
    """
    dlo = dhi = 0.0

    def rng(r: VarRef) -> tuple[float, float]:
        try:
            return ranges[r.key()]
        except KeyError:
            raise SignatureError(f"no range for {r.entity}.{r.name}") from None

    for t in expr.terms:
        hits = [f for f in t.factors if f.ref.key() == key]
        var_hit = t.var is not None and t.var.key() == key
        if not hits and not var_hit:
            continue
        if (len(hits) + (1 if var_hit else 0)) > 1:
            raise SignatureError(f"repeated occurrence of {key} in one term")
        lo, hi = t.coeff, t.coeff
        # product over the remaining parts of the term
        parts: list[tuple[tuple[float, float], int]] = []
        for f in t.factors:
            if hits and f is hits[0]:
                continue
            parts.append((rng(f.ref), f.exponent))
        if t.var is not None and not var_hit:
            parts.append((rng(t.var), 1))
        for (a, b), exp in parts:
            if exp == -1:
                if a <= 0.0 <= b:
                    raise SignatureError("inverse factor range crosses zero")
                a, b = 1.0 / b, 1.0 / a
            cands = (lo * a, lo * b, hi * a, hi * b)
            lo, hi = min(cands), max(cands)
        if hits and hits[0].exponent == -1:
            # d/dq (q^-1 * rest) = -q^-2 * rest
            qa, qb = rng(hits[0].ref)
            if qa <= 0.0 <= qb:
                raise SignatureError("inverse factor range crosses zero")
            s = max(abs(qa), abs(qb)) ** -2, min(abs(qa), abs(qb)) ** -2
            cands = (-lo * s[0], -lo * s[1], -hi * s[0], -hi * s[1])
            lo, hi = min(cands), max(cands)
        dlo += lo
        dhi += hi
    return dlo, dhi


def _branch_ranges(
    holder: Union[EntityModel, Block],
    branch: Branch,
    param_boxes: Mapping[str, tuple[float, float]],
    w_boxes: Mapping[str, tuple[float, float]],
) -> dict[tuple, tuple[float, float]]:
    """Value ranges per local symbol for sign analysis within one branch."""
    out: dict[tuple, tuple[float, float]] = {}
    for name, var in holder.vars.items():
        lo, hi = var.effective_bounds()
        if var.kind == VarKind.PARAMETER:
            v = holder.param_values.get(name, 0.0)
            lo, hi = param_boxes.get(name, (v, v))
        elif var.kind == VarKind.DISTURBANCE and name in w_boxes:
            lo, hi = w_boxes[name]
        if branch.guard is not None and name == branch.guard[0]:
            if branch.guard[1] == ">=":
                lo = max(lo, 0.0)
            else:
                hi = min(hi, 0.0)
        out[(_entity_of(holder), name)] = (lo, hi)
    return out


def _entity_of(holder: Union[EntityModel, Block]) -> str:
    return holder.path if isinstance(holder, Block) else ""


def derive_signature(
    holder: Union[EntityModel, Block],
    param_boxes: Optional[Mapping[str, tuple[float, float]]] = None,
    w_boxes: Optional[Mapping[str, tuple[float, float]]] = None,
) -> MonotoneSignature:
    """Structural per-branch signs of df/dq for every symbol the dynamics use."""
    param_boxes = dict(param_boxes or holder.param_uncertainty)
    w_boxes = dict(w_boxes or {})
    signs: dict[str, dict[str, dict[tuple, int]]] = {}
    for br in holder.branches:
        ranges = _branch_ranges(holder, br, param_boxes, w_boxes)
        per_state: dict[str, dict[tuple, int]] = {}
        for state, expr in br.dynamics.items():
            d: dict[tuple, int] = {}
            for ref in expr.refs():
                name = ref.name
                var = holder.vars.get(name)
                if var is None:
                    raise SignatureError(f"dynamics reference unknown symbol {name!r}")
                # signs only matter for interval-valued quantities
                if var.kind == VarKind.PARAMETER and name not in param_boxes:
                    continue
                if var.kind == VarKind.INPUT:
                    continue
                key = ref.key()
                lo, hi = _derivative_interval(expr, key, ranges)
                s = _interval_sign(lo, hi)
                if s is None:
                    raise SignatureError(
                        f"sign of d({state}')/d({key[1]}) is unstable on branch {br.name!r}: [{lo:g}, {hi:g}]"
                    )
                d[key] = s
            per_state[state] = d
        signs[br.name] = per_state
    return MonotoneSignature(signs)


def validate_signature(
    holder: Union[EntityModel, Block],
    sig: MonotoneSignature,
    param_boxes: Optional[Mapping[str, tuple[float, float]]] = None,
    w_boxes: Optional[Mapping[str, tuple[float, float]]] = None,
    samples: int = 32,
    tol: float = 1e-7,
    seed: int = 0,
) -> None:
    """Sampled finite-difference check of declared signs; raises on conflict."""
    rng = np.random.default_rng(seed)
    param_boxes = dict(param_boxes or (holder.param_uncertainty or {}))
    w_boxes = dict(w_boxes or {})
    for br in holder.branches:
        ranges = _branch_ranges(holder, br, param_boxes, w_boxes)
        keys = sorted(ranges)
        for _ in range(samples):
            point = {}
            for k in keys:
                lo, hi = ranges[k]
                lo = max(lo, -1e6)
                hi = min(hi, 1e6)
                point[k] = rng.uniform(lo, hi) if hi > lo else lo
            for state, expr in br.dynamics.items():
                for ref in expr.refs():
                    key = ref.key()
                    lo, hi = ranges[key]
                    if hi <= lo:
                        continue
                    h = max(1e-6 * (hi - lo), 1e-9)
                    up = dict(point)
                    dn = dict(point)
                    up[key] = min(point[key] + h, hi)
                    dn[key] = max(point[key] - h, lo)
                    if up[key] <= dn[key]:
                        continue
                    vals_up = {r: up[r.key()] for r in expr.refs()}
                    vals_dn = {r: dn[r.key()] for r in expr.refs()}
                    fd = (expr.evaluate(vals_up) - expr.evaluate(vals_dn)) / (up[key] - dn[key])
                    declared = sig.sign(br.name, state, key)
                    if declared is None:
                        continue
                    if declared > 0 and fd < -tol:
                        raise SignatureError(f"{state}/{key}: declared +, sampled {fd:g}")
                    if declared < 0 and fd > tol:
                        raise SignatureError(f"{state}/{key}: declared -, sampled {fd:g}")
                    if declared == 0 and abs(fd) > tol:
                        raise SignatureError(f"{state}/{key}: declared 0, sampled {fd:g}")


# ---------------------------------------------------------------------------
# bound propagation (reachable-set step)
# ---------------------------------------------------------------------------


def propagate_bounds(
    holder: Union[EntityModel, Block],
    sig: Optional[MonotoneSignature],
    x0: Mapping[str, float],
    u: Sequence[Mapping[str, float]],
    W: Optional[Mapping[str, IntervalBox]] = None,
    param_boxes: Optional[Mapping[str, tuple[float, float]]] = None,
) -> BoundedTrajectory:
    """Propagate state bounds under interval parameter/disturbance uncertainty.

    ``u`` holds per-step input dicts (length = number of steps); ``W`` maps
    disturbance names to per-step IntervalBoxes over the same length;
    ``param_boxes`` maps parameter names to static boxes. The signature is
    derived structurally when not supplied.
    """
    W = dict(W or {})
    param_boxes = dict(param_boxes or (holder.param_uncertainty or {}))
    states = [n for n, v in holder.vars.items() if v.kind == VarKind.STATE]
    if not states:
        raise ValueError("no states to propagate")
    steps = len(u)
    if sig is None:
        w_rng = {n: (float(np.min(b.lower)), float(np.max(b.upper))) for n, b in W.items()}
        sig = derive_signature(holder, param_boxes, w_rng)

    lo = np.zeros((steps + 1, len(states)))
    hi = np.zeros((steps + 1, len(states)))
    for j, s in enumerate(states):
        v = x0[s]
        if isinstance(v, (tuple, list)):
            lo[0, j], hi[0, j] = float(v[0]), float(v[1])
        else:
            lo[0, j] = hi[0, j] = float(v)

    for t in range(steps):
        branch = holder.select_branch(dict(u[t]))
        if branch is None:
            raise ValueError("holder has no dynamics branches")
        for j, s in enumerate(states):
            expr = branch.dynamics[s]
            lo_vals: dict[VarRef, float] = {}
            hi_vals: dict[VarRef, float] = {}
            for ref in expr.refs():
                name = ref.name
                var = holder.vars.get(name)
                if var is None:
                    raise KeyError(f"branch dynamics reference unknown symbol {name!r}")
                sgn = sig.sign(branch.name, s, ref.key())
                if var.kind == VarKind.STATE:
                    k = states.index(name)
                    box = (lo[t, k], hi[t, k])
                elif var.kind == VarKind.INPUT:
                    v = float(u[t][name])
                    box = (v, v)
                elif var.kind == VarKind.DISTURBANCE:
                    if name in W:
                        box = (float(W[name].lower[t]), float(W[name].upper[t]))
                    else:
                        raise KeyError(f"no disturbance box/series for {name!r}")
                elif var.kind == VarKind.PARAMETER:
                    if name in param_boxes:
                        box = tuple(param_boxes[name])
                    else:
                        v = holder.param_values[name]
                        box = (v, v)
                else:
                    raise KeyError(f"dynamics reference algebraic symbol {name!r}; inline it into the branch")
                if sgn is None:
                    if box[1] - box[0] > 1e-15:
                        raise SignatureError(
                            f"no declared sign for interval-valued {name!r} in branch {branch.name!r}"
                        )
                    sgn = 0
                lo_vals[ref] = box[0] if sgn >= 0 else box[1]
                hi_vals[ref] = box[1] if sgn >= 0 else box[0]
            lo[t + 1, j] = expr.evaluate(lo_vals)
            hi[t + 1, j] = expr.evaluate(hi_vals)
            if lo[t + 1, j] > hi[t + 1, j]:
                lo[t + 1, j], hi[t + 1, j] = hi[t + 1, j], lo[t + 1, j]
    return BoundedTrajectory(states, lo, hi)


# ---------------------------------------------------------------------------
# OCP robustification (symbolic)
# ---------------------------------------------------------------------------

SUFFIX_LO, SUFFIX_HI = "__lo", "__hi"


@dataclass(frozen=True)
class ScenarioDim:
    """One {lo, hi} dimension of the cost-scenario hypercube."""

    kind: str      # "state" | "param" | "disturbance"
    block: str
    name: str
    per_step: bool = False     # disturbance series enumerate per step
    worst: int = 1             # cost-increasing endpoint: +1 -> hi, -1 -> lo


def _safe_mul_interval(lo: float, hi: float, a: float, b: float) -> tuple[float, float]:
    def mul(x: float, y: float) -> float:
        if x == 0.0 or y == 0.0:
            return 0.0
        return x * y

    cands = (mul(lo, a), mul(lo, b), mul(hi, a), mul(hi, b))
    return min(cands), max(cands)


def _model_ranges(m: GlobalModel) -> dict[tuple, tuple[float, float]]:
    out: dict[tuple, tuple[float, float]] = {}
    for path, blk in m.blocks.items():
        for name, var in blk.vars.items():
            if var.kind == VarKind.PARAMETER:
                if name in blk.param_uncertainty:
                    out[(path, name)] = blk.param_uncertainty[name]
                else:
                    v = blk.param_values.get(name, 0.0)
                    out[(path, name)] = (v, v)
            else:
                out[(path, name)] = var.effective_bounds()
    return out


def _expr_derivative_sign(expr: LinearExpr, key: tuple, ranges: Mapping[tuple, tuple[float, float]]) -> int:
    dlo = dhi = 0.0
    for t in expr.terms:
        hits = [f for f in t.factors if f.ref.key() == key]
        var_hit = t.var is not None and t.var.key() == key
        if not hits and not var_hit:
            continue
        if (len(hits) + (1 if var_hit else 0)) > 1:
            raise SignatureError(f"repeated occurrence of {key} in one term")
        lo, hi = t.coeff, t.coeff
        for f in t.factors:
            if hits and f is hits[0]:
                continue
            a, b = ranges[f.ref.key()]
            if f.exponent == -1:
                if a <= 0.0 <= b:
                    raise SignatureError(f"inverse factor {f.ref} range crosses zero")
                a, b = 1.0 / b, 1.0 / a
            lo, hi = _safe_mul_interval(lo, hi, a, b)
        if t.var is not None and not var_hit:
            a, b = ranges[t.var.key()]
            lo, hi = _safe_mul_interval(lo, hi, a, b)
        if hits and hits[0].exponent == -1:
            qa, qb = ranges[hits[0].ref.key()]
            if qa <= 0.0 <= qb:
                raise SignatureError(f"inverse factor {hits[0].ref} range crosses zero")
            sa, sb = 1.0 / (max(abs(qa), abs(qb)) ** 2), 1.0 / (min(abs(qa), abs(qb)) ** 2)
            lo, hi = _safe_mul_interval(-hi, -lo, sa, sb)
        dlo += lo
        dhi += hi
    s = _interval_sign(dlo, dhi)
    if s is None:
        raise SignatureError(f"sign of derivative wrt {key} unstable: [{dlo:g}, {dhi:g}]")
    return s


def _uncertain_sets(m: GlobalModel, uncertain_disturbances: Optional[set]) -> tuple[set, set]:
    """(uncertain param keys, uncertain disturbance keys) as (path, name)."""
    params = {(p, n) for p, blk in m.blocks.items() for n in blk.param_uncertainty}
    if uncertain_disturbances is not None:
        dists = set(uncertain_disturbances)
    else:
        dists = set()
        for p, blk in m.blocks.items():
            for n, spec in blk.data_bindings.items():
                if isinstance(spec, dict) and spec.get("uncertain", False):
                    dists.add((p, n))
    for p, n in dists:
        var = m.var(p, n)
        if var.kind != VarKind.DISTURBANCE:
            raise ModelError(f"{p}.{n} declared uncertain but is not a disturbance")
    return params, dists


def _uncertain_states(m: GlobalModel, u_params: set, u_dists: set) -> list[tuple[str, str]]:
    uncertain: set[tuple[str, str]] = set()
    changed = True
    while changed:
        changed = False
        for path, blk in m.blocks.items():
            for state, tpl in blk.dynamics.items():
                if (path, state) in uncertain:
                    continue
                hit = False
                for ref in tpl.expr.refs():
                    k = ref.key()
                    if k in u_params or k in u_dists or k in uncertain:
                        hit = True
                        break
                if not hit:
                    # uncertain initial-value parameter renders the state uncertain
                    for t2 in blk.templates:
                        if t2.trange == TimeRange.INITIAL and (path, state) in {r.key() for r in t2.expr.refs()}:
                            if any(r.key() in u_params for r in t2.expr.refs()):
                                hit = True
                                break
                if hit:
                    uncertain.add((path, state))
                    changed = True
    return sorted(uncertain)


def _cost_template_names(blk) -> set[str]:
    out: set[str] = set()
    for cb in blk.cost_blocks:
        out.update(cb.aux_templates)
    return out


def _vertex_map_expr(
    expr: LinearExpr,
    state_map: Mapping[tuple, str],
    factor_sides: Mapping[tuple, int],
    slot_names: Mapping[tuple, tuple[str, str]],
) -> LinearExpr:
    """Map uncertain state refs to bound vars and uncertain factors to vertex
    slots; ``factor_sides`` gives +1 (hi) or -1 (lo) per factor key."""

    def map_ref(r: VarRef) -> VarRef:
        k = r.key()
        if k in state_map:
            return VarRef(r.entity, state_map[k], r.t_offset)
        if k in factor_sides:
            lo_name, hi_name = slot_names[k]
            return VarRef(r.entity, hi_name if factor_sides[k] > 0 else lo_name, r.t_offset)
        return r

    return expr.map_refs(map_ref)


def robustify_ocp(
    m: GlobalModel,
    mode: RobustCostMode,
    uncertain_disturbances: Optional[set] = None,
) -> GlobalModel:
    """Return a robustified copy of the model.

    Every uncertain state gains lower/upper bound state variables with
    vertex-substituted dynamics and initialization; inequalities referencing
    uncertain states are enforced on both bounds; cost-scenario dimensions
    are recorded for the OCP compiler. The input model is not modified.
    """
    import copy as _copy

    from .global_model import RobustInfo

    out = _copy.deepcopy(m)
    u_params, u_dists = _uncertain_sets(out, uncertain_disturbances)
    info = RobustInfo(mode=mode)
    out.robust = info
    if not u_params and not u_dists:
        return out

    ranges = _model_ranges(out)
    u_states = _uncertain_states(out, u_params, u_dists)
    state_map_lo = {(p, s): f"{s}{SUFFIX_LO}" for p, s in u_states}
    state_map_hi = {(p, s): f"{s}{SUFFIX_HI}" for p, s in u_states}

    # vertex slots for uncertain params (values known now) and disturbances
    for p, n in sorted(u_params):
        blk = out.block(p)
        lo, hi = blk.param_uncertainty[n]
        for side, val in ((SUFFIX_LO, lo), (SUFFIX_HI, hi)):
            name = f"{n}{side}"
            if name not in blk.vars:
                blk.vars[name] = SymbolicVar(name, VarKind.PARAMETER)
                blk.param_values[name] = val
        info.vertex_params[(p, n)] = (f"{n}{SUFFIX_LO}", f"{n}{SUFFIX_HI}")
        ranges[(p, f"{n}{SUFFIX_LO}")] = (lo, lo)
        ranges[(p, f"{n}{SUFFIX_HI}")] = (hi, hi)
    for p, n in sorted(u_dists):
        blk = out.block(p)
        base = blk.vars[n]
        for side in (SUFFIX_LO, SUFFIX_HI):
            name = f"{n}{side}"
            if name not in blk.vars:
                blk.vars[name] = SymbolicVar(name, VarKind.DISTURBANCE, base.domain, base.bounds, base.indexed)
        info.vertex_disturbances[(p, n)] = (f"{n}{SUFFIX_LO}", f"{n}{SUFFIX_HI}")

    slot_names = {k: v for k, v in info.vertex_params.items()}
    slot_names.update(info.vertex_disturbances)
    uncertain_factor_keys = u_params | u_dists

    # bound state variables + vertex-substituted defining templates
    for p, s in u_states:
        blk = out.block(p)
        base = blk.vars[s]
        for suffix, smap in ((SUFFIX_LO, state_map_lo), (SUFFIX_HI, state_map_hi)):
            name = f"{s}{suffix}"
            blk.vars[name] = SymbolicVar(name, VarKind.STATE, base.domain, base.bounds, base.indexed)
        info.bound_vars[(p, s)] = (f"{s}{SUFFIX_LO}", f"{s}{SUFFIX_HI}")

    for p, blk in list(out.blocks.items()):
        cost_tpls = _cost_template_names(blk)
        new_templates: list[ConstraintTemplate] = []
        for tpl in blk.templates:
            refs = {r.key() for r in tpl.expr.refs()}
            touches_states = any(k in refs for k in state_map_lo)
            is_dyn = tpl in blk.dynamics.values()
            is_init = tpl.trange == TimeRange.INITIAL
            factor_keys = [k for k in refs if k in uncertain_factor_keys]
            if not touches_states and not factor_keys:
                continue
            if tpl.name in cost_tpls:
                continue  # handled by cost-scenario machinery
            if is_dyn or (is_init and touches_states):
                defined = next(
                    (
                        t.var
                        for t in tpl.expr.terms
                        if t.var is not None and t.var.key() in state_map_lo and (t.var.t_offset == 1 or is_init)
                    ),
                    None,
                )
                if defined is None:
                    raise ModelError(f"{p}.{tpl.name}: cannot identify defined state for robustification")
                dterm = next(t for t in tpl.expr.terms if t.var == defined)
                # rhs f solves E = c*x' + R = 0  ->  x' = -R/c; sign(df/dq) = -sign(c)*sign(dR/dq)
                c = dterm.coeff
                sides_lo: dict[tuple, int] = {}
                sides_hi: dict[tuple, int] = {}
                for k in factor_keys:
                    sE = _expr_derivative_sign(tpl.expr, k, ranges)
                    sf = -sE if c > 0 else sE
                    # lower bound: q at lo endpoint when df/dq >= 0
                    sides_lo[k] = -1 if sf >= 0 else 1
                    sides_hi[k] = 1 if sf >= 0 else -1
                lo_tpl = ConstraintTemplate(
                    f"{tpl.name}{SUFFIX_LO}",
                    _vertex_map_expr(tpl.expr, state_map_lo, sides_lo, slot_names),
                    tpl.sense,
                    tpl.trange,
                    tpl.window,
                    tpl.inside,
                )
                hi_tpl = ConstraintTemplate(
                    f"{tpl.name}{SUFFIX_HI}",
                    _vertex_map_expr(tpl.expr, state_map_hi, sides_hi, slot_names),
                    tpl.sense,
                    tpl.trange,
                    tpl.window,
                    tpl.inside,
                )
                new_templates += [lo_tpl, hi_tpl]
                if is_dyn:
                    state = next(s2 for s2, t2 in blk.dynamics.items() if t2 is tpl)
                    blk.dynamics[f"{state}{SUFFIX_LO}"] = lo_tpl
                    blk.dynamics[f"{state}{SUFFIX_HI}"] = hi_tpl
            elif tpl.sense != "=" and touches_states:
                sides: dict[tuple, int] = {}
                for k in factor_keys:
                    sE = _expr_derivative_sign(tpl.expr, k, ranges)
                    # worst-case enforcement: <= tightens at max LHS, >= at min LHS
                    sides[k] = sE if tpl.sense == "<=" else -sE
                for suffix, smap in ((SUFFIX_LO, state_map_lo), (SUFFIX_HI, state_map_hi)):
                    new_templates.append(
                        ConstraintTemplate(
                            f"{tpl.name}{suffix}",
                            _vertex_map_expr(tpl.expr, smap, sides, slot_names),
                            tpl.sense,
                            tpl.trange,
                            tpl.window,
                            tpl.inside,
                        )
                    )
            elif tpl.sense != "=" and factor_keys:
                sides = {}
                for k in factor_keys:
                    sE = _expr_derivative_sign(tpl.expr, k, ranges)
                    sides[k] = sE if tpl.sense == "<=" else -sE
                new_templates.append(
                    ConstraintTemplate(
                        f"{tpl.name}__rob",
                        _vertex_map_expr(tpl.expr, {}, sides, slot_names),
                        tpl.sense,
                        tpl.trange,
                        tpl.window,
                        tpl.inside,
                    )
                )
            elif touches_states:
                raise ModelError(
                    f"{p}.{tpl.name}: equality over uncertain state outside dynamics/init/cost machinery"
                )
        blk.templates.extend(new_templates)

    # power flow constraints must never touch bound trajectories
    bound_names = {(p, v) for (p, s), (lo_n, hi_n) in info.bound_vars.items() for v in (lo_n, hi_n)}
    for tpl in out.powerflow_templates:
        for r in tpl.expr.refs():
            if r.key() in bound_names:
                raise ModelError(f"power flow constraint {tpl.name} references bound variable {r}")

    # cost-scenario dimensions
    non_cost_factor_keys: set[tuple] = set()
    for p, blk in out.blocks.items():
        cost_tpls = _cost_template_names(blk)
        for tpl in blk.templates:
            if tpl.name in cost_tpls or tpl.name.endswith((SUFFIX_LO, SUFFIX_HI, "__rob")):
                continue
            for r in tpl.expr.refs():
                if r.key() in uncertain_factor_keys:
                    non_cost_factor_keys.add(r.key())
    cost_only = uncertain_factor_keys - non_cost_factor_keys

    dep_blocks: set[tuple[str, str]] = set()
    state_dims: list[ScenarioDim] = []
    factor_dims: list[ScenarioDim] = []
    seen_dims: set[tuple] = set()
    for path, cb_name in out.objective_terms:
        blk = out.block(path)
        cb = next(c for c in blk.cost_blocks if c.name == cb_name)
        exprs = [cb.expr] + [t.expr for t in blk.templates if t.name in cb.aux_templates]
        refs = {r.key() for e in exprs for r in e.refs()}
        dep = False
        for k in sorted(refs):
            if k in state_map_lo and ("state", k) not in seen_dims:
                state_dims.append(ScenarioDim("state", k[0], k[1]))
                seen_dims.add(("state", k))
                dep = True
            elif k in state_map_lo:
                dep = True
            if k in cost_only and ("factor", k) not in seen_dims:
                kind = "param" if k in u_params else "disturbance"
                worst = 1
                try:
                    # cost-increasing endpoint from the defining equality
                    cost_tpl = next(t for t in blk.templates if t.name in cb.aux_templates and k in {r.key() for r in t.expr.refs()})
                    cvar = next(t.var for t in cost_tpl.expr.terms if t.var is not None and t.var.key() == (path, "cost"))
                    cterm = next(t for t in cost_tpl.expr.terms if t.var == cvar)
                    sE = _expr_derivative_sign(cost_tpl.expr, k, ranges)
                    worst = (-sE if cterm.coeff > 0 else sE) or 1
                except (StopIteration, SignatureError):
                    worst = 0
                factor_dims.append(ScenarioDim(kind, k[0], k[1], per_step=(k in u_dists), worst=worst))
                seen_dims.add(("factor", k))
                dep = True
            elif k in cost_only:
                dep = True
        if dep:
            dep_blocks.add((path, cb_name))

    info.scenarios = state_dims + factor_dims
    info.dependent_cost_blocks = dep_blocks
    return out
