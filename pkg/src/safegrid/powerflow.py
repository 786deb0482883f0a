"""Coupling constraints between buses: active power balance, DC power flow,
and linearized DistFlow for radial networks.

Per-unit line parameters with an explicit base power; all flows are stored in
kW internally. Power flow constraints bind nominal trajectories only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .expr import LinearExpr, Term, VarRef
from .global_model import Block, GlobalModel, ModelError
from .symbolic import AlgebraicRule, ConstraintTemplate, Domain, SymbolicVar, TimeRange, VarKind

INF = float("inf")


@dataclass
class Line:
    from_bus: str  # block path
    to_bus: str
    b: float = 10.0        # susceptance, p.u.
    r: float = 0.01        # resistance, p.u.
    x: float = 0.0         # reactance, p.u.
    limit: float = INF     # kW

    def validate(self) -> None:
        if self.from_bus == self.to_bus:
            raise ModelError("line endpoints must differ")
        if self.b <= 0 and self.r <= 0:
            raise ModelError("line needs positive susceptance (dc) or resistance (lindistflow)")
        if self.limit <= 0:
            raise ModelError("line limit must be positive")


@dataclass
class PowerFlowModel:
    kind: str = "balance"  # balance | dc | lindistflow
    lines: list[Line] = field(default_factory=list)
    slack: Optional[str] = None
    base_power_kw: float = 1000.0
    v_bounds: tuple[float, float] = (0.81, 1.21)  # squared-voltage box, p.u.^2
    q_bus: dict[str, float] = field(default_factory=dict)  # reactive hook, kvar per bus

    def __post_init__(self) -> None:
        if self.kind not in ("balance", "dc", "lindistflow"):
            raise ModelError(f"unknown power flow kind {self.kind!r}")


def _bus_paths(m: GlobalModel) -> list[str]:
    return [p for p, b in m.blocks.items() if b.class_prefix == "n"]


def _check_graph(pf: PowerFlowModel, buses: list[str]) -> None:
    parent = {b: b for b in buses}

    def find(a: str) -> str:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    cyclic = False
    for ln in pf.lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in parent:
                raise ModelError(f"line endpoint {end!r} is not a bus in the model")
        ra, rb = find(ln.from_bus), find(ln.to_bus)
        if ra == rb:
            cyclic = True
        else:
            parent[ra] = rb
    roots = {find(b) for b in buses}
    connected = len(roots) <= 1
    if pf.kind == "dc" and not connected:
        raise ModelError("dc power flow requires a connected network")
    if pf.kind == "lindistflow":
        if not connected:
            raise ModelError("lindistflow requires a connected network")
        if cyclic:
            raise ModelError("lindistflow requires a radial (cycle-free) network")


def _radial_orientation(pf: PowerFlowModel, buses: list[str]) -> list[tuple[Line, str, str]]:
    """Orient lines away from the slack (or first bus): (line, parent, child)."""
    root = pf.slack or buses[0]
    adj: dict[str, list[Line]] = {b: [] for b in buses}
    for ln in pf.lines:
        adj[ln.from_bus].append(ln)
        adj[ln.to_bus].append(ln)
    seen = {root}
    order: list[tuple[Line, str, str]] = []
    frontier = [root]
    while frontier:
        cur = frontier.pop(0)
        for ln in adj[cur]:
            other = ln.to_bus if ln.from_bus == cur else ln.from_bus
            if other in seen:
                continue
            seen.add(other)
            order.append((ln, cur, other))
            frontier.append(other)
    return order


def apply_powerflow(pf: PowerFlowModel, m: GlobalModel) -> GlobalModel:
    """Add line blocks and the power flow constraints (appended last)."""
    buses = _bus_paths(m)
    if pf.slack is not None and pf.slack not in buses:
        raise ModelError(f"slack {pf.slack!r} is not a bus in the model")
    if pf.kind in ("dc", "lindistflow"):
        if not pf.lines:
            raise ModelError(f"{pf.kind} needs lines")
        _check_graph(pf, buses)
    m.powerflow_kind = pf.kind
    m.powerflow = pf

    if pf.kind == "balance":
        expr = LinearExpr.of(*(Term(1.0, VarRef(b, "p")) for b in buses))
        m.powerflow_templates.append(ConstraintTemplate("balance", expr, "="))
        return m

    if pf.kind == "dc":
        for b in buses:
            m.block(b).vars["theta"] = SymbolicVar("theta", VarKind.ALGEBRAIC, Domain.REAL)
        line_blocks: list[tuple[str, Line]] = []
        for ln in pf.lines:
            ln.validate()
            lid = m.fresh_line_id()
            blk = Block(lid, "line", "l", None)
            blk.vars["f"] = SymbolicVar("f", VarKind.ALGEBRAIC, Domain.REAL, (-ln.limit, ln.limit) if ln.limit != INF else None)
            m.blocks[lid] = blk
            line_blocks.append((lid, ln))
            # f = base * b * (theta_i - theta_j)
            k = pf.base_power_kw * ln.b
            m.powerflow_templates.append(
                ConstraintTemplate(
                    f"{lid}_flow",
                    LinearExpr.var(VarRef(lid, "f"))
                    - LinearExpr.var(VarRef(ln.from_bus, "theta"), k)
                    + LinearExpr.var(VarRef(ln.to_bus, "theta"), k),
                    "=",
                )
            )
        for b in buses:
            out_ = [lid for lid, ln in line_blocks if ln.from_bus == b]
            in_ = [lid for lid, ln in line_blocks if ln.to_bus == b]
            expr = LinearExpr.var(VarRef(b, "p"))
            for lid in out_:
                expr = expr + LinearExpr.var(VarRef(lid, "f"))
            for lid in in_:
                expr = expr - LinearExpr.var(VarRef(lid, "f"))
            m.powerflow_templates.append(ConstraintTemplate(f"nodal_{b}", expr, "="))
        slack = pf.slack or buses[0]
        m.powerflow_templates.append(ConstraintTemplate("slack_angle", LinearExpr.var(VarRef(slack, "theta")), "="))
        return m

    # lindistflow
    order = _radial_orientation(pf, buses)
    if len(order) != len(pf.lines):
        raise ModelError("lindistflow orientation failed (disconnected or cyclic)")
    root = pf.slack or buses[0]
    for b in buses:
        m.block(b).vars["v"] = SymbolicVar("v", VarKind.ALGEBRAIC, Domain.REAL, pf.v_bounds)
    q_flow = _reactive_flows(pf, buses, order)
    children: dict[str, list[tuple[str, Line, str]]] = {b: [] for b in buses}
    line_ids: dict[int, str] = {}
    for ln, par, chl in order:
        ln.validate()
        lid = m.fresh_line_id()
        blk = Block(lid, "line", "l", None)
        blk.vars["flow"] = SymbolicVar(
            "flow", VarKind.ALGEBRAIC, Domain.REAL, (-ln.limit, ln.limit) if ln.limit != INF else None
        )
        m.blocks[lid] = blk
        line_ids[id(ln)] = lid
        children[par].append((lid, ln, chl))
    for ln, par, chl in order:
        lid = line_ids[id(ln)]
        # voltage drop: v_child = v_parent - 2 r_pu * P/base - 2 x_pu * Q/base
        coeff = 2.0 * ln.r / pf.base_power_kw
        drop = (
            LinearExpr.var(VarRef(chl, "v"))
            - LinearExpr.var(VarRef(par, "v"))
            + LinearExpr.var(VarRef(lid, "flow"), coeff)
        )
        q_term = 2.0 * ln.x * q_flow.get(id(ln), 0.0) / pf.base_power_kw
        m.powerflow_templates.append(ConstraintTemplate(f"{lid}_vdrop", drop + q_term, "="))
        # flow balance: flow into child = child consumption + flows to grandchildren
        bal = LinearExpr.var(VarRef(lid, "flow")) - LinearExpr.var(VarRef(chl, "p"))
        for glid, _, _ in children[chl]:
            bal = bal - LinearExpr.var(VarRef(glid, "flow"))
        m.powerflow_templates.append(ConstraintTemplate(f"{lid}_balance", bal, "="))
    # root absorbs: p_root + sum(flows out of root) = 0 -> p_root = -(consumption below)
    expr = LinearExpr.var(VarRef(root, "p"))
    for lid, _, _ in children[root]:
        expr = expr + LinearExpr.var(VarRef(lid, "flow"))
    m.powerflow_templates.append(ConstraintTemplate("root_balance", expr, "="))
    m.powerflow_templates.append(ConstraintTemplate("root_voltage", LinearExpr.var(VarRef(root, "v")) - 1.0, "="))
    return m


def _reactive_flows(pf: PowerFlowModel, buses: list[str], order) -> dict[int, float]:
    """Constant reactive branch flows accumulated from the q_bus hook."""
    if not pf.q_bus:
        return {}
    sub: dict[str, float] = {b: pf.q_bus.get(b, 0.0) for b in buses}
    for ln, par, chl in reversed(order):
        sub[par] = sub.get(par, 0.0) + sub[chl]
    return {id(ln): sub[chl] for ln, par, chl in order}


# ---------------------------------------------------------------------------
# numeric solve for the simulator
# ---------------------------------------------------------------------------


def solve_powerflow_numeric(pf: PowerFlowModel, m: GlobalModel, bus_p: dict[str, float]) -> dict[tuple[str, str], float]:
    """Solve the power flow algebraics given non-slack bus powers (kW).

    Returns values for the slack power and every angle/voltage/flow variable.
    Raises ModelError when no slack exists and powers do not balance.
    """
    buses = _bus_paths(m)
    out: dict[tuple[str, str], float] = {}
    slack = pf.slack
    residual = -sum(v for b, v in bus_p.items() if b != slack)
    if slack is None:
        if abs(sum(bus_p.get(b, 0.0) for b in buses)) > 1e-7:
            raise ModelError("power balance violated and no slack bus to absorb the residual")
    else:
        out[(slack, "p")] = residual
        bus_p = dict(bus_p)
        bus_p[slack] = residual

    if pf.kind == "balance":
        return out

    if pf.kind == "dc":
        root = slack or buses[0]
        idx = {b: i for i, b in enumerate(buses)}
        n = len(buses)
        B = np.zeros((n, n))
        for ln in pf.lines:
            k = pf.base_power_kw * ln.b
            i, j = idx[ln.from_bus], idx[ln.to_bus]
            B[i, i] += k
            B[j, j] += k
            B[i, j] -= k
            B[j, i] -= k
        inj = np.array([-bus_p.get(b, 0.0) for b in buses])
        keep = [i for i, b in enumerate(buses) if b != root]
        theta = np.zeros(n)
        if keep:
            theta[keep] = np.linalg.solve(B[np.ix_(keep, keep)], inj[keep])
        lid_iter = (p for p, blk in m.blocks.items() if blk.class_prefix == "l")
        for ln, lid in zip(pf.lines, lid_iter):
            f = pf.base_power_kw * ln.b * (theta[idx[ln.from_bus]] - theta[idx[ln.to_bus]])
            out[(lid, "f")] = f
        for b in buses:
            out[(b, "theta")] = float(theta[idx[b]])
        return out

    # lindistflow
    order = _radial_orientation(pf, buses)
    root = slack or buses[0]
    subtree: dict[str, float] = {b: bus_p.get(b, 0.0) for b in buses}
    for ln, par, chl in reversed(order):
        subtree[par] += subtree[chl]
    q_flow = _reactive_flows(pf, buses, order)
    lids = [p for p, blk in m.blocks.items() if blk.class_prefix == "l"]
    line_of = {id(ln): lids[i] for i, (ln, _, _) in enumerate(order)}
    v: dict[str, float] = {root: 1.0}
    flows: dict[str, float] = {}
    for ln, par, chl in order:
        lid = line_of[id(ln)]
        flow = subtree[chl]
        flows[lid] = flow
        v[chl] = v[par] - 2.0 * ln.r * flow / pf.base_power_kw - 2.0 * ln.x * q_flow.get(id(ln), 0.0) / pf.base_power_kw
    for lid, f in flows.items():
        out[(lid, "flow")] = f
    for b in buses:
        out[(b, "v")] = v[b]
    if slack is None and any(abs(x) > 1e-7 for x in [sum(bus_p.get(b, 0.0) for b in buses)]):
        raise ModelError("lindistflow without slack requires balanced powers")
    return out
