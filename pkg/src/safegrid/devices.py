"""Built-in entity models.

Sign convention everywhere: consumption positive, generation negative, grid
import positive. Device dynamics are per-step (sample time enters only via
horizon bookkeeping).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .bigm import big_m_indicator, big_m_product
from .expr import Factor, LinearExpr, Term, VarRef
from .symbolic import (
    AlgebraicRule,
    Branch,
    ConstraintTemplate,
    CostBlock,
    Domain,
    EntityModel,
    SymbolicVar,
    TimeRange,
    VarKind,
)

INF = float("inf")


def _term(coeff: float, var: Optional[VarRef] = None, *factors: VarRef, inverse: Sequence[VarRef] = ()) -> Term:
    fs = tuple(Factor(f) for f in factors) + tuple(Factor(f, -1) for f in inverse)
    return Term(coeff, var, fs)


# ---------------------------------------------------------------------------
# battery
# ---------------------------------------------------------------------------


@dataclass
class BatteryParams:
    rho: float = 0.0                      # cost of wear, currency/kWh
    eta_c: float = 1.0                    # charge efficiency
    eta_d: float = 1.0                    # discharge efficiency
    eta_s: float = 1.0                    # self-discharge retention
    p_bounds: tuple[float, float] = (-5.0, 5.0)   # kW
    soc_bounds: tuple[float, float] = (0.0, 10.0)  # kWh
    soc_init: float = 5.0                 # kWh
    uncertain: dict[str, tuple[float, float]] = field(default_factory=dict)

    def validate(self) -> None:
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        for nm, v in (("eta_c", self.eta_c), ("eta_s", self.eta_s)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{nm} must be in [0, 1]")
        if not 0.0 < self.eta_d <= 1.0:
            raise ValueError("eta_d must be in (0, 1]")
        if self.p_bounds[0] > self.p_bounds[1]:
            raise ValueError("p_bounds inverted")
        if self.soc_bounds[0] < 0 or self.soc_bounds[0] > self.soc_bounds[1]:
            raise ValueError("soc_bounds must be ordered and nonnegative")
        if not self.soc_bounds[0] <= self.soc_init <= self.soc_bounds[1]:
            raise ValueError("soc_init outside soc_bounds")
        known = {"rho", "eta_c", "eta_d", "eta_s", "soc_init"}
        for nm in self.uncertain:
            if nm not in known:
                raise ValueError(f"unknown uncertain parameter {nm!r}")


def battery_model(params: BatteryParams, linear: bool = False) -> EntityModel:
    """Energy storage per the piecewise-linear wear/efficiency model.

    MIP form: indicator ec (ec=1 <=> p >= 0) with product variables
    pc = ec*p (charging power) and pd = p - pc (discharging power), so
        soc[t+1] = eta_s*soc[t] + eta_c*pc[t] + (1/eta_d)*pd[t]
        cost[t]  = rho*pc[t] - rho*pd[t].
    Linear form: split p = p_plus - p_minus without binaries; relies on the
    wear cost making simultaneous charge/discharge suboptimal.
    """
    params.validate()
    e = EntityModel("d", "battery_linear" if linear else "battery")
    p_lo, p_hi = params.p_bounds
    e.add_var(SymbolicVar("p", VarKind.INPUT, Domain.REAL, (p_lo, p_hi)))
    e.declare_state("soc", params.soc_bounds, params.soc_init, Domain.NONNEG)
    e.declare_param("rho", params.rho, params.uncertain.get("rho"))
    e.declare_param("eta_c", params.eta_c, params.uncertain.get("eta_c"))
    e.declare_param("eta_d", params.eta_d, params.uncertain.get("eta_d"))
    e.declare_param("eta_s", params.eta_s, params.uncertain.get("eta_s"))
    if "soc_init" in params.uncertain:
        e.param_uncertainty["soc_init"] = params.uncertain["soc_init"]

    soc, p = e.ref("soc"), e.ref("p")
    rho, eta_c, eta_d, eta_s = e.ref("rho"), e.ref("eta_c"), e.ref("eta_d"), e.ref("eta_s")
    e.add_var(SymbolicVar("cost", VarKind.ALGEBRAIC, Domain.REAL))
    cost = e.ref("cost")

    if not linear:
        big_m_indicator(e, LinearExpr.var(p), ">=", name="ec")
        big_m_product(e, "ec", "p", name="pc", bounds=(0.0, max(p_hi, 0.0)))
        pc = e.ref("pc")
        e.add_var(SymbolicVar("pd", VarKind.ALGEBRAIC, Domain.REAL, (min(p_lo, 0.0), 0.0)))
        pd = e.ref("pd")
        e.add_template(ConstraintTemplate("pd_def", LinearExpr.var(pd) - LinearExpr.var(p) + LinearExpr.var(pc), "="))
        e.set_dynamics(
            "soc",
            LinearExpr((_term(1.0, soc, eta_s), _term(1.0, pc, eta_c), _term(1.0, pd, inverse=(eta_d,)))),
        )
        e.add_template(
            ConstraintTemplate(
                "cost_def",
                LinearExpr.var(cost) - LinearExpr((_term(1.0, pc, rho), _term(-1.0, pd, rho))),
                "=",
            )
        )
        e.cost_blocks.append(CostBlock("wear", LinearExpr.var(cost), ["cost"], ["cost_def"]))
        e.branches = [
            Branch("charge", ("p", ">="), {"soc": LinearExpr((_term(1.0, soc, eta_s), _term(1.0, p, eta_c)))}),
            Branch("discharge", ("p", "<"), {"soc": LinearExpr((_term(1.0, soc, eta_s), _term(1.0, p, inverse=(eta_d,))))}),
        ]
        zero = LinearExpr()
        e.algebraic_rules = [
            AlgebraicRule("ec", {"charge": LinearExpr((), 1.0), "discharge": zero}, True),
            AlgebraicRule("pc", {"charge": LinearExpr.var(p), "discharge": zero}, True),
            AlgebraicRule("pd", {"charge": zero, "discharge": LinearExpr.var(p)}, True),
            AlgebraicRule(
                "cost",
                {"charge": LinearExpr((_term(1.0, p, rho),)), "discharge": LinearExpr((_term(-1.0, p, rho),))},
                True,
            ),
        ]
    else:
        e.add_var(SymbolicVar("p_plus", VarKind.ALGEBRAIC, Domain.NONNEG, (0.0, max(p_hi, 0.0))))
        e.add_var(SymbolicVar("p_minus", VarKind.ALGEBRAIC, Domain.NONNEG, (0.0, max(-p_lo, 0.0))))
        pp, pm = e.ref("p_plus"), e.ref("p_minus")
        e.add_template(ConstraintTemplate("split_def", LinearExpr.var(p) - LinearExpr.var(pp) + LinearExpr.var(pm), "="))
        e.set_dynamics(
            "soc",
            LinearExpr((_term(1.0, soc, eta_s), _term(1.0, pp, eta_c), _term(-1.0, pm, inverse=(eta_d,)))),
        )
        e.add_template(
            ConstraintTemplate(
                "cost_def",
                LinearExpr.var(cost) - LinearExpr((_term(1.0, pp, rho), _term(1.0, pm, rho))),
                "=",
            )
        )
        e.cost_blocks.append(CostBlock("wear", LinearExpr.var(cost), ["cost"], ["cost_def"]))
        e.branches = [
            Branch("charge", ("p", ">="), {"soc": LinearExpr((_term(1.0, soc, eta_s), _term(1.0, p, eta_c)))}),
            Branch("discharge", ("p", "<"), {"soc": LinearExpr((_term(1.0, soc, eta_s), _term(1.0, p, inverse=(eta_d,))))}),
        ]
        zero = LinearExpr()
        e.algebraic_rules = [
            AlgebraicRule("p_plus", {"charge": LinearExpr.var(p), "discharge": zero}, True),
            AlgebraicRule("p_minus", {"charge": zero, "discharge": LinearExpr.var(p, -1.0)}, True),
            AlgebraicRule(
                "cost",
                {"charge": LinearExpr((_term(1.0, p, rho),)), "discharge": LinearExpr((_term(-1.0, p, rho),))},
                True,
            ),
        ]
    return e


# ---------------------------------------------------------------------------
# heat pump
# ---------------------------------------------------------------------------


@dataclass
class HeatPumpParams:
    a: float = 0.9                       # thermal retention
    b: float = 0.1                       # outdoor coupling
    c: float = 1.0                       # heat gain per kW electrical per COP unit
    p_max: float = 3.0                   # kW
    temp_bounds: tuple[float, float] = (20.0, 22.0)   # deg C
    t_init: float = 21.0
    t_set: float = 21.0
    comfort_weight: float = 1.0
    comfort_knee: Optional[float] = None   # second convex segment beyond this deviation
    comfort_weight2: float = 0.0           # extra marginal weight past the knee
    quadratic_reward: bool = True
    t_out_bounds: tuple[float, float] = (-20.0, 45.0)
    cop_bounds: tuple[float, float] = (1.0, 6.0)
    uncertain: dict[str, tuple[float, float]] = field(default_factory=dict)

    def validate(self) -> None:
        if not 0.0 < self.a < 1.0:
            raise ValueError("a must be in (0, 1)")
        if self.b < 0 or self.c < 0:
            raise ValueError("b and c must be >= 0")
        if self.a + self.b > 1.0 + 1e-12:
            raise ValueError("a + b must be <= 1")
        if self.p_max <= 0:
            raise ValueError("p_max must be positive")
        if self.temp_bounds[0] > self.temp_bounds[1]:
            raise ValueError("temp_bounds inverted")
        if not self.temp_bounds[0] <= self.t_init <= self.temp_bounds[1]:
            raise ValueError("t_init outside temp_bounds")
        if self.comfort_weight < 0 or self.comfort_weight2 < 0:
            raise ValueError("comfort weights must be >= 0")
        if self.comfort_knee is not None and self.comfort_knee <= 0:
            raise ValueError("comfort_knee must be positive")


def heat_pump_model(params: HeatPumpParams) -> EntityModel:
    """First-order linear building/heat-pump thermal model.

    T_in[t+1] = a*T_in[t] + b*T_out[t] + c*COP[t]*p[t]; comfort cost inside
    OCPs is the absolute deviation |T_in - t_set| (piecewise-linear convex
    surrogate); the quadratic form is kept for reward reporting.
    """
    params.validate()
    e = EntityModel("d", "heat_pump")
    e.add_var(SymbolicVar("p", VarKind.INPUT, Domain.REAL, (0.0, params.p_max)))
    e.declare_state("t_in", params.temp_bounds, params.t_init)
    e.add_var(SymbolicVar("t_out", VarKind.DISTURBANCE, Domain.REAL, params.t_out_bounds))
    e.add_var(SymbolicVar("cop", VarKind.DISTURBANCE, Domain.REAL, params.cop_bounds))
    e.declare_param("a", params.a, params.uncertain.get("a"))
    e.declare_param("b", params.b, params.uncertain.get("b"))
    e.declare_param("c", params.c, params.uncertain.get("c"))
    e.declare_param("t_set", params.t_set)
    e.declare_param("comfort_weight", params.comfort_weight)

    t_in, p = e.ref("t_in"), e.ref("p")
    t_out, cop = e.ref("t_out"), e.ref("cop")
    a, b, c, t_set, w = e.ref("a"), e.ref("b"), e.ref("c"), e.ref("t_set"), e.ref("comfort_weight")

    rhs = LinearExpr((_term(1.0, t_in, a), _term(1.0, None, b, t_out), _term(1.0, p, c, cop)))
    e.set_dynamics("t_in", rhs)

    e.add_var(SymbolicVar("dev", VarKind.ALGEBRAIC, Domain.NONNEG, (0.0, INF)))
    e.add_var(SymbolicVar("cost", VarKind.ALGEBRAIC, Domain.REAL))
    dev, cost = e.ref("dev"), e.ref("cost")
    e.add_template(
        ConstraintTemplate("dev_hi", LinearExpr.var(dev) - LinearExpr.var(t_in) + LinearExpr((_term(1.0, None, t_set),)), ">=")
    )
    e.add_template(
        ConstraintTemplate("dev_lo", LinearExpr.var(dev) + LinearExpr.var(t_in) - LinearExpr((_term(1.0, None, t_set),)), ">=")
    )
    cost_rhs = LinearExpr((_term(1.0, dev, w),))
    aux_vars = ["dev", "cost"]
    aux_tpls = ["dev_hi", "dev_lo", "cost_def"]
    if params.comfort_knee is not None:
        e.declare_param("comfort_knee", params.comfort_knee)
        e.declare_param("comfort_weight2", params.comfort_weight2)
        e.add_var(SymbolicVar("dev2", VarKind.ALGEBRAIC, Domain.NONNEG, (0.0, INF)))
        dev2 = e.ref("dev2")
        e.add_template(
            ConstraintTemplate(
                "dev2_def",
                LinearExpr.var(dev2) - LinearExpr.var(dev) + LinearExpr((_term(1.0, None, e.ref("comfort_knee")),)),
                ">=",
            )
        )
        cost_rhs = cost_rhs + LinearExpr((_term(1.0, dev2, e.ref("comfort_weight2")),))
        aux_vars.insert(1, "dev2")
        aux_tpls.insert(2, "dev2_def")
    e.add_template(ConstraintTemplate("cost_def", LinearExpr.var(cost) - cost_rhs, "="))
    e.cost_blocks.append(CostBlock("comfort", LinearExpr.var(cost), aux_vars, aux_tpls))

    e.branches = [Branch("on", None, {"t_in": rhs})]
    e.algebraic_rules = [
        AlgebraicRule("dev", {None: LinearExpr.var(t_in) - LinearExpr((_term(1.0, None, t_set),))}, False, absolute=True),
    ]
    if params.comfort_knee is not None:
        e.algebraic_rules.append(
            AlgebraicRule(
                "dev2",
                {None: LinearExpr.var(dev) - LinearExpr((_term(1.0, None, e.ref("comfort_knee")),))},
                False,
                clip="pos",
            )
        )
        e.algebraic_rules.append(
            AlgebraicRule(
                "cost",
                {None: LinearExpr((_term(1.0, dev, w), _term(1.0, dev2, e.ref("comfort_weight2"))))},
                False,
            )
        )
    else:
        e.algebraic_rules.append(AlgebraicRule("cost", {None: LinearExpr((_term(1.0, dev, w),))}, False))
    if params.quadratic_reward:
        tset, cw = params.t_set, params.comfort_weight

        def quad_comfort(values, t, path):
            d = values[(path, "t_in", t)] - tset
            return cw * d * d

        e.reward_shapes["comfort"] = quad_comfort
    return e


# ---------------------------------------------------------------------------
# load / renewable / generator / EV
# ---------------------------------------------------------------------------


def load_model(w_bounds: tuple[float, float] = (0.0, INF)) -> EntityModel:
    """Inflexible load: p = w, consumption positive."""
    e = EntityModel("d", "load")
    e.add_var(SymbolicVar("p", VarKind.ALGEBRAIC, Domain.REAL, w_bounds))
    e.add_var(SymbolicVar("w", VarKind.DISTURBANCE, Domain.REAL, w_bounds))
    e.add_template(ConstraintTemplate("bind", LinearExpr.var(e.ref("p")) - LinearExpr((_term(1.0, None, e.ref("w")),)), "="))
    e.algebraic_rules = [AlgebraicRule("p", {None: LinearExpr((_term(1.0, None, e.ref("w")),))}, True)]
    return e


def renewable_model(curtailable: bool = False, p_min: float = -INF, w_bounds: Optional[tuple[float, float]] = None) -> EntityModel:
    """Renewable generator; available generation w <= 0 (negative = produce).

    Non-curtailable: p = w. Curtailable: w <= p <= 0 with p an input bounded
    below by ``p_min`` (capacity, negative).
    """
    if w_bounds is None:
        w_bounds = (p_min, 0.0)
    if w_bounds[1] > 0:
        raise ValueError("renewable availability must be <= 0 (generation negative)")
    e = EntityModel("d", "renewable_curt" if curtailable else "renewable")
    e.add_var(SymbolicVar("w", VarKind.DISTURBANCE, Domain.REAL, w_bounds))
    w = e.ref("w")
    if curtailable:
        if p_min == -INF:
            raise ValueError("curtailable renewable needs a finite p_min capacity")
        e.add_var(SymbolicVar("p", VarKind.INPUT, Domain.REAL, (p_min, 0.0)))
        e.add_template(
            ConstraintTemplate("avail", LinearExpr.var(e.ref("p")) - LinearExpr((_term(1.0, None, w),)), ">=")
        )
    else:
        e.add_var(SymbolicVar("p", VarKind.ALGEBRAIC, Domain.REAL, w_bounds))
        e.add_template(ConstraintTemplate("bind", LinearExpr.var(e.ref("p")) - LinearExpr((_term(1.0, None, w),)), "="))
        e.algebraic_rules = [AlgebraicRule("p", {None: LinearExpr((_term(1.0, None, w),))}, True)]
    return e


def generator_model(ramp: float, p_bounds: tuple[float, float] = (-5.0, 0.0), marginal_cost: float = 0.0) -> EntityModel:
    """Conventional generator with a per-step ramp-rate limit (generation negative)."""
    if ramp <= 0:
        raise ValueError("ramp must be positive")
    if p_bounds[0] > p_bounds[1] or p_bounds[1] > 0:
        raise ValueError("generator p_bounds must be ordered with p <= 0")
    e = EntityModel("d", "generator")
    e.add_var(SymbolicVar("p", VarKind.INPUT, Domain.REAL, p_bounds))
    p = e.ref("p")
    e.declare_param("ramp", ramp)
    step = LinearExpr.var(e.ref("p", 1)) - LinearExpr.var(p)
    e.add_template(ConstraintTemplate("ramp_up", step - LinearExpr((_term(1.0, None, e.ref("ramp")),)), "<=", TimeRange.DYN))
    e.add_template(ConstraintTemplate("ramp_dn", step + LinearExpr((_term(1.0, None, e.ref("ramp")),)), ">=", TimeRange.DYN))
    if marginal_cost:
        e.declare_param("mc", marginal_cost)
        e.add_var(SymbolicVar("cost", VarKind.ALGEBRAIC, Domain.REAL))
        e.add_template(
            ConstraintTemplate("cost_def", LinearExpr.var(e.ref("cost")) + LinearExpr((_term(1.0, p, e.ref("mc")),)), "=")
        )
        e.cost_blocks.append(CostBlock("fuel", LinearExpr.var(e.ref("cost")), ["cost"], ["cost_def"]))
        e.algebraic_rules = [AlgebraicRule("cost", {None: LinearExpr((_term(-1.0, p, e.ref("mc")),))}, True)]
    return e


@dataclass
class EVParams:
    battery: BatteryParams = field(default_factory=BatteryParams)
    t_arr: int = 0            # arrival step (episode time, inclusive)
    t_dep: int = 8            # departure step (episode time, exclusive for charging)
    e_dep: float = 8.0        # required energy at departure, kWh

    def validate(self) -> None:
        self.battery.validate()
        if not 0 <= self.t_arr < self.t_dep:
            raise ValueError("need 0 <= t_arr < t_dep")
        if self.e_dep > self.battery.soc_bounds[1]:
            raise ValueError("required departure energy exceeds soc upper bound")


def ev_model(params: EVParams) -> EntityModel:
    """Electric vehicle: battery active inside [t_arr, t_dep), departure-energy
    trajectory constraint at t_dep (absolute episode time)."""
    params.validate()
    e = battery_model(params.battery)
    e.kind_name = "ev"
    e.declare_param("e_dep", params.e_dep)
    # plugged-in window: p = 0 outside it
    e.add_template(
        ConstraintTemplate("away", LinearExpr.var(e.ref("p")), "=", TimeRange.ALL_T, window=(params.t_arr, params.t_dep), inside=False)
    )
    dep = LinearExpr.var(e.ref("soc", params.t_dep)) - LinearExpr((_term(1.0, None, e.ref("e_dep")),))
    e.add_template(ConstraintTemplate("departure_energy", dep, ">=", TimeRange.COUPLED))
    e.window = (params.t_arr, params.t_dep)
    return e


# ---------------------------------------------------------------------------
# buses
# ---------------------------------------------------------------------------


@dataclass
class BusCostSpec:
    mode: str = "energy-cost"  # energy-cost | self-sufficiency | cost-plus-carbon | slack
    phi_buy: float = 0.3       # currency/kWh (series via data binding)
    phi_sell: float = 0.1
    carbon_weight: float = 0.0
    self_sufficiency_weight: float = 1.0

    def validate(self) -> None:
        if self.mode not in ("energy-cost", "self-sufficiency", "cost-plus-carbon", "slack"):
            raise ValueError(f"unknown bus cost mode {self.mode!r}")
        if self.mode in ("energy-cost", "cost-plus-carbon") and self.phi_buy < self.phi_sell:
            raise ValueError("phi_buy must be >= phi_sell (no intra-step arbitrage)")
        if self.mode == "cost-plus-carbon" and self.carbon_weight < 0:
            raise ValueError("carbon_weight must be >= 0")


def bus_model(spec: BusCostSpec, children: Sequence[EntityModel]) -> EntityModel:
    """Bus aggregating child device powers, with its cost-function variant."""
    spec.validate()
    e = EntityModel("n", f"bus_{spec.mode.replace('-', '_')}")
    if spec.mode != "slack" and not children:
        raise ValueError("non-slack bus needs at least one child device")
    e.children = list(children)
    e.add_var(SymbolicVar("p", VarKind.ALGEBRAIC, Domain.REAL))
    p = e.ref("p")

    if spec.mode == "slack":
        if children:
            raise ValueError("slack bus takes no children")
        e.algebraic_rules = [AlgebraicRule("p", {None: LinearExpr()}, True)]  # power flow overrides
        return e

    sum_children = LinearExpr.of(*(Term(1.0, VarRef(f"@{i}", "p")) for i in range(len(children))))
    e.add_template(ConstraintTemplate("aggregate", LinearExpr.var(p) - sum_children, "="))
    e.algebraic_rules = [AlgebraicRule("p", {None: sum_children}, True)]

    e.add_var(SymbolicVar("cost", VarKind.ALGEBRAIC, Domain.REAL))
    cost = e.ref("cost")

    if spec.mode in ("energy-cost", "cost-plus-carbon"):
        e.add_var(SymbolicVar("phi_buy", VarKind.DISTURBANCE, Domain.REAL, (0.0, INF)))
        e.add_var(SymbolicVar("phi_sell", VarKind.DISTURBANCE, Domain.REAL, (0.0, INF)))
        e.disturbance_defaults["phi_buy"] = spec.phi_buy
        e.disturbance_defaults["phi_sell"] = spec.phi_sell
        e.add_var(SymbolicVar("p_plus", VarKind.ALGEBRAIC, Domain.NONNEG, (0.0, INF)))
        e.add_var(SymbolicVar("p_minus", VarKind.ALGEBRAIC, Domain.NONNEG, (0.0, INF)))
        pp, pm = e.ref("p_plus"), e.ref("p_minus")
        e.add_template(ConstraintTemplate("split", LinearExpr.var(p) - LinearExpr.var(pp) + LinearExpr.var(pm), "="))
        expr = LinearExpr((_term(1.0, pp, e.ref("phi_buy")), _term(-1.0, pm, e.ref("phi_sell"))))
        if spec.mode == "cost-plus-carbon":
            e.add_var(SymbolicVar("carbon", VarKind.DISTURBANCE, Domain.REAL, (0.0, INF)))
            e.disturbance_defaults["carbon"] = 0.0
            e.declare_param("carbon_weight", spec.carbon_weight)
            expr = expr + LinearExpr((_term(1.0, pp, e.ref("carbon_weight"), e.ref("carbon")),))
        e.add_template(ConstraintTemplate("cost_def", LinearExpr.var(cost) - expr, "="))
        e.cost_blocks.append(
            CostBlock("energy", LinearExpr.var(cost), ["p_plus", "p_minus", "cost"], ["split", "cost_def"])
        )
        e.algebraic_rules += [
            AlgebraicRule("p_plus", {None: sum_children}, True, clip="pos"),
            AlgebraicRule("p_minus", {None: sum_children}, True, clip="neg"),
            AlgebraicRule("cost", {None: expr}, True),
        ]
    else:  # self-sufficiency
        e.declare_param("ss_weight", spec.self_sufficiency_weight)
        e.add_var(SymbolicVar("s_abs", VarKind.ALGEBRAIC, Domain.NONNEG, (0.0, INF)))
        s = e.ref("s_abs")
        e.add_template(ConstraintTemplate("abs_hi", LinearExpr.var(s) - LinearExpr.var(p), ">="))
        e.add_template(ConstraintTemplate("abs_lo", LinearExpr.var(s) + LinearExpr.var(p), ">="))
        e.add_template(
            ConstraintTemplate("cost_def", LinearExpr.var(cost) - LinearExpr((_term(1.0, s, e.ref("ss_weight")),)), "=")
        )
        e.cost_blocks.append(
            CostBlock("self_sufficiency", LinearExpr.var(cost), ["s_abs", "cost"], ["abs_hi", "abs_lo", "cost_def"])
        )
        e.algebraic_rules += [
            AlgebraicRule("s_abs", {None: sum_children}, True, absolute=True),
            AlgebraicRule("cost", {None: LinearExpr((_term(1.0, s, e.ref("ss_weight")),))}, True),
        ]
    return e


def external_grid_model() -> EntityModel:
    """Slack bus representing the external grid: free power, zero cost."""
    return bus_model(BusCostSpec(mode="slack"), [])


def system_model(buses: Sequence[EntityModel]) -> EntityModel:
    """Root entity holding all buses."""
    e = EntityModel("sys", "system")
    e.children = list(buses)
    return e
