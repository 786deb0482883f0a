"""MPC synthesis, two-stage dispatch, safeguards, imbalance redistribution."""
import numpy as np
import pytest

from safegrid.control import (
    Coalition,
    ControlAssignment,
    ControllerSpec,
    Dispatcher,
    InfeasibleProblem,
    OcpData,
    SafeguardSpec,
    mpc_step,
    redistribute_imbalance,
    safeguard,
)
from safegrid.devices import (
    BatteryParams,
    BusCostSpec,
    battery_model,
    bus_model,
    external_grid_model,
    load_model,
    system_model,
)
from safegrid.global_model import build_global_model
from safegrid.ocp import TerminalSpec, compile_ocp
from safegrid.powerflow import PowerFlowModel
from safegrid.simulate import Simulator
from safegrid.uncertainty import RobustCostMode, robustify_ocp


def household(rho=0.0, soc_init=1.0, p_bounds=(-1, 1), soc_bounds=(0, 2)):
    bat = battery_model(BatteryParams(rho=rho, eta_c=1.0, eta_d=1.0, eta_s=1.0,
                                      p_bounds=p_bounds, soc_bounds=soc_bounds, soc_init=soc_init))
    ld = load_model()
    bus = bus_model(BusCostSpec(phi_buy=0.5, phi_sell=0.01), [bat, ld])
    return build_global_model(system_model([bus]), 8, 1)


def household_data(prices, load, T):
    return OcpData(
        series={
            ("sys.n0", "phi_buy"): np.asarray(prices, float)[: T + 1],
            ("sys.n0", "phi_sell"): np.full(T + 1, 0.01),
            ("sys.n0.d1", "w"): np.asarray(load, float)[: T + 1],
        }
    )


def test_mpc_discharges_at_high_price_first():
    """Prices [0.5, 0.1, 0.4], load 1 each step, soc_0 = 1, wear 0.01:
    the stored kWh goes to the t=0 high-price step, not a cheaper one."""
    m = household(rho=0.01)
    data = household_data([0.5, 0.1, 0.4], [1.0, 1.0, 1.0], T=2)
    res = mpc_step(m, ["sys.n0"], {("sys.n0.d0", "soc"): 1.0}, data, T=2)
    assert res.inputs[("sys.n0.d0", "p")] == pytest.approx(-1.0, abs=1e-8)
    # cross-check the optimum against the independent simplex oracle
    from oracles.brute import problem_to_oracle_form
    from oracles.simplex_oracle import solve_oracle

    prob = res.compiled.problem
    lb = [max(v, -50.0) for v in prob.lb]
    ub = [min(v, 50.0) for v in prob.ub]
    boxed = prob.copy_with_bounds(lb, ub)
    status, obj, _ = solve_oracle(*problem_to_oracle_form(boxed))
    assert status == "optimal"
    assert res.objective == pytest.approx(obj, abs=1e-7)


def test_zero_width_uncertainty_equals_nominal():
    bat = battery_model(BatteryParams(rho=0.01, eta_c=0.95, eta_d=0.95, soc_init=5,
                                      uncertain={"eta_c": (0.95, 0.95)}))
    ld = load_model()
    bus = bus_model(BusCostSpec(phi_buy=0.5, phi_sell=0.01), [bat, ld])
    m = build_global_model(system_model([bus]), 8, 1)
    rm = robustify_ocp(m, RobustCostMode("worst-case"))
    data = household_data([0.5, 0.1, 0.4, 0.2], np.ones(4), T=3)
    x0 = {("sys.n0.d0", "soc"): 5.0}
    nominal = mpc_step(m, ["sys.n0"], x0, data, T=3)
    robust = mpc_step(rm, ["sys.n0"], x0, data, T=3)
    assert robust.objective == pytest.approx(nominal.objective, abs=1e-8)


def test_mpc_infeasibility_is_reported():
    m = household()
    data = household_data(np.full(3, 0.5), np.full(3, 1.0), T=2)
    # initial soc outside bounds -> infeasible initialization
    with pytest.raises(InfeasibleProblem):
        mpc_step(m, ["sys.n0"], {("sys.n0.d0", "soc"): 5.0}, data, T=2)


# ---------------------------------------------------------------------------
# safety filter
# ---------------------------------------------------------------------------


def sg_setup(soc0=1.0, spec=None):
    m = household(soc_init=soc0)
    rm = robustify_ocp(m, RobustCostMode("nominal"))
    data = household_data(np.full(4, 0.5), np.zeros(4), T=3)
    order = [("sys.n0.d0", "p", -1.0, 1.0)]
    spec = spec or SafeguardSpec(mode="projection", penalty="distance", weight=10.0)
    def run(action):
        return safeguard(rm, ["sys.n0"], {("sys.n0.d0", "soc"): soc0}, data, spec,
                         [action], order, T=3)
    return run


def test_safeguard_passthrough():
    run = sg_setup(soc0=1.0)
    res = run(0.3)
    assert not res.intervened
    assert res.penalty == 0.0
    assert res.safe_action[0] == 0.3  # exactly, not approximately


def test_safeguard_saturated_battery_projection():
    """soc at max: charging is unsafe; projection returns 0 with penalty w*|a-u|."""
    run = sg_setup(soc0=2.0)
    res = run(1.0)
    assert res.intervened
    assert res.safe_action[0] == pytest.approx(0.0, abs=1e-7)
    assert res.penalty == pytest.approx(-10.0 * 1.0, abs=1e-6)
    assert abs(res.penalty) == pytest.approx(10.0 * np.linalg.norm(res.action - res.safe_action), abs=1e-9)


def test_safeguard_constant_penalty():
    spec = SafeguardSpec(mode="projection", penalty="constant", constant=-50.0)
    run = sg_setup(soc0=2.0, spec=spec)
    res = run(1.0)
    assert res.intervened and res.penalty == -50.0
    res = run(-0.5)
    assert not res.intervened and res.penalty == 0.0


def test_safeguard_projection_idempotent():
    run = sg_setup(soc0=2.0)
    first = run(0.7)
    second = run(float(first.safe_action[0]))
    assert abs(second.safe_action[0] - first.safe_action[0]) <= 1e-7
    assert not second.intervened


def test_safeguard_penalty_consistency(rng):
    run = sg_setup(soc0=2.0)
    for a in rng.uniform(-1, 1, 6):
        res = run(float(a))
        assert (res.penalty == 0.0) == (not res.intervened)


def test_safeguard_replacement_seeded():
    spec = SafeguardSpec(mode="replacement", penalty="constant", constant=-50.0, seed=3)
    run = sg_setup(soc0=2.0, spec=spec)
    r1, r2 = run(1.0), run(1.0)
    assert r1.safe_action[0] == r2.safe_action[0]  # reproducible randomness
    assert r1.safe_action[0] <= 1e-7  # never charges at full soc


def test_safeguard_infeasible_is_hard_error():
    m = household()
    rm = robustify_ocp(m, RobustCostMode("nominal"))
    data = household_data(np.full(2, 0.5), np.full(2, 0.0), T=1)
    terminal = TerminalSpec({("sys.n0.d0", "soc"): (1.9, 2.0)})
    spec = SafeguardSpec()
    # from soc = 0 the terminal box [1.9, 2] is unreachable in one 1-kW step
    with pytest.raises(InfeasibleProblem, match="well-posedness"):
        safeguard(rm, ["sys.n0"], {("sys.n0.d0", "soc"): 0.0}, data, spec,
                  [0.0], [("sys.n0.d0", "p", -1.0, 1.0)], T=1, terminal=terminal)


# ---------------------------------------------------------------------------
# imbalance redistribution
# ---------------------------------------------------------------------------


def test_redistribute_proportional():
    charges = redistribute_imbalance(10.0, {"a": 3.0, "b": 1.0})
    assert charges == {"a": 7.5, "b": 2.5}


def test_redistribute_single_and_fallback():
    assert redistribute_imbalance(4.0, {"only": 2.0}) == {"only": 4.0}
    assert redistribute_imbalance(4.0, {"a": 0.0, "b": 0.0}) == {"a": 2.0, "b": 2.0}
    assert redistribute_imbalance(6.0, {"a": 1.0, "b": 2.0}, rule="equal") == {"a": 3.0, "b": 3.0}
    custom = redistribute_imbalance(6.0, {"a": 1.0, "b": 2.0}, rule=lambda c, d: {"a": c, "b": 0.0})
    assert custom == {"a": 6.0, "b": 0.0}


# ---------------------------------------------------------------------------
# two-stage dispatch
# ---------------------------------------------------------------------------


def two_bus_system(storage_bounds=(-3, 3)):
    ld = load_model()
    bus0 = bus_model(BusCostSpec(phi_buy=0.5, phi_sell=0.01), [ld])
    storage = battery_model(BatteryParams(rho=0.0, p_bounds=storage_bounds, soc_bounds=(0, 20), soc_init=10))
    bus1 = bus_model(BusCostSpec(mode="self-sufficiency"), [storage])
    pf = PowerFlowModel(kind="balance")
    m = build_global_model(system_model([bus0, bus1]), 8, 1, powerflow=pf)
    return m


def test_two_stage_balancing_storage_restores_balance():
    m = two_bus_system()
    assign = ControlAssignment([Coalition("homes", ["sys.n0"], ControllerSpec("mpc", robust=None))])
    d = Dispatcher(m, assign, T=2)
    assert assign.balancing == ["sys.n1"]
    data = OcpData(series={
        ("sys.n0", "phi_buy"): np.full(3, 0.5),
        ("sys.n0", "phi_sell"): np.full(3, 0.01),
        ("sys.n0.d0", "w"): np.full(3, 1.0),  # +1 kW coalition imbalance
    })
    x0 = {("sys.n1.d0", "soc"): 10.0}
    res = d.step(x0, data)
    assert not res.skipped_stage2
    assert res.stage2_inputs[("sys.n1.d0", "p")] == pytest.approx(-1.0, abs=1e-6)


def test_two_stage_no_capacity_infeasible():
    m = two_bus_system(storage_bounds=(-0.5, 0.5))
    assign = ControlAssignment([Coalition("homes", ["sys.n0"], ControllerSpec("mpc", robust=None))])
    d = Dispatcher(m, assign, T=2)
    data = OcpData(series={
        ("sys.n0", "phi_buy"): np.full(3, 0.5),
        ("sys.n0", "phi_sell"): np.full(3, 0.01),
        ("sys.n0.d0", "w"): np.full(3, 2.0),  # needs 2 kW of balancing
    })
    with pytest.raises(InfeasibleProblem, match="stage-2"):
        d.step({("sys.n1.d0", "soc"): 10.0}, data)


def test_centralized_equals_whole_system_mpc():
    bat = battery_model(BatteryParams(rho=0.001, p_bounds=(-2, 2), soc_bounds=(0, 8), soc_init=4))
    ld = load_model()
    bus = bus_model(BusCostSpec(phi_buy=0.5, phi_sell=0.01), [bat, ld])
    m = build_global_model(system_model([bus]), 8, 1)
    assign = ControlAssignment([Coalition("all", ["sys.n0"], ControllerSpec("mpc", robust=None))])
    assert assign.centralized or not assign.balancing  # validated below
    d = Dispatcher(m, assign, T=3)
    data = household_data([0.5, 0.1, 0.4, 0.2], np.ones(4), T=3)
    x0 = {("sys.n0.d0", "soc"): 4.0}
    res = d.step(x0, data)
    assert res.skipped_stage2
    direct = mpc_step(m, ["sys.n0"], x0, data, T=3)
    assert res.stage1[0].objective == pytest.approx(direct.objective, abs=1e-9)
    assert res.stage1[0].inputs == direct.inputs


def test_receding_horizon_consistency():
    """Zero uncertainty, shrinking horizons: accumulated closed-loop stage
    costs equal the open-loop plan cost (Bellman telescoping, LP-exact)."""
    m = household(rho=0.0, soc_init=1.0)
    T = 4
    prices = np.array([0.5, 0.1, 0.4, 0.2, 0.3])
    load = np.ones(5)
    data = household_data(prices, load, T=T)
    open_loop = mpc_step(m, ["sys.n0"], {("sys.n0.d0", "soc"): 1.0}, data, T=T)

    sim = Simulator(m)
    sim.reset({("sys.n0.d0", "soc"): 1.0})
    total = 0.0
    for s in range(T):
        horizon = T - s
        step_data = household_data(prices[s:], load[s:], T=horizon)
        x0 = sim.states(s)
        res = mpc_step(m, ["sys.n0"], x0, step_data, T=horizon)
        sim.record_disturbances(s, {("sys.n0", "phi_buy"): prices[s], ("sys.n0", "phi_sell"): 0.01,
                                    ("sys.n0.d1", "w"): load[s]})
        sim.record_inputs(s, res.inputs)
        sim.execute_dynamics(s)
        sim.solve_algebraic(s)
        total += sim.stage_cost(s, ["sys.n0", "sys.n0.d0", "sys.n0.d1"])
        last = res
    # terminal-step cost from the final (exact) plan
    total += last.result.x[last.compiled.col("sys.n0", "cost", 1)]
    total += last.result.x[last.compiled.col("sys.n0.d0", "cost", 1)]
    assert total == pytest.approx(open_loop.objective, abs=1e-6)
