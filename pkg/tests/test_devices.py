"""Built-in entity models: Table-style battery, heat pump, loads, EV, buses."""
import itertools

import numpy as np
import pytest

from safegrid.control import OcpData
from safegrid.devices import (
    BatteryParams,
    BusCostSpec,
    EVParams,
    HeatPumpParams,
    battery_model,
    bus_model,
    ev_model,
    external_grid_model,
    generator_model,
    heat_pump_model,
    load_model,
    renewable_model,
    system_model,
)
from safegrid.global_model import build_global_model, validate_model
from safegrid.ocp import compile_ocp
from safegrid.optim import Status, solve_lp, solve_mip
from safegrid.simulate import Simulator


def build_battery(params: BatteryParams, linear=False):
    bat = battery_model(params, linear=linear)
    bus = bus_model(BusCostSpec(phi_buy=0.3, phi_sell=0.1), [bat])
    return build_global_model(system_model([bus]), 8, 1)


def battery_step_via_mip(params: BatteryParams, soc0: float, p0: float):
    """One dynamics step evaluated through the MIP constraint encoding."""
    m = build_battery(params)
    c = compile_ocp(m, ["sys"], T=1, x0={("sys.n0.d0", "soc"): soc0}, objective="zero",
                    disturbances={}, fixed_inputs={("sys.n0.d0", "p"): p0})
    r = solve_mip(c.problem, first_feasible=True)
    assert r.status == Status.OPTIMAL, r.message
    return r.x[c.col("sys.n0.d0", "soc", 1)], r.x[c.col("sys.n0.d0", "cost", 0)]


def battery_formula(params: BatteryParams, soc0: float, p0: float):
    if p0 >= 0:
        return params.eta_s * soc0 + params.eta_c * p0, params.rho * p0
    return params.eta_s * soc0 + p0 / params.eta_d, -params.rho * p0


def test_battery_lossless_transfer():
    # eta_s = 0, eta_c = eta_d = 1, soc_0 = 5, p_0 = 2 -> soc_1 = 2
    params = BatteryParams(eta_s=0.0, eta_c=1.0, eta_d=1.0, soc_init=5.0, soc_bounds=(0, 10))
    soc1, _ = battery_step_via_mip(params, 5.0, 2.0)
    assert soc1 == pytest.approx(2.0, abs=1e-8)


def test_battery_zero_input_full_retention():
    params = BatteryParams(eta_s=1.0, soc_init=5.0)
    m = build_battery(params)
    sim = Simulator(m)
    sim.reset({("sys.n0.d0", "soc"): 5.0})
    for t in range(4):
        sim.record_inputs(t, {("sys.n0.d0", "p"): 0.0})
        sim.execute_dynamics(t)
    assert sim.lookup("sys.n0.d0", "soc", 4) == 5.0


def test_battery_discharge_derived():
    # eta_s=1, eta_c=0.9, eta_d=0.8, soc_0=1, p_0=-0.4 -> soc_1 = 0.5
    params = BatteryParams(eta_s=1.0, eta_c=0.9, eta_d=0.8, soc_init=1.0, p_bounds=(-1, 1), soc_bounds=(0, 10))
    soc1, cost0 = battery_step_via_mip(params, 1.0, -0.4)
    assert soc1 == pytest.approx(0.5, abs=1e-8)
    assert cost0 == pytest.approx(0.0, abs=1e-8)  # rho defaults to 0


def test_battery_branch_consistency(rng):
    """MIP-encoded dynamics equal the case-split formula on random samples."""
    params = BatteryParams(rho=0.2, eta_c=0.93, eta_d=0.87, eta_s=0.98, p_bounds=(-3, 3), soc_bounds=(0, 50), soc_init=10)
    for _ in range(12):
        # one step stays strictly inside the soc box for any p in [-3, 3]
        soc0 = float(rng.uniform(5.0, 20.0))
        p0 = float(rng.uniform(-3, 3))
        soc1, cost0 = battery_step_via_mip(params, soc0, p0)
        soc1_ref, cost_ref = battery_formula(params, soc0, p0)
        assert soc1 == pytest.approx(soc1_ref, abs=1e-7)
        assert cost0 == pytest.approx(cost_ref, abs=1e-7)


def arbitrage_problem(m, prices, T):
    data = {
        ("sys.n0", "phi_buy"): np.asarray(prices, float),
        ("sys.n0", "phi_sell"): np.full(T + 1, 0.01),
    }
    return compile_ocp(m, ["sys"], T=T, x0={("sys.n0.d0", "soc"): 3.0}, disturbances=data, objective="cost")


def test_linear_variant_equivalence(rng):
    """On instances with no simultaneous charge/discharge incentive, the MIP
    and linear batteries reach identical optimal cost."""
    for trial in range(6):
        prices = rng.uniform(0.05, 0.6, 7)
        params = BatteryParams(rho=0.01, eta_c=0.9, eta_d=0.9, eta_s=1.0, p_bounds=(-2, 2), soc_bounds=(0, 6), soc_init=3)
        m_mip = build_battery(params)
        m_lin = build_battery(params, linear=True)
        c_mip = arbitrage_problem(m_mip, prices, 6)
        c_lin = arbitrage_problem(m_lin, prices, 6)
        r_mip = solve_mip(c_mip.problem)
        r_lin = solve_lp(c_lin.problem)
        assert r_mip.status == Status.OPTIMAL and r_lin.status == Status.OPTIMAL
        pp = [r_lin.x[c_lin.col("sys.n0.d0", "p_plus", t)] for t in range(7)]
        pm = [r_lin.x[c_lin.col("sys.n0.d0", "p_minus", t)] for t in range(7)]
        assert max(a * b for a, b in zip(pp, pm)) < 1e-7  # no simultaneous split
        assert r_lin.objective == pytest.approx(r_mip.objective, abs=1e-6)


def test_heat_pump_isolated_building():
    hp = heat_pump_model(HeatPumpParams(a=0.999999999, b=0.0, temp_bounds=(0, 40), t_init=21.0))
    # a -> 1, b = 0, p = 0: temperature constant (up to the a<1 requirement)
    m = build_global_model(system_model([bus_model(BusCostSpec(), [hp])]), 4, 1)
    sim = Simulator(m)
    sim.reset({("sys.n0.d0", "t_in"): 21.0})
    sim.record_disturbances(0, {("sys.n0.d0", "t_out"): 5.0, ("sys.n0.d0", "cop"): 3.0})
    sim.record_inputs(0, {("sys.n0.d0", "p"): 0.0})
    sim.execute_dynamics(0)
    assert sim.lookup("sys.n0.d0", "t_in", 1) == pytest.approx(21.0, abs=1e-6)


def test_heat_pump_derived_step():
    hp = heat_pump_model(HeatPumpParams(a=0.9, b=0.1, c=1.0, p_max=3, temp_bounds=(0, 40), t_init=20.0))
    m = build_global_model(system_model([bus_model(BusCostSpec(), [hp])]), 4, 1)
    sim = Simulator(m)
    sim.reset({("sys.n0.d0", "t_in"): 20.0})
    sim.record_disturbances(0, {("sys.n0.d0", "t_out"): 10.0, ("sys.n0.d0", "cop"): 3.0})
    sim.record_inputs(0, {("sys.n0.d0", "p"): 0.5})
    sim.execute_dynamics(0)
    assert sim.lookup("sys.n0.d0", "t_in", 1) == pytest.approx(20.5, abs=1e-12)


def test_heat_pump_scenario_bounds():
    hp = heat_pump_model(HeatPumpParams(temp_bounds=(20.0, 22.0), t_set=21.0, t_init=21.0))
    assert hp.vars["t_in"].bounds == (20.0, 22.0)
    assert hp.param_values["t_set"] == 21.0


def test_load_binds_to_disturbance():
    ld = load_model()
    m = build_global_model(system_model([bus_model(BusCostSpec(), [ld])]), 2, 1)
    c = compile_ocp(m, ["sys"], T=1, disturbances={("sys.n0.d0", "w"): np.array([1.0, 2.0])}, objective="zero")
    r = solve_lp(c.problem)
    assert r.status == Status.OPTIMAL
    assert r.x[c.col("sys.n0.d0", "p", 0)] == pytest.approx(1.0)
    assert r.x[c.col("sys.n0.d0", "p", 1)] == pytest.approx(2.0)


def test_curtailable_renewable_range():
    gen = renewable_model(curtailable=True, p_min=-5.0)
    m = build_global_model(system_model([bus_model(BusCostSpec(), [gen])]), 2, 1)
    for target, feasible in ((-3.0, True), (-1.0, True), (0.0, True), (-3.5, False), (0.5, False)):
        c = compile_ocp(m, ["sys"], T=1, disturbances={("sys.n0.d0", "w"): np.array([-3.0, -3.0])},
                        objective="zero", fixed_inputs={("sys.n0.d0", "p"): target})
        r = solve_lp(c.problem)
        assert (r.status == Status.OPTIMAL) == feasible, (target, r.status)


def test_generator_ramp():
    gen = generator_model(ramp=1.0, p_bounds=(-5, 0))
    m = build_global_model(system_model([bus_model(BusCostSpec(), [gen])]), 4, 1)
    c = compile_ocp(m, ["sys"], T=2, objective="zero", fixed_inputs={("sys.n0.d0", "p"): 0.0})
    prob = c.problem
    j2 = c.col("sys.n0.d0", "p", 1)
    prob.lb[j2] = prob.ub[j2] = -2.5  # jump of 2.5 violates ramp 1.0
    assert solve_lp(prob).status == Status.INFEASIBLE


def test_ev_departure_boundary():
    """Needs 8 kWh at t_dep = 6 from soc_0 = 2 at 1 kW: only p = 1 for all
    six steps achieves it (brute force over on/off schedules)."""
    params = EVParams(
        battery=BatteryParams(eta_c=1.0, eta_d=1.0, eta_s=1.0, p_bounds=(-1, 1), soc_bounds=(0, 8), soc_init=2.0),
        t_arr=0,
        t_dep=6,
        e_dep=8.0,
    )
    # brute-force oracle over per-step charging in {0, 0.5, 1.0}
    feasible_schedules = [
        s for s in itertools.product((0.0, 0.5, 1.0), repeat=6) if 2.0 + sum(s) >= 8.0 - 1e-12
    ]
    assert feasible_schedules == [(1.0,) * 6]

    ev = ev_model(params)
    m = build_global_model(system_model([bus_model(BusCostSpec(), [ev])]), 8, 1)
    c = compile_ocp(m, ["sys"], T=6, x0={("sys.n0.d0", "soc"): 2.0}, objective="zero")
    r = solve_mip(c.problem, first_feasible=True)
    assert r.status == Status.OPTIMAL
    for t in range(6):
        assert r.x[c.col("sys.n0.d0", "p", t)] == pytest.approx(1.0, abs=1e-7)
    # reduce available time by starting later: infeasible
    c2 = compile_ocp(m, ["sys"], T=6, start=1, x0={("sys.n0.d0", "soc"): 2.0}, objective="zero")
    assert solve_mip(c2.problem, first_feasible=True).status == Status.INFEASIBLE


def test_ev_energy_accounting(rng):
    params = EVParams(
        battery=BatteryParams(eta_c=0.9, eta_d=0.8, eta_s=1.0, p_bounds=(-2, 2), soc_bounds=(0, 10), soc_init=4.0),
        t_arr=0,
        t_dep=5,
        e_dep=5.0,
    )
    ev = ev_model(params)
    m = build_global_model(system_model([bus_model(BusCostSpec(), [ev])]), 6, 1)
    sim = Simulator(m)
    sim.reset({("sys.n0.d0", "soc"): 4.0})
    gain = 0.0
    for t in range(5):
        p = float(rng.uniform(-1, 2))
        sim.record_inputs(t, {("sys.n0.d0", "p"): p})
        sim.execute_dynamics(t)
        gain += 0.9 * p if p >= 0 else p / 0.8
    assert sim.lookup("sys.n0.d0", "soc", 5) - 4.0 == pytest.approx(gain, abs=1e-9)


def test_bus_single_load_cost():
    ld = load_model()
    bus = bus_model(BusCostSpec(phi_buy=1.0, phi_sell=0.5), [ld])
    m = build_global_model(system_model([bus]), 2, 1)
    c = compile_ocp(m, ["sys"], T=1, disturbances={("sys.n0.d1" if False else "sys.n0.d0", "w"): np.array([1.0, 1.0])},
                    objective="cost")
    r = solve_lp(c.problem)
    assert r.status == Status.OPTIMAL
    assert r.x[c.col("sys.n0", "cost", 0)] == pytest.approx(1.0, abs=1e-9)


def test_bus_zero_net_power_costs_nothing():
    ld = load_model()
    gen = renewable_model(curtailable=False, w_bounds=(-5, 0))
    bus = bus_model(BusCostSpec(phi_buy=1.0, phi_sell=0.5), [ld, gen])
    m = build_global_model(system_model([bus]), 2, 1)
    data = {("sys.n0.d0", "w"): np.array([2.0, 2.0]), ("sys.n0.d1", "w"): np.array([-2.0, -2.0])}
    c = compile_ocp(m, ["sys"], T=1, disturbances=data, objective="cost")
    r = solve_lp(c.problem)
    assert r.status == Status.OPTIMAL
    assert r.objective == pytest.approx(0.0, abs=1e-9)


def test_bus_balance_property(rng):
    """p_bus equals the sum of child powers in every solved model."""
    bat = battery_model(BatteryParams(p_bounds=(-2, 2), soc_bounds=(0, 6), soc_init=3))
    ld = load_model()
    bus = bus_model(BusCostSpec(phi_buy=0.4, phi_sell=0.1), [bat, ld])
    m = build_global_model(system_model([bus]), 4, 1)
    data = {("sys.n0.d1", "w"): rng.uniform(0, 2, 5)}
    c = compile_ocp(m, ["sys"], T=4, x0={("sys.n0.d0", "soc"): 3.0}, disturbances=data, objective="cost")
    r = solve_mip(c.problem)
    assert r.status == Status.OPTIMAL
    for t in range(5):
        total = r.x[c.col("sys.n0.d0", "p", t)] + r.x[c.col("sys.n0.d1", "p", t)]
        assert r.x[c.col("sys.n0", "p", t)] == pytest.approx(total, abs=1e-8)


def test_bus_validation():
    with pytest.raises(ValueError, match="at least one child"):
        bus_model(BusCostSpec(mode="energy-cost"), [])
    with pytest.raises(ValueError, match="no intra-step arbitrage"):
        BusCostSpec(phi_buy=0.1, phi_sell=0.2).validate()
    slack = external_grid_model()
    assert slack.kind_name == "bus_slack"


def test_self_sufficiency_bus():
    ld = load_model()
    bus = bus_model(BusCostSpec(mode="self-sufficiency"), [ld])
    m = build_global_model(system_model([bus]), 2, 1)
    c = compile_ocp(m, ["sys"], T=1, disturbances={("sys.n0.d0", "w"): np.array([1.5, 1.5])}, objective="cost")
    r = solve_lp(c.problem)
    assert r.status == Status.OPTIMAL
    assert r.x[c.col("sys.n0", "cost", 0)] == pytest.approx(1.5, abs=1e-9)  # |net import|


def test_param_validation_errors():
    with pytest.raises(ValueError):
        BatteryParams(soc_init=20.0).validate()
    with pytest.raises(ValueError):
        BatteryParams(eta_d=0.0).validate()
    with pytest.raises(ValueError):
        HeatPumpParams(a=0.95, b=0.2).validate()  # a + b > 1
    with pytest.raises(ValueError):
        EVParams(t_arr=5, t_dep=5).validate()
