"""Entity tree assembly, big-M machinery, validation, dump round-trip."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safegrid.bigm import big_m_indicator, big_m_product, implied_magnitude
from safegrid.devices import (
    BatteryParams,
    BusCostSpec,
    battery_model,
    bus_model,
    load_model,
    system_model,
)
from safegrid.dump import dump_model, parse_dump
from safegrid.expr import Factor, LinearExpr, Term, VarRef
from safegrid.global_model import ModelError, build_global_model, validate_model
from safegrid.optim import Status, solve_mip
from safegrid.symbolic import ConstraintTemplate, Domain, EntityModel, SymbolicVar, VarKind


def small_system():
    bat = battery_model(BatteryParams(rho=0.1, eta_c=0.95, eta_d=0.9, soc_init=5))
    bus = bus_model(BusCostSpec(), [bat])
    return system_model([bus])


def test_build_blocks_and_time_set():
    # hand-traced: root + bus + battery over 24 x 1 h
    m = build_global_model(small_system(), 24, 1)
    assert list(m.blocks) == ["sys", "sys.n0", "sys.n0.d0"]
    assert list(m.time_set) == list(range(25))
    assert validate_model(m) == []


def test_empty_system():
    m = build_global_model(system_model([]), 1, 1)
    assert list(m.blocks) == ["sys"]
    assert list(m.all_templates()) == []


def test_non_integral_horizon():
    with pytest.raises(ModelError):
        build_global_model(small_system(), 1.5, 1.0)  # 90 min / 60 min


def test_duplicate_entity_object_rejected():
    bat = battery_model(BatteryParams())
    bus = bus_model(BusCostSpec(), [bat, bat])
    with pytest.raises(ModelError):
        build_global_model(system_model([bus]), 2, 1)


def test_assembly_determinism():
    d1 = dump_model(build_global_model(small_system(), 24, 1))
    d2 = dump_model(build_global_model(small_system(), 24, 1))
    assert d1 == d2


def test_namespace_bijection_preserves_tree_order():
    batteries = [battery_model(BatteryParams()) for _ in range(2)]
    loads = [load_model() for _ in range(2)]
    buses = [bus_model(BusCostSpec(), [batteries[0], loads[0]]), bus_model(BusCostSpec(), [batteries[1], loads[1]])]
    m = build_global_model(system_model(buses), 4, 1)
    paths = list(m.blocks)
    assert len(set(paths)) == len(paths)  # injective
    for path, blk in m.blocks.items():
        if blk.parent is not None:
            assert path.startswith(blk.parent + ".")  # order preserving
            assert path in m.block(blk.parent).children


def test_validate_reports_missing_dynamics():
    bat = battery_model(BatteryParams())
    bat.templates = [t for t in bat.templates if t.name != "dyn_soc"]
    bat.dynamics.clear()
    m = build_global_model(system_model([bus_model(BusCostSpec(), [bat])]), 2, 1)
    issues = validate_model(m)
    assert any("soc" in msg and "dynamics" in msg for msg in issues)


def test_validate_reports_unknown_reference():
    e = EntityModel("d", "widget")
    e.add_var(SymbolicVar("p", VarKind.INPUT, bounds=(0, 1)))
    e.add_template(ConstraintTemplate("bad", LinearExpr.var(e.ref("ghost")) - 1.0, "<="))
    # local resolution fails at build time already
    with pytest.raises(ModelError, match="ghost"):
        build_global_model(system_model([bus_model(BusCostSpec(), [e])]), 2, 1)

    # an absolute dangling reference survives until validate
    m = build_global_model(small_system(), 2, 1)
    m.block("sys.n0").templates.append(
        ConstraintTemplate("bad", LinearExpr.var(VarRef("sys.n0", "ghost")), "<=")
    )
    issues = validate_model(m)
    assert any("ghost" in msg for msg in issues)


def test_big_m_indicator_constraints():
    e = EntityModel("d", "widget")
    e.add_var(SymbolicVar("p", VarKind.INPUT, bounds=(-5, 5)))
    b = big_m_indicator(e, LinearExpr.var(e.ref("p")), ">=", M=10.0, name="ec")
    assert b.domain == Domain.BINARY and b.bounds == (0.0, 1.0)
    lo = next(t for t in e.templates if t.name == "ec_lo")
    hi = next(t for t in e.templates if t.name == "ec_hi")
    # p >= -10(1-ec):  p - 10 ec + 10 >= 0
    assert lo.sense == ">=" and lo.expr.constant == pytest.approx(10.0)
    assert hi.sense == "<=" and hi.expr.constant == 0.0


def test_big_m_too_small_rejected():
    e = EntityModel("d", "widget")
    e.add_var(SymbolicVar("p", VarKind.INPUT, bounds=(-5, 5)))
    with pytest.raises(ValueError, match="dominate"):
        big_m_indicator(e, LinearExpr.var(e.ref("p")), ">=", M=3.0)


def test_big_m_derived_magnitude():
    e = EntityModel("d", "widget")
    e.add_var(SymbolicVar("p", VarKind.INPUT, bounds=(-5, 5)))
    assert implied_magnitude(e, LinearExpr.var(e.ref("p")).scaled(2.0) + 1.0) == pytest.approx(11.0)


def test_logic_ops():
    e = EntityModel("d", "widget")
    e.add_var(SymbolicVar("b1", VarKind.ALGEBRAIC, Domain.BINARY))
    e.add_var(SymbolicVar("b2", VarKind.ALGEBRAIC, Domain.BINARY))
    bn = big_m_indicator(e, op="not", operands=["b1"], name="nb")
    ba = big_m_indicator(e, op="and", operands=["b1", "b2"], name="ab")
    bo = big_m_indicator(e, op="or", operands=["b1", "b2"], name="ob")
    names = {t.name for t in e.templates}
    assert {"nb_not", "ab_le1", "ab_le2", "ab_ge", "ob_ge1", "ob_ge2", "ob_le"} <= names
    e.add_var(SymbolicVar("x", VarKind.INPUT, bounds=(0, 1)))
    with pytest.raises(ValueError, match="binary"):
        big_m_indicator(e, op="and", operands=["b1", "x"])


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5))
def test_big_m_faithfulness(pval):
    """For feasible MIP points: ec=1 => p >= 0, ec=0 => p <= 0; at p=0 both."""
    e = EntityModel("d", "widget")
    e.add_var(SymbolicVar("p", VarKind.INPUT, bounds=(-5, 5)))
    big_m_indicator(e, LinearExpr.var(e.ref("p")), ">=", name="ec")
    big_m_product(e, "ec", "p", name="z")
    from safegrid.optim import OptProblem

    for ec_val in (0.0, 1.0):
        prob = OptProblem()
        jp = prob.add_var("p", -5, 5)
        je = prob.add_var("ec", ec_val, ec_val, binary=True)
        jz = prob.add_var("z", -5, 5)
        cols = {"p": jp, "ec": je, "z": jz}
        for tpl in e.templates:
            coeffs = {}
            const = tpl.expr.constant
            for term in tpl.expr.terms:
                coeffs[cols[term.var.name]] = coeffs.get(cols[term.var.name], 0.0) + term.coeff
            prob.add_constraint(coeffs, tpl.sense, -const)
        prob.lb[jp] = prob.ub[jp] = pval
        r = solve_mip(prob)
        feasible = r.status == Status.OPTIMAL
        # at p = 0 both branches are admissible; numerically the boundary
        # zone has the width of the solver feasibility tolerance
        if ec_val == 1.0:
            assert feasible == (pval >= 0.0) or abs(pval) <= 1e-7
        else:
            assert feasible == (pval <= 0.0) or abs(pval) <= 1e-7
        if feasible:
            assert r.value("z") == pytest.approx(ec_val * pval, abs=1e-7)


def test_dump_round_trip():
    m = build_global_model(small_system(), 24, 1)
    d1 = dump_model(m)
    m2 = parse_dump(d1)
    assert validate_model(m2) == validate_model(m) == []
    assert dump_model(m2) == d1


def test_dump_round_trip_preserves_issues():
    m = build_global_model(small_system(), 4, 1)
    m.block("sys.n0.d0").dynamics.clear()
    issues = validate_model(m)
    assert issues
    m2 = parse_dump(dump_model(m))
    assert validate_model(m2) == issues


def test_parameter_slots_mutable_after_build():
    m = build_global_model(small_system(), 4, 1)
    m.set_param("sys.n0.d0", "rho", 0.5)
    assert m.param_value("sys.n0.d0", "rho") == 0.5
    with pytest.raises(ModelError):
        m.set_param("sys.n0.d0", "nope", 1.0)


def test_entity_id_paths():
    from safegrid.symbolic import EntityId

    eid = EntityId.parse("sys.n0.d1")
    assert eid.segments == ("sys", "n0", "d1")
    assert eid.path == "sys.n0.d1"
    assert eid.parent.path == "sys.n0"
    assert eid.parent.parent.parent is None
    assert EntityId.parse("sys").child("n2").path == "sys.n2"
    assert EntityId.parse("sys.n0").is_ancestor_of(eid)
    assert not eid.is_ancestor_of(EntityId.parse("sys.n0"))
    with pytest.raises(ValueError):
        EntityId.parse("")
