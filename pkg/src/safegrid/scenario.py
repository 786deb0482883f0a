"""Declarative scenario configs (YAML): entities, data bindings, uncertainty,
coalitions, controllers, safeguards, power flow, and environment settings.

See README for the schema. ``load_scenario`` builds the global model and all
runtime objects; errors carry the config path that caused them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np
import yaml

from . import devices
from .control import Coalition, ControlAssignment, ControllerSpec, SafeguardSpec
from .env import EnvConfig, GridEnv, ParamInitializer
from .forecast import ConstantSource, CyclicSource, DataProvider, DataSource, Forecaster, load_table
from .global_model import GlobalModel, build_global_model, validate_model
from .ocp import TerminalSpec
from .powerflow import Line, PowerFlowModel
from .symbolic import EntityModel


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    model: GlobalModel
    assignment: ControlAssignment
    providers: dict[tuple[str, str], DataProvider]
    env_config: EnvConfig
    initializers: dict[tuple[str, str], ParamInitializer] = field(default_factory=dict)
    terminal: Optional[TerminalSpec] = None
    true_params: dict[tuple[str, str], float] = field(default_factory=dict)

    def build_env(self) -> GridEnv:
        return GridEnv(
            self.model,
            self.assignment,
            self.providers,
            self.env_config,
            initializers=self.initializers,
            terminal=self.terminal,
            true_param_values=self.true_params,
        )


def _need(cfg: Mapping, key: str, where: str) -> Any:
    if key not in cfg:
        raise ScenarioError(f"{where}: missing required key {key!r}")
    return cfg[key]


def _param(raw: Union[float, Mapping], default: Optional[float] = None) -> tuple[float, Optional[tuple[float, float]], Optional[float], Optional[Mapping]]:
    """value, uncertainty box, true value, initializer spec."""
    if isinstance(raw, Mapping):
        value = float(raw.get("value", default if default is not None else 0.0))
        box = tuple(raw["box"]) if "box" in raw else None
        true = float(raw["true"]) if "true" in raw else None
        init = raw.get("init")
        return value, box, true, init
    return float(raw), None, None, None


def _forecaster(cfg: Optional[Mapping]) -> Forecaster:
    cfg = cfg or {"kind": "perfect"}
    return Forecaster(
        kind=cfg.get("kind", "perfect"),
        lag=int(cfg.get("lag", 1)),
        sigma=float(cfg.get("sigma", 0.0)),
        smooth_window=int(cfg.get("window", 3)),
        seed=int(cfg.get("seed", 0)),
        declares_perfect=bool(cfg.get("declares_perfect", False)),
    )


def _sources(cfg: Mapping, base_dir: Path) -> dict[str, DataSource]:
    out: dict[str, DataSource] = {}
    for name, spec in (cfg or {}).items():
        kind = _need(spec, "kind", f"data_sources.{name}")
        if kind == "table":
            out[name] = load_table(
                base_dir / _need(spec, "path", f"data_sources.{name}"),
                column_map=spec.get("columns"),
                timestep=float(spec.get("timestep", 1.0)),
                delimiter=spec.get("delimiter", ","),
            )
        elif kind == "cyclic":
            out[name] = CyclicSource(_need(spec, "series", f"data_sources.{name}"), float(spec.get("timestep", 1.0)))
        elif kind == "constant":
            out[name] = ConstantSource(_need(spec, "values", f"data_sources.{name}"))
        else:
            raise ScenarioError(f"data_sources.{name}: unknown kind {kind!r}")
    return out


DEVICE_DISTURBANCES = {
    "battery": {},
    "load": {"data": "w"},
    "renewable": {"data": "w"},
    "generator": {},
    "heat_pump": {"t_out": "t_out", "cop": "cop"},
    "ev": {},
}


class _Builder:
    def __init__(self, cfg: Mapping, base_dir: Path):
        self.cfg = cfg
        self.base_dir = base_dir
        self.sources = _sources(cfg.get("data_sources", {}), base_dir)
        self.providers: dict[tuple[str, str], DataProvider] = {}
        self.initializers: dict[tuple[str, str], ParamInitializer] = {}
        self.true_params: dict[tuple[str, str], float] = {}
        self.offset = int(cfg.get("env", {}).get("data_offset", 0))

    def provider(self, spec: Mapping, where: str) -> DataProvider:
        src_name = _need(spec, "source", where)
        if src_name not in self.sources:
            raise ScenarioError(f"{where}: unknown data source {src_name!r}")
        src = self.sources[src_name]
        column = _need(spec, "column", where)
        if column not in src.series:
            raise ScenarioError(f"{where}: source {src_name!r} has no column {column!r}")
        error = None
        if "error" in spec:
            error = (spec["error"].get("kind", "abs"), float(spec["error"].get("value", 0.0)))
        return DataProvider(src, _forecaster(spec.get("forecaster")), column, error_spec=error, offset=self.offset)

    def register_param(self, path: str, name: str, raw, default: float) -> float:
        value, box, true, init = _param(raw, default)
        if true is not None:
            self.true_params[(path, name)] = true
        if init is not None:
            self.initializers[(path, name)] = ParamInitializer(
                kind=init.get("kind", "fixed"),
                value=float(init.get("value", value)),
                range=tuple(init.get("range", (value, value))),
                values=list(init.get("values", [])),
            )
        return value

    def device(self, spec: Mapping, path: str) -> EntityModel:
        dtype = _need(spec, "type", path)
        where = f"{path} ({dtype})"
        uncertain: dict[str, tuple[float, float]] = {}

        def p(key: str, default: float, pname: Optional[str] = None) -> float:
            raw = spec.get(key, default)
            value, box, true, init = _param(raw, default)
            name = pname or key
            if box is not None:
                uncertain[name] = (float(box[0]), float(box[1]))
            if true is not None:
                self.true_params[(path, name)] = true
            if init is not None:
                self.initializers[(path, name)] = ParamInitializer(
                    kind=init.get("kind", "fixed"),
                    value=float(init.get("value", value)),
                    range=tuple(init.get("range", (value, value))),
                    values=list(init.get("values", [])),
                )
            return value

        if dtype in ("battery", "ev", "battery_linear"):
            bp = devices.BatteryParams(
                rho=p("rho", 0.0),
                eta_c=p("eta_c", 1.0),
                eta_d=p("eta_d", 1.0),
                eta_s=p("eta_s", 1.0),
                p_bounds=tuple(spec.get("p_bounds", (-5.0, 5.0))),
                soc_bounds=tuple(spec.get("soc_bounds", (0.0, 10.0))),
                soc_init=p("soc_init", 5.0, pname="soc_init"),
                uncertain=uncertain,
            )
            if dtype == "ev":
                ent = devices.ev_model(
                    devices.EVParams(
                        battery=bp,
                        t_arr=int(spec.get("t_arr", 0)),
                        t_dep=int(_need(spec, "t_dep", where)),
                        e_dep=float(_need(spec, "e_dep", where)),
                    )
                )
            else:
                ent = devices.battery_model(bp, linear=bool(spec.get("linear", dtype == "battery_linear")))
        elif dtype == "load":
            ent = devices.load_model(w_bounds=tuple(spec.get("w_bounds", (0.0, float("inf")))))
        elif dtype == "renewable":
            ent = devices.renewable_model(
                curtailable=bool(spec.get("curtailable", False)),
                p_min=float(spec.get("p_min", -float("inf"))),
                w_bounds=tuple(spec["w_bounds"]) if "w_bounds" in spec else None,
            )
        elif dtype == "generator":
            ent = devices.generator_model(
                ramp=float(_need(spec, "ramp", where)),
                p_bounds=tuple(spec.get("p_bounds", (-5.0, 0.0))),
                marginal_cost=float(spec.get("marginal_cost", 0.0)),
            )
        elif dtype == "heat_pump":
            knee = spec.get("comfort_knee")
            ent = devices.heat_pump_model(
                devices.HeatPumpParams(
                    a=p("a", 0.9),
                    b=p("b", 0.1),
                    c=p("c", 1.0),
                    p_max=float(spec.get("p_max", 3.0)),
                    temp_bounds=tuple(spec.get("temp_bounds", (20.0, 22.0))),
                    t_init=p("t_init", 21.0, pname="t_in_init"),
                    t_set=float(spec.get("t_set", 21.0)),
                    comfort_weight=p("comfort_weight", 1.0),
                    comfort_knee=None if knee is None else float(knee),
                    comfort_weight2=float(spec.get("comfort_weight2", 0.0)),
                    quadratic_reward=bool(spec.get("quadratic_reward", True)),
                    t_out_bounds=tuple(spec.get("t_out_bounds", (-20.0, 45.0))),
                    cop_bounds=tuple(spec.get("cop_bounds", (1.0, 6.0))),
                    uncertain=uncertain,
                )
            )
        else:
            raise ScenarioError(f"{where}: unknown device type {dtype!r}")

        for key, dist in DEVICE_DISTURBANCES.get(dtype, {}).items():
            if key in spec:
                self.providers[(path, dist)] = self.provider(spec[key], f"{where}.{key}")
            elif dist in ent.disturbances():
                raise ScenarioError(f"{where}: disturbance {dist!r} needs a {key!r} data binding")
        return ent

    def bus(self, spec: Mapping, index: int) -> EntityModel:
        path = f"sys.n{index}"
        cost = spec.get("cost", {"mode": "slack"} if spec.get("slack") else {"mode": "energy-cost"})
        mode = cost.get("mode", "energy-cost")
        kids = [self.device(d, f"{path}.d{j}") for j, d in enumerate(spec.get("devices", []))]
        bspec = devices.BusCostSpec(
            mode=mode,
            phi_buy=float(cost.get("phi_buy", 0.3)),
            phi_sell=float(cost.get("phi_sell", 0.1)),
            carbon_weight=float(cost.get("carbon_weight", 0.0)),
            self_sufficiency_weight=float(cost.get("weight", 1.0)),
        )
        ent = devices.bus_model(bspec, kids)
        prices = spec.get("prices")
        if prices is not None:
            for col_key, dist in (("buy_column", "phi_buy"), ("sell_column", "phi_sell"), ("carbon_column", "carbon")):
                if col_key in prices:
                    sub = dict(prices)
                    sub["column"] = prices[col_key]
                    self.providers[(path, dist)] = self.provider(sub, f"{path}.prices")
        return ent

    def build(self) -> Scenario:
        cfg = self.cfg
        name = cfg.get("name", "scenario")
        sys_cfg = _need(cfg, "system", "scenario")
        buses_cfg = _need(sys_cfg, "buses", "system")
        if not isinstance(buses_cfg, list):
            raise ScenarioError("system.buses must be a list")
        buses = [self.bus(b, i) for i, b in enumerate(buses_cfg)]
        system = devices.system_model(buses)

        pf = None
        if "powerflow" in cfg:
            pcfg = cfg["powerflow"]
            lines = [
                Line(
                    from_bus=f"sys.n{int(_need(l, 'from', 'powerflow.lines'))}",
                    to_bus=f"sys.n{int(_need(l, 'to', 'powerflow.lines'))}",
                    b=float(l.get("b", 10.0)),
                    r=float(l.get("r", 0.01)),
                    x=float(l.get("x", 0.0)),
                    limit=float(l.get("limit", float("inf"))),
                )
                for l in pcfg.get("lines", [])
            ]
            slack = pcfg.get("slack")
            pf = PowerFlowModel(
                kind=pcfg.get("kind", "balance"),
                lines=lines,
                slack=None if slack is None else f"sys.n{int(slack)}",
                base_power_kw=float(pcfg.get("base_power_kw", 1000.0)),
                v_bounds=tuple(pcfg.get("v_bounds", (0.81, 1.21))),
                q_bus={f"sys.n{int(k)}": float(v) for k, v in pcfg.get("q_bus", {}).items()},
            )

        model = build_global_model(system, float(_need(cfg, "horizon", "scenario")), float(cfg.get("tau", 1.0)), powerflow=pf)
        issues = validate_model(model)
        if issues:
            raise ScenarioError("model validation failed:\n  " + "\n  ".join(issues))

        ctl = cfg.get("control", {})
        coalitions = []
        for c in ctl.get("coalitions", [{"name": "all", "buses": list(range(len(buses)))}]):
            cname = _need(c, "name", "control.coalitions")
            ctrl_cfg = c.get("controller", {})
            spec = ControllerSpec(
                kind=ctrl_cfg.get("kind", "mpc"),
                robust=ctrl_cfg.get("robust", "worst-case"),
                weights=ctrl_cfg.get("weights"),
            )
            sg = None
            if "safeguard" in c and c["safeguard"]:
                s = c["safeguard"]
                sg = SafeguardSpec(
                    mode=s.get("mode", "projection"),
                    penalty=s.get("penalty", "distance"),
                    weight=float(s.get("weight", 1.0)),
                    constant=float(s.get("constant", -50.0)),
                    seed=int(s.get("seed", 0)),
                )
            coalitions.append(
                Coalition(cname, [f"sys.n{int(i)}" for i in _need(c, "buses", f"coalition {cname}")], spec, sg)
            )
        bal_cfg = ctl.get("balancing_controller", {})
        assignment = ControlAssignment(
            coalitions,
            balancing_controller=ControllerSpec(
                kind=bal_cfg.get("kind", "mpc"), robust=bal_cfg.get("robust", "nominal")
            ),
        )

        env_cfg_raw = dict(cfg.get("env", {}))
        env_cfg_raw.pop("data_offset", None)
        overrides = {
            k: [tuple(x) for x in v] for k, v in env_cfg_raw.pop("observation_overrides", {}).items()
        }
        env_config = EnvConfig(observation_overrides=overrides, tau=float(cfg.get("tau", 1.0)), **env_cfg_raw)

        terminal = None
        if "terminal" in cfg:
            tcfg = cfg["terminal"]
            boxes = {}
            for b in tcfg.get("boxes", []):
                path = f"sys.n{int(_need(b, 'bus', 'terminal.boxes'))}"
                if "device" in b:
                    path += f".d{int(b['device'])}"
                boxes[(path, _need(b, "state", "terminal.boxes"))] = tuple(_need(b, "box", "terminal.boxes"))
            terminal = TerminalSpec(boxes, margin=float(tcfg.get("margin", 0.0)))

        return Scenario(
            name=name,
            model=model,
            assignment=assignment,
            providers=self.providers,
            env_config=env_config,
            initializers=self.initializers,
            terminal=terminal,
            true_params=self.true_params,
        )


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"no such scenario file: {path}")
    with open(path) as fh:
        try:
            cfg = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(cfg, Mapping):
        raise ScenarioError(f"{path}: top level must be a mapping")
    return _Builder(cfg, path.parent).build()
