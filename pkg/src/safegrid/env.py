"""Steppable single-/multi-agent decision environment over the simulated grid.

Each external-agent coalition is one agent; internal MPC/rule controllers are
solved inside step(). Step phases, in order: (1) disturbances and forecasts,
(2) stage-1 inputs (safeguarded external actions, internal controllers),
(3) true dynamics, (4) free algebraic variables, (5) stage-2 dispatch and
power flow, (6) rewards with safeguard penalties, (7) logging.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .control import (
    ControlAssignment,
    Dispatcher,
    InfeasibleProblem,
    OcpData,
    redistribute_imbalance,
)
from .forecast import DataProvider
from .global_model import GlobalModel, ModelError
from .ocp import TerminalSpec, subtree_paths
from .simulate import Simulator, Violation
from .symbolic import VarKind

PHASES = (
    "disturbances",
    "stage1_inputs",
    "dynamics",
    "algebraic",
    "stage2",
    "rewards",
    "log",
)


class EnvError(RuntimeError):
    pass


@dataclass
class ParamInitializer:
    """Initial-value policy applied on every reset."""

    kind: str = "fixed"  # fixed | uniform-range | cyclic-list
    value: float = 0.0
    range: tuple[float, float] = (0.0, 1.0)
    values: Sequence[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "uniform-range", "cyclic-list"):
            raise ValueError(f"unknown initializer kind {self.kind!r}")
        if self.kind == "uniform-range" and self.range[0] > self.range[1]:
            raise ValueError("initializer range inverted")
        if self.kind == "cyclic-list" and not self.values:
            raise ValueError("cyclic-list initializer needs values")

    def draw(self, rng: np.random.Generator, reset_count: int) -> float:
        if self.kind == "fixed":
            return float(self.value)
        if self.kind == "uniform-range":
            return float(rng.uniform(*self.range))
        return float(self.values[reset_count % len(self.values)])


@dataclass
class EnvConfig:
    control_horizon: int = 12        # T, steps
    forecast_horizon: int = 12       # H >= T, steps
    tau: float = 1.0                 # hours per step
    episode_length: int = 24         # steps per episode
    discount: float = 0.99           # gamma, metadata for trainers
    seed: int = 0
    unsafe_penalty: float = -50.0    # terminal reward term on violation
    done_on_violation: bool = True
    remove_duplicate_obs: bool = True
    observation_overrides: dict[str, list[tuple[str, str]]] = field(default_factory=dict)
    charge_imbalance: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must be in [0, 1)")
        if self.forecast_horizon < self.control_horizon:
            raise ValueError("forecast horizon must cover the control horizon")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")


@dataclass
class EnvTransition:
    agent: str
    observation: np.ndarray
    action: np.ndarray
    safe_action: np.ndarray
    reward: float
    penalty: float
    intervened: bool
    terminated: bool
    truncated: bool

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated

    def to_json(self) -> dict:
        return {
            "observation": [float(v) for v in self.observation],
            "action": [float(v) for v in self.action],
            "safe_action": [float(v) for v in self.safe_action],
            "reward": float(self.reward),
            "penalty": float(self.penalty),
            "intervened": bool(self.intervened),
            "terminated": bool(self.terminated),
            "truncated": bool(self.truncated),
            "done": bool(self.done),
        }


@dataclass
class ObsSlot:
    kind: str  # state | disturbance | forecast | override
    path: str
    name: str
    step: int  # forecast slot index (1..H) or 0
    lo: float
    hi: float


class GridEnv:
    """POMG environment: reset() -> observations, step(actions) -> transitions."""

    def __init__(
        self,
        model: GlobalModel,
        assignment: ControlAssignment,
        providers: Mapping[tuple[str, str], DataProvider],
        config: EnvConfig,
        initializers: Optional[Mapping[tuple[str, str], ParamInitializer]] = None,
        terminal: Optional[TerminalSpec] = None,
        true_param_values: Optional[Mapping[tuple[str, str], float]] = None,
    ):
        self.model = model
        self.config = config
        self.providers = dict(providers)
        self.initializers = dict(initializers or {})
        self.true_param_values = dict(true_param_values or {})
        self._validate_providers()
        assignment.validate(model)
        self.assignment = assignment
        uncertain = {k for k, p in self.providers.items() if p.uncertain}
        self.dispatcher = Dispatcher(
            model, assignment, config.control_horizon, terminal=terminal, uncertain_disturbances=uncertain
        )
        self.sim = Simulator(model)
        self.agents = [co.name for co in assignment.coalitions if co.controller.kind == "external"]
        self._codecs = {co.name: self._build_codec(co.name) for co in assignment.coalitions}
        self.t = 0
        self.reset_count = 0
        self.rng = np.random.default_rng(config.seed)
        self.last_observations: dict[str, np.ndarray] = {}
        self.violations: list[Violation] = []
        self.finished = False

    # -- structure ---------------------------------------------------------------

    def _validate_providers(self) -> None:
        for path, blk in self.model.blocks.items():
            for name, var in blk.vars.items():
                if var.kind != VarKind.DISTURBANCE or name.endswith(("__lo", "__hi")):
                    continue
                if (path, name) not in self.providers and name not in blk.disturbance_defaults:
                    raise EnvError(f"disturbance {path}.{name} has no data provider")
        for (path, name) in self.providers:
            var = self.model.block(path).vars.get(name)
            if var is None or var.kind != VarKind.DISTURBANCE:
                raise EnvError(f"provider bound to non-disturbance {path}.{name}")

    def coalition_paths(self, name: str) -> list[str]:
        co = next(c for c in self.assignment.coalitions if c.name == name)
        return subtree_paths(self.model, co.buses)

    def _build_codec(self, coalition: str) -> list[ObsSlot]:
        H = self.config.forecast_horizon
        slots: list[ObsSlot] = []
        for path in self.coalition_paths(coalition):
            blk = self.model.block(path)
            for name, var in blk.vars.items():
                if name.endswith(("__lo", "__hi")):
                    continue
                lo, hi = var.effective_bounds()
                if var.kind == VarKind.STATE:
                    slots.append(ObsSlot("state", path, name, 0, lo, hi))
                elif var.kind == VarKind.DISTURBANCE:
                    slots.append(ObsSlot("disturbance", path, name, 0, lo, hi))
                    for k in range(1, H + 1):
                        slots.append(ObsSlot("forecast", path, name, k, lo, hi))
        for (path, name) in self.config.observation_overrides.get(coalition, []):
            var = self.model.block(path).vars.get(name)
            if var is None:
                raise EnvError(f"observation override {path}.{name} does not exist")
            lo, hi = var.effective_bounds()
            slots.append(ObsSlot("override", path, name, 0, lo, hi))
        return slots

    def spaces(self) -> dict[str, dict[str, dict[str, list[float]]]]:
        """Per external agent: action/observation boxes (low/high lists)."""
        out: dict[str, dict] = {}
        for co in self.assignment.coalitions:
            if co.controller.kind != "external":
                continue
            order = self.dispatcher.action_order(co)
            for path, name, lo, hi in order:
                if lo == -float("inf") or hi == float("inf"):
                    raise EnvError(f"input {path}.{name} is unbounded; declare limits for the action space")
            slots = self._codecs[co.name]
            out[co.name] = {
                "action": {"low": [o[2] for o in order], "high": [o[3] for o in order]},
                "observation": {"low": [s.lo for s in slots], "high": [s.hi for s in slots]},
            }
        return out

    # -- data assembly -----------------------------------------------------------

    def _observe_providers(self) -> tuple[dict[tuple[str, str], float], OcpData]:
        T = self.config.control_horizon
        current: dict[tuple[str, str], float] = {}
        data = OcpData()
        for (path, name), prov in self.providers.items():
            series, (lo, hi) = prov.series_for_ocp(self.t, T)
            # simulation and observations use the realized value; controllers
            # plan on the nowcast/forecast series
            current[(path, name)] = prov.current(self.t)
            data.series[(path, name)] = series
            if prov.uncertain:
                data.boxes[(path, name)] = (lo, hi)
        for path, blk in self.model.blocks.items():
            for name, default in blk.disturbance_defaults.items():
                if (path, name) in self.providers:
                    continue
                current[(path, name)] = float(default)
                data.series[(path, name)] = np.full(T + 1, float(default))
        self._forecast_cache = {k: self.providers[k].observe(self.t, self.config.forecast_horizon) for k in self.providers}
        return current, data

    def _observation(self, coalition: str) -> np.ndarray:
        out: list[float] = []
        for s in self._codecs[coalition]:
            if s.kind == "state":
                out.append(self.sim.lookup(s.path, s.name, self.t))
            elif s.kind == "disturbance":
                out.append(self.sim.lookup(s.path, s.name, self.t))
            elif s.kind == "forecast":
                _, fc, _ = self._forecast_cache[(s.path, s.name)]
                out.append(float(fc[s.step - 1]))
            else:
                # overrides may reference algebraic values, which lag one
                # step (computed while simulating); zero before any step ran
                value = 0.0
                for t in (self.t, self.t - 1):
                    try:
                        value = self.sim.lookup(s.path, s.name, t)
                        break
                    except KeyError:
                        continue
                out.append(value)
        return np.asarray(out, float)

    def global_state(self) -> np.ndarray:
        """Concatenation of all coalition observations (duplicates removable)."""
        parts: list[np.ndarray] = []
        seen: set[tuple] = set()
        for co in self.assignment.coalitions:
            obs = self._observation(co.name)
            if not self.config.remove_duplicate_obs:
                parts.append(obs)
                continue
            keep = []
            for s, v in zip(self._codecs[co.name], obs):
                key = (s.path, s.name, s.step)
                if key in seen:
                    continue
                seen.add(key)
                keep.append(v)
            parts.append(np.asarray(keep, float))
        return np.concatenate(parts) if parts else np.zeros(0)

    # -- lifecycle ---------------------------------------------------------------

    def reset(self, seed: Optional[int] = None) -> dict[str, np.ndarray]:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.finished = False
        self.violations = []

        # parameter initializers (nominal values, shared with controllers)
        for (path, name), init in self.initializers.items():
            value = init.draw(self.rng, self.reset_count)
            blk = self.model.block(path)
            if name not in blk.param_values:
                raise EnvError(f"initializer targets unknown parameter {path}.{name}")
            var_name = name[: -len("_init")] if name.endswith("_init") else None
            if var_name and var_name in blk.vars:
                lo, hi = blk.vars[var_name].effective_bounds()
                if not (lo - 1e-12 <= value <= hi + 1e-12):
                    raise EnvError(f"initializer for {path}.{name} drew {value} outside [{lo}, {hi}]")
            blk.param_values[name] = value
            for suffix in ("__lo", "__hi"):
                mirrored = f"{name}{suffix}"
                for holder in list(self.dispatcher.models.values()) + list(self.dispatcher.safeguard_models.values()):
                    hb = holder.block(path)
                    if name in hb.param_values:
                        hb.param_values[name] = value
                    if mirrored in hb.param_values:
                        hb.param_values[mirrored] = value

        # true parameter values: configured, else sampled inside declared boxes
        true_params: dict[tuple[str, str], float] = {}
        for path, blk in self.model.blocks.items():
            for name, (lo, hi) in blk.param_uncertainty.items():
                if name.endswith("_init"):
                    continue
                key = (path, name)
                if key in self.true_param_values:
                    true_params[key] = float(self.true_param_values[key])
                else:
                    true_params[key] = float(self.rng.uniform(lo, hi))
        self.sim.true_params = true_params

        initial = {
            (path, name): self.model.block(path).param_values[f"{name}_init"]
            for path, blk in self.model.blocks.items()
            for name, var in blk.vars.items()
            if var.kind == VarKind.STATE and not name.endswith(("__lo", "__hi"))
        }
        self.sim.reset(initial)
        self.reset_count += 1

        current, self._data = self._observe_providers()
        self.sim.record_disturbances(0, current)
        self.last_observations = {a: self._observation(a) for a in self.agents}
        return dict(self.last_observations)

    def step(self, actions: Optional[Mapping[str, Sequence[float]]] = None) -> dict[str, EnvTransition]:
        if self.finished:
            raise EnvError("episode finished; call reset()")
        actions = dict(actions or {})
        for agent in self.agents:
            if agent not in actions:
                raise EnvError(f"missing action for agent {agent!r}")
        timing: dict[str, float] = {}
        t = self.t

        # phase 1: disturbances & forecasts
        tic = time.perf_counter()
        current, data = self._observe_providers()
        self.sim.record_disturbances(t, current)
        timing["disturbances"] = time.perf_counter() - tic

        # phase 2: stage-1 inputs
        tic = time.perf_counter()
        x0 = self.sim.states(t)
        stage1 = self.dispatcher.stage1(x0, data, start=t, external_actions=actions)
        inputs: dict[tuple[str, str], float] = {}
        for s in stage1:
            inputs.update(s.inputs)
        timing["stage1_inputs"] = time.perf_counter() - tic

        stage1_paths = {p for co in self.assignment.coalitions for p in self.coalition_paths(co.name)}

        # phase 3: true dynamics of stage-1 entities
        tic = time.perf_counter()
        self.sim.record_inputs(t, inputs)
        self.sim.execute_dynamics(t, scope=stage1_paths)
        timing["dynamics"] = time.perf_counter() - tic

        # phase 4: free algebraic variables of stage-1 entities
        tic = time.perf_counter()
        self.sim.solve_algebraic(t, scope=stage1_paths)
        timing["algebraic"] = time.perf_counter() - tic

        # phase 5: stage-2 dispatch, balancing dynamics/algebraics, power flow
        tic = time.perf_counter()
        two_stage = self.dispatcher.stage2(stage1, x0, data, start=t)
        if not two_stage.skipped_stage2:
            self.sim.record_inputs(t, two_stage.stage2_inputs)
            bal_paths = set(subtree_paths(self.model, self.assignment.balancing))
            self.sim.execute_dynamics(t, scope=bal_paths)
            self.sim.solve_algebraic(t, scope=bal_paths)
        self.sim.solve_powerflow(t)
        timing["stage2"] = time.perf_counter() - tic

        # phase 6: rewards with safeguard penalties
        tic = time.perf_counter()
        imbalance_cost = 0.0
        charges: dict[str, float] = {}
        if not two_stage.skipped_stage2 and self.assignment.balancing:
            imbalance_cost = self.sim.stage_cost(t, list(self.assignment.balancing))
            deviations = {
                co.name: abs(sum(self.sim.lookup(b, "p", t) for b in co.buses))
                for co in self.assignment.coalitions
            }
            charges = redistribute_imbalance(imbalance_cost, deviations)

        new_violations = self.sim.check_violations(t) + self.sim.check_violations(t + 1)
        self.violations.extend(new_violations)
        violating_coalitions = set()
        for v in new_violations:
            for co in self.assignment.coalitions:
                if any(v.path == b or v.path.startswith(b + ".") for b in co.buses):
                    violating_coalitions.add(co.name)

        terminated = bool(new_violations) and self.config.done_on_violation
        truncated = (t + 1) >= self.config.episode_length and not terminated

        rewards: dict[str, dict] = {}
        for i, co in enumerate(self.assignment.coalitions):
            stage_cost = self.sim.stage_cost(t, self.coalition_paths(co.name))
            j_k = stage_cost + (charges.get(co.name, 0.0) if self.config.charge_imbalance else 0.0)
            pen = stage1[i].penalty
            if co.name in violating_coalitions or (new_violations and not violating_coalitions):
                pen += self.config.unsafe_penalty
            rewards[co.name] = {
                "stage_cost": stage_cost,
                "charge": charges.get(co.name, 0.0),
                "J": j_k,
                "penalty": pen,
                "reward": -j_k + pen,
                "intervened": stage1[i].intervened,
            }
        timing["rewards"] = time.perf_counter() - tic

        # phase 7: log
        tic = time.perf_counter()
        record = {
            "step": t,
            "phases": ",".join(PHASES),
            "values": self.sim.snapshot(t),
            "next_states": {f"{p}.{n}": v for (p, n), v in self.sim.states(t + 1).items()},
            "rewards": rewards,
            "imbalance_cost": imbalance_cost,
            "violations": [v.describe() for v in new_violations],
            "terminated": terminated,
            "truncated": truncated,
            "bounds": self._predicted_bounds(stage1),
            "solver": {
                s.coalition: {"objective": s.objective} for s in stage1 if s.objective is not None
            },
        }
        self._last_record = record
        self._last_timing = timing
        timing["log"] = time.perf_counter() - tic

        self.t += 1
        self.finished = terminated or truncated
        out: dict[str, EnvTransition] = {}
        final_obs_ok = True
        try:
            current, self._data = self._observe_providers()
            self.sim.record_disturbances(self.t, current)
        except Exception:
            if not self.finished:
                raise
            final_obs_ok = False
        for agent in self.agents:
            i = next(k for k, co in enumerate(self.assignment.coalitions) if co.name == agent)
            obs = self._observation(agent) if final_obs_ok else self.last_observations[agent]
            a = np.asarray(actions[agent], float)
            order = self.dispatcher.action_order(self.assignment.coalitions[i])
            u = np.array([inputs[(p, n)] for (p, n, _, _) in order])
            out[agent] = EnvTransition(
                agent,
                obs,
                a,
                u,
                rewards[agent]["reward"],
                rewards[agent]["penalty"],
                rewards[agent]["intervened"],
                terminated,
                truncated,
            )
            self.last_observations[agent] = obs
        return out

    def _predicted_bounds(self, stage1) -> dict[str, list[float]]:
        """Next-step robust bounds per uncertain state from stage-1 solutions."""
        out: dict[str, list[float]] = {}
        for s in stage1:
            if s.compiled is None or s.result is None or s.result.x is None:
                continue
            robust = None
            for holder in (self.dispatcher.models.get(s.coalition), self.dispatcher.safeguard_models.get(s.coalition)):
                if holder is not None and holder.robust is not None and holder.robust.bound_vars:
                    robust = holder.robust
                    break
            if robust is None:
                continue
            for (path, state), (lo_n, hi_n) in robust.bound_vars.items():
                key_lo = (path, lo_n, 1)
                key_hi = (path, hi_n, 1)
                if key_lo in s.compiled.columns and key_hi in s.compiled.columns:
                    out[f"{path}.{state}"] = [
                        float(s.result.x[s.compiled.columns[key_lo]]),
                        float(s.result.x[s.compiled.columns[key_hi]]),
                    ]
        return out

    @property
    def last_record(self) -> Optional[dict]:
        return getattr(self, "_last_record", None)

    @property
    def last_timing(self) -> Optional[dict]:
        return getattr(self, "_last_timing", None)
