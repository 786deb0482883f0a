"""Trajectory logging and the batch simulation runner.

steps.csv holds only deterministic per-step quantities (same seed ->
byte-identical file); wall-clock timings live in the summary under the
separate "timing" key and in the in-memory records.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .control import ControlError, InfeasibleProblem
from .env import GridEnv


@dataclass
class TrajectoryLog:
    """Append-only per-step records (one record per simulated step)."""

    records: list[dict] = field(default_factory=list)

    def append(self, record: dict, timing: Optional[dict] = None) -> None:
        rec = dict(record)
        if timing is not None:
            rec["timing"] = dict(timing)
        self.records.append(rec)

    # -- deterministic flat table -------------------------------------------------

    def _columns(self) -> list[str]:
        cols: set[str] = set()
        for rec in self.records:
            cols.update(f"value.{k}" for k in rec.get("values", {}))
            for name, r in rec.get("rewards", {}).items():
                cols.update(f"reward.{name}.{k}" for k in r if k != "intervened")
                cols.add(f"reward.{name}.intervened")
            cols.update(f"bound_lo.{k}" for k in rec.get("bounds", {}))
            cols.update(f"bound_hi.{k}" for k in rec.get("bounds", {}))
        return ["step", "terminated", "truncated", "n_violations", "imbalance_cost"] + sorted(cols)

    def rows(self) -> tuple[list[str], list[list]]:
        cols = self._columns()
        out = []
        for rec in self.records:
            flat: dict[str, object] = {
                "step": rec["step"],
                "terminated": int(bool(rec.get("terminated"))),
                "truncated": int(bool(rec.get("truncated"))),
                "n_violations": len(rec.get("violations", [])),
                "imbalance_cost": repr(float(rec.get("imbalance_cost", 0.0))),
            }
            for k, v in rec.get("values", {}).items():
                flat[f"value.{k}"] = repr(float(v))
            for name, r in rec.get("rewards", {}).items():
                for k, v in r.items():
                    flat[f"reward.{name}.{k}"] = int(v) if k == "intervened" else repr(float(v))
            for k, (lo, hi) in ((k, v) for k, v in rec.get("bounds", {}).items()):
                flat[f"bound_lo.{k}"] = repr(float(lo))
                flat[f"bound_hi.{k}"] = repr(float(hi))
            out.append([flat.get(c, "") for c in cols])
        return cols, out

    def write_csv(self, path: Path) -> None:
        cols, rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            w.writerows(rows)


@dataclass
class RunSummary:
    steps_completed: int = 0
    failure: Optional[str] = None
    violation_count: int = 0
    violations: list[str] = field(default_factory=list)
    total_reward: dict[str, float] = field(default_factory=dict)
    total_cost: dict[str, float] = field(default_factory=dict)
    total_imbalance_cost: float = 0.0
    final_states: dict[str, float] = field(default_factory=dict)
    seed: Optional[int] = None
    timing: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "steps_completed": self.steps_completed,
            "failure": self.failure,
            "violation_count": self.violation_count,
            "violations": list(self.violations),
            "total_reward": {k: float(v) for k, v in sorted(self.total_reward.items())},
            "total_cost": {k: float(v) for k, v in sorted(self.total_cost.items())},
            "total_imbalance_cost": float(self.total_imbalance_cost),
            "final_states": {k: float(v) for k, v in sorted(self.final_states.items())},
            "seed": self.seed,
            "timing": {k: float(v) for k, v in sorted(self.timing.items())},
        }
        return out

    def write_json(self, path: Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_simulation(
    env: GridEnv,
    steps: Optional[int] = None,
    out_dir: Optional[Path] = None,
    seed: Optional[int] = None,
) -> tuple[TrajectoryLog, RunSummary]:
    """Run the closed loop with all-internal controllers, logging every step.

    Controller infeasibility or a constraint violation ends the run with the
    failure recorded in the summary (the log keeps completed steps).
    """
    if env.agents:
        raise ControlError("run_simulation drives all-internal scenarios; external agents need serve/step")
    seed = env.config.seed if seed is None else seed
    steps = env.config.episode_length if steps is None else min(steps, env.config.episode_length)
    log = TrajectoryLog()
    summary = RunSummary(seed=seed)
    env.reset(seed=seed)
    phase_totals: dict[str, float] = {}
    completed = 0
    for _ in range(steps):
        try:
            env.step({})
        except (InfeasibleProblem, ControlError) as exc:
            summary.failure = str(exc)
            break
        rec = env.last_record
        log.append(rec, env.last_timing)
        for k, v in (env.last_timing or {}).items():
            phase_totals[k] = phase_totals.get(k, 0.0) + v
        completed += 1
        summary.total_imbalance_cost += float(rec.get("imbalance_cost", 0.0))
        for name, r in rec.get("rewards", {}).items():
            summary.total_reward[name] = summary.total_reward.get(name, 0.0) + r["reward"]
            summary.total_cost[name] = summary.total_cost.get(name, 0.0) + r["J"]
        summary.violations.extend(rec.get("violations", []))
        if rec.get("terminated"):
            break
        if rec.get("truncated"):
            break
    summary.steps_completed = completed
    summary.violation_count = len(summary.violations)
    summary.final_states = {f"{p}.{n}": v for (p, n), v in env.sim.states(env.t).items()}
    if completed:
        summary.timing = {f"mean_{k}_s": v / completed for k, v in phase_totals.items()}
        summary.timing["mean_step_s"] = sum(phase_totals.values()) / completed
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log.write_csv(out_dir / "steps.csv")
        summary.write_json(out_dir / "summary.json")
    return log, summary
