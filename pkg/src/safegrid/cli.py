"""Command-line interface: run, validate, serve, dump-model.

Exit code 0 on success; failures print a machine-readable JSON error line to
stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .control import ControlError
from .dump import dump_model
from .env import EnvError
from .forecast import DataError
from .global_model import ModelError, validate_model
from .runlog import run_simulation
from .scenario import ScenarioError, load_scenario

KNOWN_ERRORS = (ScenarioError, ModelError, ControlError, EnvError, DataError, OSError, ValueError)


def _fail(kind: str, message: str, code: int = 1) -> int:
    sys.stderr.write(json.dumps({"error": {"type": kind, "message": message}}) + "\n")
    return code


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    env = scenario.build_env()
    log, summary = run_simulation(env, steps=args.steps, out_dir=Path(args.out), seed=args.seed)
    payload = summary.to_json()
    payload["out_dir"] = str(Path(args.out).resolve())
    print(json.dumps(payload, indent=2, sort_keys=True))
    if summary.failure is not None and args.strict:
        return _fail("simulation-failure", summary.failure)
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    issues = validate_model(scenario.model)
    if issues:
        return _fail("invalid-model", "; ".join(issues))
    scenario.assignment.validate(scenario.model)
    print(
        json.dumps(
            {
                "ok": True,
                "name": scenario.name,
                "blocks": len(scenario.model.blocks),
                "agents": [c.name for c in scenario.assignment.coalitions if c.controller.kind == "external"],
                "coalitions": [c.name for c in scenario.assignment.coalitions],
                "balancing": scenario.assignment.balancing,
            }
        )
    )
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    if args.stdio:
        from .server import serve_stdio

        serve_stdio(scenario)
    else:
        from .server import serve_tcp

        serve_tcp(scenario, host=args.host, port=args.port)
    return 0


def cmd_dump_model(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    sys.stdout.write(dump_model(scenario.model))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safegrid", description="Microgrid models, robust MPC, safe RL environments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario with all-internal controllers")
    p_run.add_argument("scenario")
    p_run.add_argument("--steps", type=int, default=None, help="steps to simulate (default: episode length)")
    p_run.add_argument("--out", default="out", help="output directory for steps.csv / summary.json")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--strict", action="store_true", help="nonzero exit when the run fails mid-episode")
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", help="parse and validate a scenario")
    p_val.add_argument("scenario")
    p_val.set_defaults(func=cmd_validate)

    p_srv = sub.add_parser("serve", help="serve the environment over the wire protocol")
    p_srv.add_argument("scenario")
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=0, help="TCP port (0 = ephemeral, announced on stdout)")
    p_srv.add_argument("--stdio", action="store_true", help="serve over stdin/stdout instead of TCP")
    p_srv.set_defaults(func=cmd_serve)

    p_dump = sub.add_parser("dump-model", help="print the scenario-dump serialization of the global model")
    p_dump.add_argument("scenario")
    p_dump.set_defaults(func=cmd_dump_model)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KNOWN_ERRORS as exc:
        return _fail(type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
