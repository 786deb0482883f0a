"""Wire protocol for external agents: newline-delimited JSON over TCP or stdio.

Requests: {"op": "spaces"}, {"op": "reset", "seed": int},
{"op": "step", "actions": {agent-id: [floats]}}. Every message carries a
protocol version field; unknown ops get an error response and the connection
stays open. One environment session per connection.
"""
from __future__ import annotations

import json
import socketserver
import sys
import threading
from typing import IO, Optional

import numpy as np

from .control import ControlError, InfeasibleProblem
from .env import EnvError, GridEnv
from .scenario import Scenario

PROTOCOL_VERSION = 1

# JSON has no Infinity literal; unbounded box edges travel as +-1e308
JSON_INF = 1.0e308


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, float):
        if value == float("inf"):
            return JSON_INF
        if value == -float("inf"):
            return -JSON_INF
        if value != value:  # NaN never belongs on the wire
            raise ValueError("NaN in protocol payload")
    return value


def encode(message: dict) -> str:
    return json.dumps(_json_safe(message), allow_nan=False)


def _error(code: str, message: str) -> dict:
    return {"version": PROTOCOL_VERSION, "ok": False, "error": {"code": code, "message": message}}


class EnvSession:
    """One environment instance driven by protocol messages."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.env: Optional[GridEnv] = None
        self.was_reset = False

    def handle(self, line: str) -> dict:
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            return _error("bad-json", str(exc))
        if not isinstance(msg, dict):
            return _error("bad-request", "message must be a JSON object")
        version = msg.get("version", PROTOCOL_VERSION)
        if version != PROTOCOL_VERSION:
            return _error("bad-version", f"unsupported protocol version {version}")
        op = msg.get("op")
        try:
            if op == "spaces":
                return self._spaces()
            if op == "reset":
                return self._reset(msg)
            if op == "step":
                return self._step(msg)
        except (InfeasibleProblem, ControlError, EnvError) as exc:
            return _error("env-error", str(exc))
        except Exception as exc:  # pragma: no cover - defensive
            return _error("internal", f"{type(exc).__name__}: {exc}")
        return _error("unknown-op", f"unknown op {op!r}")

    def _ensure_env(self) -> GridEnv:
        if self.env is None:
            self.env = self.scenario.build_env()
        return self.env

    def _spaces(self) -> dict:
        env = self._ensure_env()
        return {
            "version": PROTOCOL_VERSION,
            "ok": True,
            "op": "spaces",
            "agents": env.agents,
            "spaces": env.spaces(),
            "discount": env.config.discount,
            "episode_length": env.config.episode_length,
        }

    def _reset(self, msg: dict) -> dict:
        env = self._ensure_env()
        seed = msg.get("seed")
        if seed is not None and not isinstance(seed, int):
            return _error("bad-request", "seed must be an integer")
        obs = env.reset(seed=seed)
        self.was_reset = True
        return {
            "version": PROTOCOL_VERSION,
            "ok": True,
            "op": "reset",
            "t": env.t,
            "observations": {a: [float(v) for v in o] for a, o in obs.items()},
            "state": [float(v) for v in env.global_state()],
        }

    def _step(self, msg: dict) -> dict:
        env = self._ensure_env()
        if not self.was_reset:
            return _error("not-reset", "call reset before step")
        actions = msg.get("actions", {})
        if not isinstance(actions, dict):
            return _error("bad-request", "actions must map agent id to a float list")
        unknown = [a for a in actions if a not in env.agents]
        if unknown:
            return _error("bad-request", f"unknown agent id(s) {unknown}; agents are {env.agents}")
        transitions = env.step({a: np.asarray(v, float) for a, v in actions.items()})
        return {
            "version": PROTOCOL_VERSION,
            "ok": True,
            "op": "step",
            "t": env.t,
            "transitions": {a: tr.to_json() for a, tr in transitions.items()},
            "state": [float(v) for v in env.global_state()],
        }


def serve_stdio(scenario: Scenario, inp: Optional[IO[str]] = None, out: Optional[IO[str]] = None) -> None:
    """Serve one session over stdin/stdout (newline-delimited JSON)."""
    inp = inp or sys.stdin
    out = out or sys.stdout
    session = EnvSession(scenario)
    for line in inp:
        line = line.strip()
        if not line:
            continue
        out.write(encode(session.handle(line)) + "\n")
        out.flush()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        session = EnvSession(self.server.scenario)  # type: ignore[attr-defined]
        for raw in self.rfile:
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            response = session.handle(line)
            self.wfile.write((encode(response) + "\n").encode("utf-8"))


class EnvServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, scenario: Scenario, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.scenario = scenario

    @property
    def port(self) -> int:
        return self.server_address[1]

    def serve_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


def serve_tcp(scenario: Scenario, host: str = "127.0.0.1", port: int = 0, announce: bool = True) -> None:
    server = EnvServer(scenario, host, port)
    if announce:
        print(json.dumps({"version": PROTOCOL_VERSION, "listening": {"host": host, "port": server.port}}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
