import { spawn, type ChildProcessWithoutNullStreams } from "node:child_process";
import * as net from "node:net";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { GridEnvBridge } from "../src/bridge.js";
import { checkEnv } from "../src/checker.js";

const here = path.dirname(fileURLToPath(import.meta.url));
const repoRoot = path.resolve(here, "..", "..");
const scenario = path.join(repoRoot, "scenarios", "agent_household.yaml");

let server: ChildProcessWithoutNullStreams;
let port = 0;

function startServer(): Promise<number> {
  return new Promise((resolve, reject) => {
    server = spawn("python3", ["-m", "safegrid.cli", "serve", scenario, "--port", "0"], {
      cwd: repoRoot,
    });
    let banner = "";
    const onData = (chunk: Buffer) => {
      banner += chunk.toString();
      const line = banner.split("\n")[0];
      if (line.trim().length > 0) {
        server.stdout.off("data", onData);
        resolve(JSON.parse(line).listening.port as number);
      }
    };
    server.stdout.on("data", onData);
    server.once("error", reject);
    server.stderr.on("data", () => undefined);
  });
}

/** Minimal raw NDJSON client, independent of the bridge implementation. */
class RawClient {
  private socket!: net.Socket;
  private buffer = "";
  private waiters: Array<(line: string) => void> = [];

  async connect(p: number): Promise<void> {
    await new Promise<void>((resolve, reject) => {
      this.socket = net.createConnection(p, "127.0.0.1");
      this.socket.setEncoding("utf8");
      this.socket.once("connect", () => resolve());
      this.socket.once("error", reject);
      this.socket.on("data", (chunk: string) => {
        this.buffer += chunk;
        let idx: number;
        while ((idx = this.buffer.indexOf("\n")) >= 0) {
          const line = this.buffer.slice(0, idx);
          this.buffer = this.buffer.slice(idx + 1);
          const w = this.waiters.shift();
          if (w) w(line);
        }
      });
    });
  }

  rpc(msg: object): Promise<any> {
    return new Promise((resolve) => {
      this.waiters.push((line) => resolve(JSON.parse(line)));
      this.socket.write(JSON.stringify(msg) + "\n");
    });
  }

  close(): void {
    this.socket.destroy();
  }
}

beforeAll(async () => {
  port = await startServer();
}, 120_000);

afterAll(() => {
  server?.kill();
});

describe("bridge over TCP", () => {
  it("connects, validates agents, and surfaces spaces", async () => {
    const bridge = await GridEnvBridge.connect({
      endpoint: { host: "127.0.0.1", port },
      agent: "agent0",
    });
    expect(bridge.agents).toEqual(["agent0"]);
    expect(bridge.actionSpace()).toEqual({ low: [-2], high: [2] });
    expect(bridge.observationSpace().low.length).toBeGreaterThan(0);
    bridge.close();
  }, 60_000);

  it("rejects unknown agent ids at construction", async () => {
    await expect(
      GridEnvBridge.connect({ endpoint: { host: "127.0.0.1", port }, agent: "ghost" }),
    ).rejects.toThrow(/ghost/);
  }, 60_000);

  it("rejects unreachable endpoints at construction", async () => {
    await expect(
      GridEnvBridge.connect({ endpoint: { host: "127.0.0.1", port: 1 }, agent: "agent0" }),
    ).rejects.toThrow();
  }, 60_000);

  it("reset is deterministic for a fixed seed", async () => {
    const bridge = await GridEnvBridge.connect({
      endpoint: { host: "127.0.0.1", port },
      agent: "agent0",
    });
    const a = await bridge.reset(7);
    const b = await bridge.reset(7);
    expect(a).toEqual(b);
    expect(a.length).toBe(bridge.observationSpace().low.length);
    bridge.close();
  }, 60_000);

  it("10-step scripted episode matches the raw protocol bit-for-bit", async () => {
    // scripted action sequence; deterministic server => the bridge must
    // return exactly what a raw client records for the same session script
    const script = [0.5, -0.5, 1.0, 5.0, -8.0, 0.0, 0.3, -0.3, 2.0, -2.0].map((v) => [v]);

    const raw = new RawClient();
    await raw.connect(port);
    await raw.rpc({ op: "reset", seed: 99, version: 1 });
    const rawRecords: any[] = [];
    for (const action of script) {
      const r = await raw.rpc({ op: "step", actions: { agent0: action }, version: 1 });
      expect(r.ok).toBe(true);
      rawRecords.push(r);
    }
    raw.close();

    const warnings: string[] = [];
    const bridge = await GridEnvBridge.connect({
      endpoint: { host: "127.0.0.1", port },
      agent: "agent0",
      warn: (m) => warnings.push(m),
    });
    await bridge.reset(99);
    for (let k = 0; k < script.length; k++) {
      const out = await bridge.step(script[k]);
      const ref = rawRecords[k].transitions.agent0;
      expect(out.observation).toEqual(ref.observation);
      expect(out.reward).toBe(ref.reward);
      expect(out.terminated).toBe(ref.terminated);
      expect(out.truncated).toBe(ref.truncated);
      expect(out.info.safe_action).toEqual(ref.safe_action);
      expect(out.info.penalty).toBe(ref.penalty);
      expect(out.info.intervened).toBe(ref.intervened);
      expect(out.info.state).toEqual(rawRecords[k].state);
      if (out.terminated || out.truncated) break;
    }
    expect(warnings.length).toBeGreaterThan(0); // 5.0 / -8.0 are out of the box
    bridge.close();
  }, 120_000);

  it("intervened steps carry a negative penalty in info", async () => {
    const bridge = await GridEnvBridge.connect({
      endpoint: { host: "127.0.0.1", port },
      agent: "agent0",
      warn: () => undefined,
    });
    await bridge.reset(3);
    // drain the battery (soc 4, capacity 8, |p| <= 2), then over-discharge
    let intervened = false;
    let penalty = 0;
    for (let k = 0; k < 6; k++) {
      const out = await bridge.step([-2.0]);
      if (out.info.intervened) {
        intervened = true;
        penalty = out.info.penalty;
        break;
      }
    }
    expect(intervened).toBe(true);
    expect(penalty).toBeLessThan(0);
    bridge.close();
  }, 120_000);

  it("multi-agent dict mode returns one entry per agent id", async () => {
    const bridge = await GridEnvBridge.connect({ endpoint: { host: "127.0.0.1", port } });
    const obs = await bridge.resetAll(0);
    expect(Object.keys(obs)).toEqual(["agent0"]);
    const r = await bridge.stepAll({ agent0: [0.1] });
    expect(Object.keys(r.transitions)).toEqual(["agent0"]);
    expect(Array.isArray(r.state)).toBe(true);
    expect(() => bridge.actionSpace()).toThrow(/agent id/);
    bridge.close();
  }, 60_000);

  it("passes the environment checker against the served toy scenario", async () => {
    const bridge = await GridEnvBridge.connect({
      endpoint: { host: "127.0.0.1", port },
      agent: "agent0",
    });
    const report = await checkEnv(bridge);
    expect(report.issues).toEqual([]);
    expect(report.ok).toBe(true);
    bridge.close();
  }, 120_000);
});

describe("bridge over stdio subprocess", () => {
  it("serves one session over stdin/stdout", async () => {
    const bridge = await GridEnvBridge.connect({
      endpoint: { command: "python3", args: ["-m", "safegrid.cli", "serve", scenario, "--stdio"] },
      agent: "agent0",
    });
    const obs = await bridge.reset(0);
    expect(obs.length).toBe(bridge.observationSpace().low.length);
    const out = await bridge.step([0.5]);
    expect(Number.isFinite(out.reward)).toBe(true);
    bridge.close();
  }, 120_000);
});
