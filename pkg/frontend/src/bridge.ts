/** Gym-style bridge over the served environment.
 *
 * Single-agent view (config.agent) returns flat arrays and scalars; the
 * multi-agent mode mirrors the served dict shape. The bridge adds no
 * numerics: every value it returns comes verbatim from the server.
 */
import { openTransport, type Endpoint, type Transport } from "./connection.js";
import {
  expectOk,
  PROTOCOL_VERSION,
  type AgentSpaces,
  type ResetResponse,
  type SpacesResponse,
  type StepResponse,
  type Transition,
} from "./protocol.js";

export interface BridgeConfig {
  endpoint: Endpoint;
  /** Present: single-agent view of this coalition. Absent: multi-agent dict mode. */
  agent?: string;
  timeoutMs?: number;
  /** Called instead of console.warn for out-of-box action warnings. */
  warn?: (message: string) => void;
}

export interface StepResult {
  observation: number[];
  reward: number;
  terminated: boolean;
  truncated: boolean;
  info: { safe_action: number[]; penalty: number; intervened: boolean; state: number[] };
}

export interface MultiStepResult {
  transitions: Record<string, Transition>;
  state: number[];
}

export class GridEnvBridge {
  private constructor(
    private transport: Transport,
    readonly agents: string[],
    readonly spaces: Record<string, AgentSpaces>,
    private config: BridgeConfig,
  ) {}

  /** Connects, fetches spaces, and validates the selected agent id. */
  static async connect(config: BridgeConfig): Promise<GridEnvBridge> {
    const transport = await openTransport(config.endpoint, config.timeoutMs ?? 60_000);
    const spaces = expectOk<SpacesResponse>(
      await transport.request({ op: "spaces", version: PROTOCOL_VERSION }),
    );
    if (config.agent !== undefined && !spaces.agents.includes(config.agent)) {
      transport.close();
      throw new Error(`agent ${config.agent!} not served; agents are [${spaces.agents.join(", ")}]`);
    }
    return new GridEnvBridge(transport, spaces.agents, spaces.spaces, config);
  }

  get singleAgent(): string | undefined {
    return this.config.agent;
  }

  actionSpace(agent?: string): AgentSpaces["action"] {
    return this.spaces[this.requireAgent(agent)].action;
  }

  observationSpace(agent?: string): AgentSpaces["observation"] {
    return this.spaces[this.requireAgent(agent)].observation;
  }

  private requireAgent(agent?: string): string {
    const id = agent ?? this.config.agent;
    if (id === undefined) {
      throw new Error("multi-agent mode: pass an agent id");
    }
    return id;
  }

  async reset(seed?: number): Promise<number[]> {
    const r = await this.resetAll(seed);
    return r[this.requireAgent()];
  }

  async resetAll(seed?: number): Promise<Record<string, number[]>> {
    const msg: Record<string, unknown> = { op: "reset", version: PROTOCOL_VERSION };
    if (seed !== undefined) msg.seed = seed;
    const r = expectOk<ResetResponse>(await this.transport.request(msg));
    return r.observations;
  }

  private checkBox(agent: string, action: number[]): void {
    const box = this.spaces[agent].action;
    if (action.length !== box.low.length) {
      throw new Error(`action for ${agent} has ${action.length} entries, expected ${box.low.length}`);
    }
    const out = action.some((v, i) => v < box.low[i] || v > box.high[i]);
    if (out) {
      const warn = this.config.warn ?? ((m: string) => console.warn(m));
      warn(`action for ${agent} outside its box; the server clamps it`);
    }
  }

  /** Single-agent step: (obs, reward, terminated, truncated, info). */
  async step(action: number[]): Promise<StepResult> {
    const agent = this.requireAgent();
    const r = await this.stepAll({ [agent]: action });
    const tr = r.transitions[agent];
    return {
      observation: tr.observation,
      reward: tr.reward,
      terminated: tr.terminated,
      truncated: tr.truncated,
      info: {
        safe_action: tr.safe_action,
        penalty: tr.penalty,
        intervened: tr.intervened,
        state: r.state,
      },
    };
  }

  /** Multi-agent step with one action per served agent. */
  async stepAll(actions: Record<string, number[]>): Promise<MultiStepResult> {
    for (const [agent, action] of Object.entries(actions)) {
      this.checkBox(agent, action);
    }
    const r = expectOk<StepResponse>(
      await this.transport.request({ op: "step", actions, version: PROTOCOL_VERSION }),
    );
    return { transitions: r.transitions, state: r.state };
  }

  close(): void {
    this.transport.close();
  }
}
