/** Wire protocol messages: newline-delimited JSON, version field everywhere. */

export const PROTOCOL_VERSION = 1;

export interface Box {
  low: number[];
  high: number[];
}

export interface AgentSpaces {
  action: Box;
  observation: Box;
}

export interface SpacesResponse {
  version: number;
  ok: true;
  op: "spaces";
  agents: string[];
  spaces: Record<string, AgentSpaces>;
  /** Trainer metadata mirrored from the environment configuration. */
  discount?: number;
  episode_length?: number;
}

export interface ResetResponse {
  version: number;
  ok: true;
  op: "reset";
  t: number;
  observations: Record<string, number[]>;
  state: number[];
}

export interface Transition {
  observation: number[];
  action: number[];
  safe_action: number[];
  reward: number;
  penalty: number;
  intervened: boolean;
  terminated: boolean;
  truncated: boolean;
  done: boolean;
}

export interface StepResponse {
  version: number;
  ok: true;
  op: "step";
  t: number;
  transitions: Record<string, Transition>;
  state: number[];
}

export interface ErrorResponse {
  version: number;
  ok: false;
  error: { code: string; message: string };
}

export type Response = SpacesResponse | ResetResponse | StepResponse | ErrorResponse;

export class ProtocolError extends Error {
  readonly code: string;
  constructor(code: string, message: string) {
    super(`${code}: ${message}`);
    this.code = code;
  }
}

export function expectOk<T extends Response>(response: Response): T {
  if (!response.ok) {
    throw new ProtocolError(response.error.code, response.error.message);
  }
  return response as T;
}
