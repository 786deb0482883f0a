/** Environment-checker: gym-API conformance of a bridged environment.
 *
 * Mirrors the usual reset/step contract checks: well-formed boxes, in-space
 * observations with stable dimensionality, sane step tuples, seeded reset
 * determinism, and penalty/intervention consistency in info.
 */
import { GridEnvBridge } from "./bridge.js";
import type { Box } from "./protocol.js";

export interface CheckReport {
  ok: boolean;
  issues: string[];
}

function checkBoxShape(name: string, box: Box, issues: string[]): void {
  if (box.low.length !== box.high.length) {
    issues.push(`${name}: low/high lengths differ`);
  }
  if (box.low.length === 0) {
    issues.push(`${name}: empty box`);
  }
  box.low.forEach((lo, i) => {
    if (lo > box.high[i]) issues.push(`${name}[${i}]: low ${lo} > high ${box.high[i]}`);
  });
}

function inBox(values: number[], box: Box, tol = 1e-9): boolean {
  return (
    values.length === box.low.length &&
    values.every((v, i) => Number.isFinite(v) && v >= box.low[i] - tol && v <= box.high[i] + tol)
  );
}

function midAction(box: Box): number[] {
  return box.low.map((lo, i) => {
    const hi = box.high[i];
    return lo + 0.5 * (hi - lo);
  });
}

/** Runs conformance checks against a served toy scenario (a few steps). */
export async function checkEnv(bridge: GridEnvBridge, steps = 3): Promise<CheckReport> {
  const issues: string[] = [];
  for (const agent of bridge.agents) {
    checkBoxShape(`${agent}.action`, bridge.spaces[agent].action, issues);
    checkBoxShape(`${agent}.observation`, bridge.spaces[agent].observation, issues);
  }

  const first = await bridge.resetAll(1234);
  const again = await bridge.resetAll(1234);
  for (const agent of bridge.agents) {
    if (!inBox(first[agent], bridge.spaces[agent].observation)) {
      issues.push(`${agent}: reset observation outside the advertised space`);
    }
    if (JSON.stringify(first[agent]) !== JSON.stringify(again[agent])) {
      issues.push(`${agent}: reset with the same seed is not deterministic`);
    }
  }

  let dims: Record<string, number> = {};
  for (const agent of bridge.agents) dims[agent] = first[agent].length;
  for (let k = 0; k < steps; k++) {
    const actions: Record<string, number[]> = {};
    for (const agent of bridge.agents) actions[agent] = midAction(bridge.spaces[agent].action);
    const r = await bridge.stepAll(actions);
    for (const agent of bridge.agents) {
      const tr = r.transitions[agent];
      if (!Number.isFinite(tr.reward)) issues.push(`${agent}: non-finite reward`);
      if (typeof tr.terminated !== "boolean" || typeof tr.truncated !== "boolean") {
        issues.push(`${agent}: terminated/truncated must be booleans`);
      }
      if (tr.observation.length !== dims[agent]) {
        issues.push(`${agent}: observation dimension changed mid-episode`);
      }
      if (tr.safe_action.length !== bridge.spaces[agent].action.low.length) {
        issues.push(`${agent}: safe action has the wrong dimension`);
      }
      if (tr.done !== (tr.terminated || tr.truncated)) {
        issues.push(`${agent}: done flag inconsistent with terminated/truncated`);
      }
      if (tr.done) return { ok: issues.length === 0, issues };
    }
  }
  return { ok: issues.length === 0, issues };
}
