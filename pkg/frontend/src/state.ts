/**
 * The full view state: orbit pose, prompt list, render mode, blend factor.
 * Serializable to a URL fragment so a displayed view is reproducible given a
 * snapshot version.
 */

import { OrbitState } from "./camera.js";

export type RenderMode = "color" | "depth" | "segmentation";

export interface ViewState {
  orbit: OrbitState;
  mode: RenderMode;
  prompts: string[];
  blend: number; // 0 = pure rgb, 1 = pure class colors
  sessionId: string | null;
}

export const DEFAULT_VIEW: ViewState = {
  orbit: { target: [2, 2, 0.55], radius: 1.5, azimuth: 0.0, elevation: 0.5 },
  mode: "color",
  prompts: [],
  blend: 0.55,
  sessionId: null,
};

/** Segmentation mode needs at least one prompt to define the label space. */
export function canSelectSegmentation(state: ViewState): boolean {
  return state.prompts.length > 0;
}

export function normalizeMode(state: ViewState): RenderMode {
  if (state.mode === "segmentation" && !canSelectSegmentation(state)) {
    return "color";
  }
  return state.mode;
}

export function addPrompt(state: ViewState, label: string): ViewState {
  const trimmed = label.trim();
  if (!trimmed || state.prompts.includes(trimmed)) return state;
  return { ...state, prompts: [...state.prompts, trimmed] };
}

export function removePrompt(state: ViewState, label: string): ViewState {
  const prompts = state.prompts.filter((p) => p !== label);
  const next = { ...state, prompts };
  return { ...next, mode: normalizeMode(next) };
}

export function movePrompt(state: ViewState, from: number, to: number): ViewState {
  if (from < 0 || from >= state.prompts.length || to < 0 || to >= state.prompts.length) {
    return state;
  }
  const prompts = [...state.prompts];
  const [moved] = prompts.splice(from, 1);
  prompts.splice(to, 0, moved);
  return { ...state, prompts };
}

export function serializeView(state: ViewState): string {
  const p = new URLSearchParams();
  const o = state.orbit;
  p.set("t", o.target.map((v) => v.toPrecision(8)).join(","));
  p.set("r", o.radius.toPrecision(8));
  p.set("a", o.azimuth.toPrecision(8));
  p.set("e", o.elevation.toPrecision(8));
  p.set("m", state.mode);
  p.set("b", state.blend.toFixed(3));
  if (state.prompts.length) p.set("p", state.prompts.join("|"));
  if (state.sessionId) p.set("s", state.sessionId);
  return p.toString();
}

export function deserializeView(fragment: string): ViewState {
  const p = new URLSearchParams(fragment);
  const state: ViewState = JSON.parse(JSON.stringify(DEFAULT_VIEW));
  const target = p.get("t")?.split(",").map(Number);
  if (target?.length === 3 && target.every(Number.isFinite)) {
    state.orbit.target = target as [number, number, number];
  }
  const num = (key: string): number | null => {
    const raw = p.get(key);
    if (raw === null) return null;
    const v = Number(raw);
    return Number.isFinite(v) ? v : null;
  };
  state.orbit.radius = num("r") ?? state.orbit.radius;
  state.orbit.azimuth = num("a") ?? state.orbit.azimuth;
  state.orbit.elevation = num("e") ?? state.orbit.elevation;
  state.blend = Math.min(1, Math.max(0, num("b") ?? state.blend));
  const mode = p.get("m");
  if (mode === "color" || mode === "depth" || mode === "segmentation") {
    state.mode = mode;
  }
  const prompts = p.get("p");
  if (prompts) state.prompts = prompts.split("|").filter((s) => s.length > 0);
  state.sessionId = p.get("s");
  state.mode = normalizeMode(state);
  return state;
}
