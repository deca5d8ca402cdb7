/**
 * Browser entry point: wires the orbit controls, prompt editor, render layers,
 * legend, and hover tooltip to the scene service.
 */

import { ApiClient, ApiError, SegmentationRecord } from "./api.js";
import { orbitPose, applyOrbitDelta, poseToQueryParam, parseRawPose } from "./camera.js";
import { cssColor } from "./colors.js";
import { blendOverlay, hoverInfo, legendEntries } from "./overlay.js";
import { debounce, LatestOnly, LayerSync } from "./scheduler.js";
import {
  ViewState, DEFAULT_VIEW, addPrompt, removePrompt, movePrompt,
  canSelectSegmentation, serializeView, deserializeView,
} from "./state.js";

const RENDER_W = 160;
const RENDER_H = 120;
const SAMPLES = 64;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

class App {
  private api = new ApiClient("");
  private state: ViewState;
  private rawPose: number[] | null = null;
  private fetcher = new LatestOnly();
  private layers = new LayerSync<ImageData | SegmentationRecord>();
  private lastRecord: SegmentationRecord | null = null;
  private baseImage: ImageData | null = null;
  private canvas = el<HTMLCanvasElement>("view");
  private ctx = this.canvas.getContext("2d")!;
  private banner = el<HTMLDivElement>("banner");
  private requestRender = debounce(() => void this.refresh(), 120);

  constructor() {
    this.state = location.hash.length > 1
      ? deserializeView(location.hash.slice(1))
      : structuredClone(DEFAULT_VIEW);
    this.canvas.width = RENDER_W;
    this.canvas.height = RENDER_H;
    this.bindControls();
    this.renderPromptList();
    this.updateModeButtons();
    void this.connect();
    setInterval(() => void this.pollStatus(), 1500);
  }

  private poseParam(): string {
    return poseToQueryParam(this.rawPose ?? orbitPose(this.state.orbit));
  }

  private syncHash(): void {
    history.replaceState(null, "", `#${serializeView(this.state)}`);
  }

  private showError(message: string | null): void {
    this.banner.textContent = message ?? "";
    this.banner.style.display = message ? "block" : "none";
  }

  private async connect(): Promise<void> {
    if (this.state.sessionId) {
      try {
        await this.api.status(this.state.sessionId);
      } catch {
        this.state.sessionId = null;
      }
    }
    const input = el<HTMLInputElement>("session-input");
    if (!this.state.sessionId) {
      // the serve command opens the first session as s0001 and prints it;
      // the box stays editable for anything else
      this.state.sessionId = input.value.trim() || "s0001";
    }
    input.value = this.state.sessionId;
    this.syncHash();
    if (this.state.prompts.length) {
      await this.pushPrompts();
    }
    this.requestRender();
  }

  private async pollStatus(): Promise<void> {
    if (!this.state.sessionId) return;
    try {
      const status = await this.api.status(this.state.sessionId);
      el<HTMLSpanElement>("status-line").textContent =
        `${status.mode} | snapshot v${status.snapshot_version}` +
        (status.iterations !== null ? ` | iter ${status.iterations}` : "") +
        (status.keyframes !== null ? ` | ${status.keyframes} keyframes` : "");
      if (status.mode === "online") this.requestRender();
    } catch {
      /* transient; the render path surfaces persistent failures */
    }
  }

  private async pushPrompts(): Promise<void> {
    if (!this.state.sessionId || this.state.prompts.length === 0) return;
    try {
      await this.api.setPrompts(this.state.sessionId, this.state.prompts);
      this.showError(null);
    } catch (err) {
      this.showError(err instanceof ApiError ? `prompts: ${err.message}` : String(err));
    }
  }

  private async refresh(): Promise<void> {
    const sid = this.state.sessionId;
    if (!sid) return;
    const req = { pose: this.poseParam(), width: RENDER_W, height: RENDER_H, samples: SAMPLES };
    try {
      if (this.state.mode === "depth") {
        const result = await this.fetcher.start("base", (signal) =>
          this.api.renderPng(sid, "depth", req, signal));
        if (result) {
          await this.paintDepth(result.blob);
          this.showError(null);
        }
        return;
      }
      const colorResult = await this.fetcher.start("base", (signal) =>
        this.api.renderPng(sid, "color", req, signal));
      if (!colorResult) return; // superseded by a newer request
      this.baseImage = await blobToImageData(colorResult.blob, RENDER_W, RENDER_H);
      const refetch = this.layers.arrive("color", {
        version: colorResult.version, data: this.baseImage,
      });
      if (this.state.mode === "segmentation" && canSelectSegmentation(this.state)) {
        const record = await this.fetcher.start("seg", (signal) =>
          this.api.segmentationRecord(sid, req, signal));
        if (!record) return;
        this.lastRecord = record;
        const refetch2 = this.layers.arrive("segmentation", {
          version: record.snapshot_version, data: record,
        });
        if (refetch.length || refetch2.length) {
          this.requestRender(); // snapshot advanced between layers; refetch
          return;
        }
      }
      this.paint();
      this.showError(null);
    } catch (err) {
      // keep the last good frame on screen; surface the failure passively
      this.showError(err instanceof ApiError ? err.message : `network: ${String(err)}`);
    }
  }

  private paint(): void {
    if (!this.baseImage) return;
    if (this.state.mode === "segmentation" && this.lastRecord) {
      const ready = this.layers.ready();
      if (ready) {
        const blended = blendOverlay(
          this.baseImage.data, this.lastRecord, this.state.blend);
        this.ctx.putImageData(new ImageData(blended, RENDER_W, RENDER_H), 0, 0);
        return;
      }
    }
    this.ctx.putImageData(this.baseImage, 0, 0);
  }

  private async paintDepth(blob: Blob): Promise<void> {
    const img = await blobToImageData(blob, RENDER_W, RENDER_H);
    this.ctx.putImageData(img, 0, 0);
  }

  private renderPromptList(): void {
    const list = el<HTMLUListElement>("prompt-list");
    list.textContent = "";
    for (const entry of legendEntries(this.state.prompts)) {
      const item = document.createElement("li");
      const swatch = document.createElement("span");
      swatch.className = "swatch";
      swatch.style.background = cssColor(entry.label);
      const text = document.createElement("span");
      text.textContent = entry.label;
      const up = document.createElement("button");
      up.textContent = "↑";
      up.onclick = () => this.onMovePrompt(entry.index, entry.index - 1);
      const down = document.createElement("button");
      down.textContent = "↓";
      down.onclick = () => this.onMovePrompt(entry.index, entry.index + 1);
      const remove = document.createElement("button");
      remove.textContent = "×";
      remove.onclick = () => this.onRemovePrompt(entry.label);
      item.append(swatch, text, up, down, remove);
      list.append(item);
    }
    const segButton = el<HTMLButtonElement>("mode-segmentation");
    segButton.disabled = !canSelectSegmentation(this.state);
  }

  private onAddPrompt(): void {
    const input = el<HTMLInputElement>("prompt-input");
    const next = addPrompt(this.state, input.value);
    if (next !== this.state) {
      this.state = next;
      input.value = "";
      this.afterPromptChange();
    }
  }

  private onRemovePrompt(label: string): void {
    this.state = removePrompt(this.state, label);
    this.afterPromptChange();
    this.updateModeButtons();
  }

  private onMovePrompt(from: number, to: number): void {
    this.state = movePrompt(this.state, from, to);
    this.afterPromptChange();
  }

  private afterPromptChange(): void {
    this.renderPromptList();
    this.syncHash();
    void this.pushPrompts().then(() => {
      if (this.state.mode === "segmentation") this.requestRender();
    });
  }

  private setMode(mode: ViewState["mode"]): void {
    if (mode === "segmentation" && !canSelectSegmentation(this.state)) return;
    this.state = { ...this.state, mode };
    this.updateModeButtons();
    this.syncHash();
    this.requestRender();
  }

  private updateModeButtons(): void {
    for (const mode of ["color", "depth", "segmentation"] as const) {
      el<HTMLButtonElement>(`mode-${mode}`).classList.toggle(
        "active", this.state.mode === mode);
    }
    el<HTMLButtonElement>("mode-segmentation").disabled =
      !canSelectSegmentation(this.state);
  }

  private bindControls(): void {
    el<HTMLButtonElement>("prompt-add").onclick = () => this.onAddPrompt();
    el<HTMLInputElement>("prompt-input").onkeydown = (ev) => {
      if (ev.key === "Enter") this.onAddPrompt();
    };
    for (const mode of ["color", "depth", "segmentation"] as const) {
      el<HTMLButtonElement>(`mode-${mode}`).onclick = () => this.setMode(mode);
    }
    const blend = el<HTMLInputElement>("blend");
    blend.value = String(this.state.blend);
    blend.oninput = () => {
      this.state = { ...this.state, blend: Number(blend.value) };
      this.syncHash();
      this.paint();
    };
    el<HTMLInputElement>("session-input").onchange = (ev) => {
      this.state = { ...this.state, sessionId: (ev.target as HTMLInputElement).value };
      this.layers.invalidate();
      void this.connect();
    };
    const poseBox = el<HTMLInputElement>("raw-pose");
    poseBox.onchange = () => {
      this.rawPose = parseRawPose(poseBox.value);
      if (poseBox.value.trim() && !this.rawPose) {
        this.showError("raw pose needs 16 numbers");
        return;
      }
      this.requestRender();
    };

    let dragging = false;
    let last: [number, number] = [0, 0];
    this.canvas.onmousedown = (ev) => {
      dragging = true;
      last = [ev.clientX, ev.clientY];
    };
    window.onmouseup = () => (dragging = false);
    this.canvas.onmousemove = (ev) => {
      if (dragging) {
        const dx = ev.clientX - last[0];
        const dy = ev.clientY - last[1];
        last = [ev.clientX, ev.clientY];
        this.rawPose = null;
        this.state = {
          ...this.state,
          orbit: applyOrbitDelta(this.state.orbit, -dx * 0.01, dy * 0.01),
        };
        this.syncHash();
        this.requestRender();
      } else {
        this.onHover(ev);
      }
    };
    this.canvas.onwheel = (ev) => {
      ev.preventDefault();
      this.rawPose = null;
      const factor = ev.deltaY > 0 ? 1.08 : 0.93;
      this.state = {
        ...this.state,
        orbit: applyOrbitDelta(this.state.orbit, 0, 0, factor),
      };
      this.syncHash();
      this.requestRender();
    };
  }

  private onHover(ev: MouseEvent): void {
    const tooltip = el<HTMLDivElement>("tooltip");
    if (this.state.mode !== "segmentation" || !this.lastRecord) {
      tooltip.style.display = "none";
      return;
    }
    const rect = this.canvas.getBoundingClientRect();
    const x = Math.floor(((ev.clientX - rect.left) / rect.width) * RENDER_W);
    const y = Math.floor(((ev.clientY - rect.top) / rect.height) * RENDER_H);
    const info = hoverInfo(this.lastRecord, x, y);
    if (!info) {
      tooltip.style.display = "none";
      return;
    }
    tooltip.style.display = "block";
    tooltip.style.left = `${ev.clientX + 12}px`;
    tooltip.style.top = `${ev.clientY + 12}px`;
    const lines = info.background
      ? ["(background)"]
      : [`${info.label}  ${info.score.toFixed(3)}`];
    for (const entry of info.perClass.slice(0, 5)) {
      lines.push(`${entry.label}: ${entry.score.toFixed(3)}`);
    }
    tooltip.textContent = lines.join("\n");
  }
}

async function blobToImageData(blob: Blob, w: number, h: number): Promise<ImageData> {
  const bitmap = await createImageBitmap(blob);
  const off = document.createElement("canvas");
  off.width = w;
  off.height = h;
  const ctx = off.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0, w, h);
  return ctx.getImageData(0, 0, w, h);
}

window.addEventListener("DOMContentLoaded", () => new App());
