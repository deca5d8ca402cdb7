/**
 * Compositing of the segmentation layer onto the RGB layer, plus hover
 * lookups into the per-class score record. Pure array math, canvas-free.
 */

import { labelColor } from "./colors.js";
import { SegmentationRecord } from "./api.js";

/**
 * Alpha-blend class colors over RGB pixels. blend=0 leaves RGB untouched,
 * blend=1 paints pure class colors. Background pixels always keep their RGB.
 */
export function blendOverlay(
  rgba: Uint8ClampedArray,
  record: SegmentationRecord,
  blend: number,
) {
  // fresh copy; never mutate the base layer
  const out = new Uint8ClampedArray(rgba.length);
  out.set(rgba);
  const palette = record.labels.map((label) => labelColor(label));
  const alpha = Math.min(1, Math.max(0, blend));
  const n = record.width * record.height;
  for (let i = 0; i < n; i++) {
    const cls = record.classes[i];
    if (cls === record.background_index || cls >= palette.length) continue;
    const [r, g, b] = palette[cls];
    out[i * 4] = Math.round(rgba[i * 4] * (1 - alpha) + r * alpha);
    out[i * 4 + 1] = Math.round(rgba[i * 4 + 1] * (1 - alpha) + g * alpha);
    out[i * 4 + 2] = Math.round(rgba[i * 4 + 2] * (1 - alpha) + b * alpha);
    out[i * 4 + 3] = 255;
  }
  return out;
}

export interface HoverInfo {
  label: string;
  score: number;
  perClass: { label: string; score: number }[];
  background: boolean;
}

/** Top-1 label/score plus the full per-class record for one pixel. */
export function hoverInfo(
  record: SegmentationRecord,
  x: number,
  y: number,
): HoverInfo | null {
  if (x < 0 || y < 0 || x >= record.width || y >= record.height) return null;
  const i = y * record.width + x;
  const cls = record.classes[i];
  const perClass = record.labels.map((label, k) => ({
    label,
    score: record.class_scores[k][i],
  }));
  perClass.sort((a, b) => b.score - a.score);
  if (cls === record.background_index) {
    return { label: "(background)", score: 0, perClass, background: true };
  }
  return {
    label: record.labels[cls],
    score: record.scores[i],
    perClass,
    background: false,
  };
}

export interface LegendEntry {
  label: string;
  color: [number, number, number];
  index: number;
}

/** Legend entries in prompt order; colors are stable per label. */
export function legendEntries(labels: string[]): LegendEntry[] {
  return labels.map((label, index) => ({ label, color: labelColor(label), index }));
}
