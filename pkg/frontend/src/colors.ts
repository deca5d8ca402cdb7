/**
 * Stable class colors: a label always maps to the same color, so reordering
 * the prompt list never recolors existing classes.
 */

export function labelHash(label: string): number {
  // FNV-1a over UTF-16 code units
  let h = 0x811c9dc5;
  for (let i = 0; i < label.length; i++) {
    h ^= label.charCodeAt(i);
    h = Math.imul(h, 0x01000193) >>> 0;
  }
  return h >>> 0;
}

export function labelColor(label: string): [number, number, number] {
  const h = labelHash(label);
  const hue = h % 360;
  const sat = 0.55 + ((h >>> 9) % 30) / 100; // 0.55..0.84
  const light = 0.45 + ((h >>> 17) % 20) / 100; // 0.45..0.64
  return hslToRgb(hue / 360, sat, light);
}

export function hslToRgb(h: number, s: number, l: number): [number, number, number] {
  const q = l < 0.5 ? l * (1 + s) : l + s - l * s;
  const p = 2 * l - q;
  const channel = (t: number): number => {
    t = ((t % 1) + 1) % 1;
    if (t < 1 / 6) return p + (q - p) * 6 * t;
    if (t < 1 / 2) return q;
    if (t < 2 / 3) return p + (q - p) * (2 / 3 - t) * 6;
    return p;
  };
  return [
    Math.round(channel(h + 1 / 3) * 255),
    Math.round(channel(h) * 255),
    Math.round(channel(h - 1 / 3) * 255),
  ];
}

export function cssColor(label: string): string {
  const [r, g, b] = labelColor(label);
  return `rgb(${r}, ${g}, ${b})`;
}
