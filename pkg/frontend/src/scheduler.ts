/**
 * Fetch scheduling: debounced triggers plus latest-only delivery, so a rapid
 * orbit drag issues one request and a stale response can never paint over a
 * newer one.
 */

export interface Debounced<A extends unknown[]> {
  (...args: A): void;
  cancel(): void;
  flush(): void;
}

export function debounce<A extends unknown[]>(
  fn: (...args: A) => void,
  waitMs: number,
  setTimer: typeof setTimeout = setTimeout,
  clearTimer: typeof clearTimeout = clearTimeout,
): Debounced<A> {
  let handle: ReturnType<typeof setTimeout> | null = null;
  let pending: A | null = null;

  const call = (...args: A) => {
    pending = args;
    if (handle !== null) clearTimer(handle);
    handle = setTimer(() => {
      handle = null;
      const args2 = pending!;
      pending = null;
      fn(...args2);
    }, waitMs);
  };
  call.cancel = () => {
    if (handle !== null) clearTimer(handle);
    handle = null;
    pending = null;
  };
  call.flush = () => {
    if (handle !== null) {
      clearTimer(handle);
      handle = null;
      const args = pending!;
      pending = null;
      fn(...args);
    }
  };
  return call;
}

/**
 * One in-flight slot per key. Each start() supersedes the previous request
 * for that key; superseded results resolve to null and their AbortSignal
 * fires so the transport can drop the connection.
 */
export class LatestOnly {
  private seq = new Map<string, number>();
  private controllers = new Map<string, AbortController>();

  async start<T>(
    key: string,
    task: (signal: AbortSignal) => Promise<T>,
  ): Promise<T | null> {
    const mine = (this.seq.get(key) ?? 0) + 1;
    this.seq.set(key, mine);
    this.controllers.get(key)?.abort();
    const controller = new AbortController();
    this.controllers.set(key, controller);
    try {
      const result = await task(controller.signal);
      return this.seq.get(key) === mine ? result : null;
    } catch (err) {
      if (this.seq.get(key) === mine) throw err;
      return null; // superseded failures are not errors
    }
  }

  cancel(key: string): void {
    this.seq.set(key, (this.seq.get(key) ?? 0) + 1);
    this.controllers.get(key)?.abort();
  }
}

/**
 * Keeps the RGB layer and the segmentation layer consistent: they may only be
 * composited when fetched against the same snapshot version.
 */
export interface LayerData<T> {
  version: number;
  data: T;
}

export type LayerName = "color" | "segmentation";

export class LayerSync<T> {
  private layers = new Map<LayerName, LayerData<T>>();

  /** Returns which layers must be refetched after this arrival ([] = composite now). */
  arrive(name: LayerName, incoming: LayerData<T>): LayerName[] {
    const current = this.layers.get(name);
    if (current && current.version > incoming.version) {
      return []; // stale arrival; drop silently
    }
    this.layers.set(name, incoming);
    const other: LayerName = name === "color" ? "segmentation" : "color";
    const partner = this.layers.get(other);
    if (partner && partner.version < incoming.version) {
      this.layers.delete(other);
      return [other];
    }
    return [];
  }

  /** Both layers present at one snapshot version, ready to blend. */
  ready(): { color: T; segmentation: T; version: number } | null {
    const color = this.layers.get("color");
    const seg = this.layers.get("segmentation");
    if (!color || !seg || color.version !== seg.version) return null;
    return { color: color.data, segmentation: seg.data, version: color.version };
  }

  invalidate(): void {
    this.layers.clear();
  }
}
