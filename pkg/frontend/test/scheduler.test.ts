import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";
import { debounce, LatestOnly, LayerSync } from "../src/scheduler.js";

describe("debounce", () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  it("collapses rapid calls into the final one", () => {
    const calls: number[] = [];
    const d = debounce((v: number) => calls.push(v), 100);
    d(1);
    vi.advanceTimersByTime(40);
    d(2);
    vi.advanceTimersByTime(40);
    d(3);
    vi.advanceTimersByTime(120);
    expect(calls).toEqual([3]);
  });

  it("fires again for calls after the quiet period", () => {
    const calls: number[] = [];
    const d = debounce((v: number) => calls.push(v), 50);
    d(1);
    vi.advanceTimersByTime(80);
    d(2);
    vi.advanceTimersByTime(80);
    expect(calls).toEqual([1, 2]);
  });

  it("cancel drops the pending call", () => {
    const calls: number[] = [];
    const d = debounce((v: number) => calls.push(v), 50);
    d(1);
    d.cancel();
    vi.advanceTimersByTime(100);
    expect(calls).toEqual([]);
  });

  it("flush runs the pending call immediately", () => {
    const calls: number[] = [];
    const d = debounce((v: number) => calls.push(v), 50);
    d(7);
    d.flush();
    expect(calls).toEqual([7]);
  });
});

describe("LatestOnly", () => {
  it("discards superseded results", async () => {
    const fetcher = new LatestOnly();
    let releaseFirst!: (v: string) => void;
    const first = fetcher.start("k", () =>
      new Promise<string>((resolve) => { releaseFirst = resolve; }));
    const second = fetcher.start("k", async () => "new");
    expect(await second).toBe("new");
    releaseFirst("old");
    expect(await first).toBeNull(); // stale response never surfaces
  });

  it("aborts the superseded request's signal", async () => {
    const fetcher = new LatestOnly();
    let firstSignal!: AbortSignal;
    void fetcher.start("k", (signal) => {
      firstSignal = signal;
      return new Promise<string>(() => undefined);
    });
    await fetcher.start("k", async () => "second");
    expect(firstSignal.aborted).toBe(true);
  });

  it("keys are independent", async () => {
    const fetcher = new LatestOnly();
    const a = fetcher.start("a", async () => "A");
    const b = fetcher.start("b", async () => "B");
    expect(await a).toBe("A");
    expect(await b).toBe("B");
  });

  it("propagates failures only for the current request", async () => {
    const fetcher = new LatestOnly();
    let failFirst!: (err: Error) => void;
    const first = fetcher.start("k", () =>
      new Promise<string>((_, reject) => { failFirst = reject; }));
    await fetcher.start("k", async () => "fine");
    failFirst(new Error("boom"));
    expect(await first).toBeNull(); // superseded failure is swallowed
    await expect(fetcher.start("k", async () => {
      throw new Error("current failure");
    })).rejects.toThrow("current failure");
  });
});

describe("LayerSync", () => {
  it("composites only when versions match", () => {
    const sync = new LayerSync<string>();
    expect(sync.arrive("color", { version: 3, data: "rgb3" })).toEqual([]);
    expect(sync.ready()).toBeNull();
    expect(sync.arrive("segmentation", { version: 3, data: "seg3" })).toEqual([]);
    expect(sync.ready()).toEqual({ color: "rgb3", segmentation: "seg3", version: 3 });
  });

  it("newer layer invalidates the older partner and requests a refetch", () => {
    const sync = new LayerSync<string>();
    sync.arrive("color", { version: 3, data: "rgb3" });
    sync.arrive("segmentation", { version: 3, data: "seg3" });
    const refetch = sync.arrive("segmentation", { version: 4, data: "seg4" });
    expect(refetch).toEqual(["color"]);
    expect(sync.ready()).toBeNull(); // never blends mismatched layers
  });

  it("stale arrivals are dropped silently", () => {
    const sync = new LayerSync<string>();
    sync.arrive("color", { version: 5, data: "rgb5" });
    expect(sync.arrive("color", { version: 4, data: "rgb4" })).toEqual([]);
    sync.arrive("segmentation", { version: 5, data: "seg5" });
    expect(sync.ready()?.color).toBe("rgb5");
  });

  it("invalidate clears both layers", () => {
    const sync = new LayerSync<string>();
    sync.arrive("color", { version: 1, data: "a" });
    sync.arrive("segmentation", { version: 1, data: "b" });
    sync.invalidate();
    expect(sync.ready()).toBeNull();
  });
});
