import { describe, expect, it } from "vitest";
import { ApiClient, ApiError } from "../src/api.js";

function fakeFetch(
  handler: (url: string, init?: RequestInit) => { status?: number; json?: unknown; headers?: Record<string, string> },
) {
  const calls: { url: string; init?: RequestInit }[] = [];
  const impl = async (url: string, init?: RequestInit): Promise<Response> => {
    calls.push({ url, init });
    const spec = handler(url, init);
    const status = spec.status ?? 200;
    return new Response(JSON.stringify(spec.json ?? {}), {
      status,
      headers: { "content-type": "application/json", ...(spec.headers ?? {}) },
    });
  };
  return { impl, calls };
}

describe("ApiClient", () => {
  it("builds render URLs with all query parameters", () => {
    const client = new ApiClient("http://host");
    const url = client.renderUrl("s0001", "segmentation",
      { pose: "1,2,3", width: 160, height: 120, samples: 32 }, "record");
    const parsed = new URL(url);
    expect(parsed.pathname).toBe("/session/s0001/render");
    expect(parsed.searchParams.get("mode")).toBe("segmentation");
    expect(parsed.searchParams.get("format")).toBe("record");
    expect(parsed.searchParams.get("samples")).toBe("32");
    expect(parsed.searchParams.get("width")).toBe("160");
  });

  it("posts prompt labels as JSON", async () => {
    const { impl, calls } = fakeFetch(() => ({
      json: { labels: ["a"], snapshot_version: 2 },
    }));
    const client = new ApiClient("", impl);
    const out = await client.setPrompts("s1", ["a"]);
    expect(out.snapshot_version).toBe(2);
    expect(calls[0].url).toBe("/session/s1/prompts");
    expect(JSON.parse(String(calls[0].init?.body))).toEqual({ labels: ["a"] });
  });

  it("surfaces server error details as ApiError", async () => {
    const { impl } = fakeFetch(() => ({
      status: 400, json: { detail: "pose must have 16 values" },
    }));
    const client = new ApiClient("", impl);
    await expect(client.status("s1")).rejects.toThrowError(ApiError);
    await expect(client.status("s1")).rejects.toThrow("16 values");
  });

  it("parses segmentation records", async () => {
    const record = {
      width: 2, height: 1, labels: ["a"], background_index: 1,
      snapshot_version: 7, classes: [0, 1], scores: [0.5, 0],
      class_scores: [[0.5, 0]],
    };
    const { impl } = fakeFetch(() => ({ json: record }));
    const client = new ApiClient("", impl);
    const out = await client.segmentationRecord("s1",
      { pose: "p", width: 2, height: 1 });
    expect(out.snapshot_version).toBe(7);
    expect(out.classes).toEqual([0, 1]);
  });
});
