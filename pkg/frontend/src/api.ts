/**
 * Thin typed client for the scene service. The fetch implementation is
 * injectable so logic is testable without a browser or a live server.
 */

export interface SessionStatus {
  session_id: string;
  mode: "offline" | "online";
  snapshot_version: number;
  iterations: number | null;
  keyframes: number | null;
  labels: string[];
  feature_dim: number;
}

export interface SegmentationRecord {
  width: number;
  height: number;
  labels: string[];
  background_index: number;
  snapshot_version: number;
  classes: number[];
  scores: number[];
  class_scores: number[][];
}

export interface RenderRequest {
  pose: string;
  width: number;
  height: number;
  samples?: number;
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(detail);
  }
}

export class ApiClient {
  constructor(
    private base: string,
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async checked(input: string, init?: RequestInit): Promise<Response> {
    const resp = await this.fetchImpl(input, init);
    if (!resp.ok) {
      let detail = `${resp.status}`;
      try {
        const body = (await resp.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(resp.status, detail);
    }
    return resp;
  }

  async status(sessionId: string, signal?: AbortSignal): Promise<SessionStatus> {
    const resp = await this.checked(`${this.base}/session/${sessionId}/status`, {
      signal,
    });
    return (await resp.json()) as SessionStatus;
  }

  async setPrompts(sessionId: string, labels: string[]): Promise<{ labels: string[]; snapshot_version: number }> {
    const resp = await this.checked(`${this.base}/session/${sessionId}/prompts`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ labels }),
    });
    return (await resp.json()) as { labels: string[]; snapshot_version: number };
  }

  renderUrl(
    sessionId: string,
    mode: "color" | "depth" | "segmentation",
    req: RenderRequest,
    format: "png" | "record" = "png",
  ): string {
    const params = new URLSearchParams({
      pose: req.pose,
      mode,
      width: String(req.width),
      height: String(req.height),
      format,
    });
    if (req.samples !== undefined) params.set("samples", String(req.samples));
    return `${this.base}/session/${sessionId}/render?${params.toString()}`;
  }

  /** PNG layer fetch; returns the image bytes plus the snapshot version header. */
  async renderPng(
    sessionId: string,
    mode: "color" | "depth",
    req: RenderRequest,
    signal?: AbortSignal,
  ): Promise<{ blob: Blob; version: number }> {
    const resp = await this.checked(this.renderUrl(sessionId, mode, req), { signal });
    const version = Number(resp.headers.get("X-Snapshot-Version") ?? "0");
    return { blob: await resp.blob(), version };
  }

  async segmentationRecord(
    sessionId: string,
    req: RenderRequest,
    signal?: AbortSignal,
  ): Promise<SegmentationRecord> {
    const resp = await this.checked(
      this.renderUrl(sessionId, "segmentation", req, "record"),
      { signal },
    );
    return (await resp.json()) as SegmentationRecord;
  }
}
