/** Thin typed client over the pipeline-service REST API.
 *
 * The fetch implementation is injectable so the client runs under tests
 * without a server. Server errors map to ApiError (with the HTTP status),
 * stale-version corrections to ConflictError, and transport failures to
 * NetworkError so callers can keep unsent drafts.
 */

import type {
  CellsDocument,
  CorrectionOp,
  CorrectionResult,
  Point,
  RasterizeResult,
  SlideRecord,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

export class ConflictError extends ApiError {
  constructor(message: string, public currentVersion: number | null) {
    super(409, message);
    this.name = "ConflictError";
  }
}

export class NetworkError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "NetworkError";
  }
}

function detailOf(body: unknown): string {
  if (body && typeof body === "object" && "detail" in body) {
    const detail = (body as { detail: unknown }).detail;
    if (typeof detail === "string") return detail;
    if (detail && typeof detail === "object" && "message" in detail) {
      return String((detail as { message: unknown }).message);
    }
    return JSON.stringify(detail);
  }
  return "request failed";
}

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    let resp: Response;
    try {
      resp = await this.fetchFn(this.baseUrl + path, init);
    } catch (err) {
      throw new NetworkError(`cannot reach server: ${String(err)}`);
    }
    if (resp.ok) return resp;
    let body: unknown = null;
    try {
      body = await resp.json();
    } catch {
      // non-JSON error body; fall through with the generic message
    }
    if (resp.status === 409) {
      const detail =
        body && typeof body === "object" && "detail" in body
          ? (body as { detail: unknown }).detail
          : null;
      const current =
        detail && typeof detail === "object" && "current_version" in detail
          ? Number((detail as { current_version: unknown }).current_version)
          : null;
      throw new ConflictError(detailOf(body), current);
    }
    throw new ApiError(resp.status, detailOf(body));
  }

  async listSlides(): Promise<SlideRecord[]> {
    const resp = await this.request("/slides");
    return (await resp.json()) as SlideRecord[];
  }

  async getSlide(slideId: string): Promise<SlideRecord> {
    const resp = await this.request(`/slides/${slideId}`);
    return (await resp.json()) as SlideRecord;
  }

  panoramaUrl(slideId: string): string {
    return `${this.baseUrl}/slides/${slideId}/panorama.png`;
  }

  async fetchPanorama(slideId: string): Promise<Uint8Array> {
    const resp = await this.request(`/slides/${slideId}/panorama.png`);
    return new Uint8Array(await resp.arrayBuffer());
  }

  async fetchLabels(slideId: string, version?: number): Promise<Uint8Array> {
    const query = version === undefined ? "" : `?version=${version}`;
    const resp = await this.request(`/slides/${slideId}/labels.png${query}`);
    return new Uint8Array(await resp.arrayBuffer());
  }

  /** cells.json for the slide, or null when classification has not run. */
  async fetchCells(slideId: string): Promise<CellsDocument | null> {
    try {
      const resp = await this.request(`/slides/${slideId}/cells.json`);
      return (await resp.json()) as CellsDocument;
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) return null;
      throw err;
    }
  }

  async submitCorrections(
    slideId: string,
    baseVersion: number,
    ops: CorrectionOp[],
  ): Promise<CorrectionResult> {
    const resp = await this.request(`/slides/${slideId}/corrections`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ base_version: baseVersion, ops }),
    });
    return (await resp.json()) as CorrectionResult;
  }

  /** Server-side even-odd fill of a polygon; the parity oracle for previews. */
  async rasterize(
    polygon: Point[],
    height: number,
    width: number,
  ): Promise<RasterizeResult> {
    const resp = await this.request("/rasterize", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ polygon, height, width }),
    });
    return (await resp.json()) as RasterizeResult;
  }
}
