/**
 * Client for the generation service JSON API.
 *
 * Endpoints: POST /v1/generate, GET /v1/jobs/{id}, GET /v1/jobs/{id}/result,
 * GET /v1/models. Masks travel as base64-encoded indexed PNG bytes; every
 * submission snapshots the bytes it was given, so later edits to the canvas
 * never mutate an in-flight job.
 */

export interface ModelInfo {
  id: string;
  resolutions: number[];
  final_resolution: number;
  num_classes: number;
  class_names: string[];
}

export interface JobStatus {
  id: string;
  status: "queued" | "running" | "done" | "failed";
  model_id?: string;
  seed?: number;
  error?: string;
}

const B64_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

export function bytesToBase64(bytes: Uint8Array): string {
  let out = "";
  for (let i = 0; i < bytes.length; i += 3) {
    const a = bytes[i];
    const b = i + 1 < bytes.length ? bytes[i + 1] : 0;
    const c = i + 2 < bytes.length ? bytes[i + 2] : 0;
    out += B64_ALPHABET[a >> 2] + B64_ALPHABET[((a & 3) << 4) | (b >> 4)];
    out += i + 1 < bytes.length ? B64_ALPHABET[((b & 15) << 2) | (c >> 6)] : "=";
    out += i + 2 < bytes.length ? B64_ALPHABET[c & 63] : "=";
  }
  return out;
}

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function asJson(resp: Response): Promise<any> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      detail = body.detail ?? JSON.stringify(body);
    } catch {
      /* no JSON body */
    }
    throw new ApiError(resp.status, detail);
  }
  return resp.json();
}

export class GenClient {
  constructor(readonly baseUrl: string, private fetchFn: typeof fetch = fetch) {}

  async listModels(): Promise<ModelInfo[]> {
    const body = await asJson(await this.fetchFn(`${this.baseUrl}/v1/models`));
    return body.models;
  }

  /** Enqueue one generation job; resolves to the job id. */
  async submitGeneration(
    modelId: string,
    maskPng: Uint8Array,
    seed: number,
    guidance?: number,
  ): Promise<string> {
    const payload: Record<string, unknown> = {
      model_id: modelId,
      mask_png_base64: bytesToBase64(new Uint8Array(maskPng)), // snapshot
      seed,
    };
    if (guidance !== undefined) payload.guidance = guidance;
    const resp = await this.fetchFn(`${this.baseUrl}/v1/generate`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    const body = await asJson(resp);
    return body.job_id;
  }

  /** Submit the same mask under n distinct seeds (the "variants" button). */
  async submitVariants(modelId: string, maskPng: Uint8Array, seeds: number[], guidance?: number): Promise<string[]> {
    const ids: string[] = [];
    for (const seed of seeds) {
      ids.push(await this.submitGeneration(modelId, maskPng, seed, guidance));
    }
    return ids;
  }

  async jobStatus(jobId: string): Promise<JobStatus> {
    return asJson(await this.fetchFn(`${this.baseUrl}/v1/jobs/${jobId}`));
  }

  resultUrl(jobId: string): string {
    return `${this.baseUrl}/v1/jobs/${jobId}/result`;
  }

  async fetchResult(jobId: string): Promise<Uint8Array> {
    const resp = await this.fetchFn(this.resultUrl(jobId));
    if (!resp.ok) throw new ApiError(resp.status, await resp.text());
    return new Uint8Array(await resp.arrayBuffer());
  }

  /** Poll jobStatus until done/failed; rejects with the server error text on failure. */
  async pollUntilDone(jobId: string, intervalMs = 500, timeoutMs = 120_000): Promise<JobStatus> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const status = await this.jobStatus(jobId);
      if (status.status === "done") return status;
      if (status.status === "failed") throw new Error(status.error ?? "generation failed");
      if (Date.now() > deadline) throw new Error(`job ${jobId} timed out`);
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }
}
