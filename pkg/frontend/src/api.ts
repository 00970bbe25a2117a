/** Typed client for the editing service endpoints. */

export interface ModelInfo {
  width: number;
  height: number;
  channels: number;
  rank: number;
  latent_dim: number;
}

export interface SampleResponse {
  session_id: string;
  mean: string; // base64 float64, row-major
  sample: string;
  mean_png: string; // base64 PNG
  sample_png: string;
}

export interface ScaleResponse {
  sample: string;
  sample_png: string;
}

export interface EditOp {
  x: number;
  y: number;
  c: number;
  value: number;
}

export interface EditResponse {
  conditioned_image: string;
  conditioned_png: string;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  let resp: Response;
  try {
    resp = await fetch(url, init);
  } catch (err) {
    throw new ApiError(0, `service unreachable: ${String(err)}`);
  }
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      if (body && body.detail) detail = JSON.stringify(body.detail);
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(resp.status, `${resp.status}: ${detail}`);
  }
  return (await resp.json()) as T;
}

function post<T>(url: string, body: unknown): Promise<T> {
  return request<T>(url, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(body),
  });
}

export class ApiClient {
  constructor(private baseUrl: string = "") {}

  getModel(): Promise<ModelInfo> {
    return request<ModelInfo>(`${this.baseUrl}/api/model`);
  }

  newSample(seed: number): Promise<SampleResponse> {
    return post<SampleResponse>(`${this.baseUrl}/api/sample`, { seed });
  }

  scale(sessionId: string, coefficients: number[]): Promise<ScaleResponse> {
    return post<ScaleResponse>(`${this.baseUrl}/api/scale`, {
      session_id: sessionId,
      coefficients,
    });
  }

  edit(sessionId: string, edits: EditOp[], reset = false): Promise<EditResponse> {
    return post<EditResponse>(`${this.baseUrl}/api/edit`, {
      session_id: sessionId,
      edits,
      reset,
    });
  }
}
