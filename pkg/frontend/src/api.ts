import type {
  ConfirmRequest,
  ConfirmResponse,
  HealthResponse,
  ImagesResponse,
  IndividualsResponse,
  QueryResult,
} from "./types.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Error raised for any non-2xx service response, carrying the stage label. */
export class ApiError extends Error {
  constructor(
    message: string,
    readonly stage: string | null = null,
    readonly status: number | null = null,
  ) {
    super(message);
    this.name = "ApiError";
  }

  /** Human-readable form, prefixed with the failing stage when known. */
  get display(): string {
    return this.stage ? `[${this.stage}] ${this.message}` : this.message;
  }
}

/**
 * Thin client for the retrieval service. All request and response bodies use
 * the service's kebab-case wire format; nothing is derived client-side.
 */
export class ApiClient {
  private readonly fetchImpl: FetchLike;

  constructor(
    private readonly baseUrl: string = "",
    fetchImpl?: FetchLike,
  ) {
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  async query(file: File): Promise<QueryResult> {
    const form = new FormData();
    form.append("file", file, file.name);
    return this.request<QueryResult>("/query", { method: "POST", body: form });
  }

  async individuals(): Promise<IndividualsResponse> {
    return this.request<IndividualsResponse>("/individuals");
  }

  async imagesOf(individualId: string): Promise<ImagesResponse> {
    return this.request<ImagesResponse>(
      `/individuals/${encodeURIComponent(individualId)}/images`,
    );
  }

  async confirm(payload: ConfirmRequest): Promise<ConfirmResponse> {
    return this.request<ConfirmResponse>("/confirm", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  async health(): Promise<HealthResponse> {
    return this.request<HealthResponse>("/health");
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.baseUrl + path, init);
    } catch (exc) {
      throw new ApiError(`service unreachable: ${String(exc)}`, "transport");
    }
    let body: unknown = null;
    try {
      body = await response.json();
    } catch {
      body = null;
    }
    if (!response.ok) {
      // FastAPI wraps handler-raised payloads under "detail".
      const detail =
        body && typeof body === "object" && "detail" in body
          ? (body as { detail: unknown }).detail
          : body;
      if (detail && typeof detail === "object") {
        const info = detail as { error?: string; stage?: string };
        throw new ApiError(
          info.error ?? `request failed with status ${response.status}`,
          info.stage ?? null,
          response.status,
        );
      }
      throw new ApiError(
        `request failed with status ${response.status}`,
        null,
        response.status,
      );
    }
    return body as T;
  }
}
