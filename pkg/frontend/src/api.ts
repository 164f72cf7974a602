/**
 * Typed client for the correction service HTTP+JSON API.
 *
 * The optimization round streams server-sent events; on a dropped stream
 * the client falls back to polling GET /events and resumes from its cursor,
 * so consumers see every event exactly once in order.
 */

import type { ReportPayload, TraceEvent } from "./traceModel.js";

export interface ApiError {
  status: number;
  code: string;
  message: string;
  details: Record<string, unknown>;
}

export class ServiceError extends Error {
  constructor(public readonly info: ApiError) {
    super(info.message);
  }
}

export interface UploadPayload {
  csv: string;
  window: number;
  horizon: number;
  stride?: number;
  splits?: number[];
  baseline?: string;
  ridge_lambda?: number;
  predictions_csv?: string;
  predictions_meta?: Record<string, unknown>;
  normalize?: boolean;
}

export interface UploadSummary {
  rows: number;
  channels: number;
  columns: string[];
  windows: { train: number; val: number; test: number };
  source: string;
}

export interface SessionInfo {
  id: string;
  state: string;
  rounds: number;
  best: { plan: unknown; val_mse: number; round: number } | null;
  baseline_val_mse: number | null;
  feedback: unknown[];
  error: string | null;
}

export interface DirectiveEcho {
  accepted: boolean;
  preview?: boolean;
  directive: {
    raw_text: string;
    items: { kind: string; overrides: Record<string, number[]> }[];
    provenance: string;
    warnings: string[];
  };
  warnings: string[];
}

export interface EventsPage {
  state: string;
  from: number;
  next: number;
  events: TraceEvent[];
}

export interface SampleOverlay {
  count: number;
  index: number;
  sample_id: string;
  context: number[][];
  truth: number[][];
  before: number[][];
  after: number[][];
}

async function parseError(response: Response): Promise<ServiceError> {
  let body: Record<string, unknown> = {};
  try {
    body = (await response.json()) as Record<string, unknown>;
  } catch {
    // non-JSON error body; keep defaults
  }
  return new ServiceError({
    status: response.status,
    code: (body.code as string) ?? "error",
    message: (body.message as string) ?? response.statusText,
    details: (body.details as Record<string, unknown>) ?? {},
  });
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly token?: string
  ) {}

  private headers(): Record<string, string> {
    const h: Record<string, string> = { "content-type": "application/json" };
    if (this.token) h["x-api-token"] = this.token;
    return h;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await fetch(this.baseUrl + path, {
      method,
      headers: this.headers(),
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  health(): Promise<{ status: string }> {
    return this.request("GET", "/health");
  }

  createSession(config: Record<string, unknown>): Promise<{ id: string; state: string }> {
    return this.request("POST", "/sessions", config);
  }

  getSession(id: string): Promise<SessionInfo> {
    return this.request("GET", `/sessions/${id}`);
  }

  uploadData(id: string, payload: UploadPayload): Promise<UploadSummary> {
    return this.request("POST", `/sessions/${id}/data`, payload);
  }

  pollEvents(id: string, from: number): Promise<EventsPage> {
    return this.request("GET", `/sessions/${id}/events?from=${from}`);
  }

  submitFeedback(
    id: string,
    text: string,
    path: "grammar" | "llm",
    preview = false
  ): Promise<DirectiveEcho> {
    return this.request("POST", `/sessions/${id}/feedback`, { text, path, preview });
  }

  finalize(id: string): Promise<ReportPayload> {
    return this.request("POST", `/sessions/${id}/finalize`);
  }

  getReport(id: string): Promise<ReportPayload> {
    return this.request("GET", `/sessions/${id}/report`);
  }

  getReportSample(id: string, index: number): Promise<SampleOverlay> {
    return this.request("GET", `/sessions/${id}/report/sample?index=${index}`);
  }

  /**
   * Start one optimization round and stream its events.
   * Returns the number of events delivered. `onEvent` receives each event
   * with its global index exactly once, even across stream drops.
   */
  async runRound(
    id: string,
    onEvent: (event: TraceEvent, index: number) => void,
    onStatus?: (mode: "stream" | "polling") => void
  ): Promise<number> {
    let cursor = (await this.pollEvents(id, 0)).next;
    const startRound = async (): Promise<Response> => {
      const response = await fetch(`${this.baseUrl}/sessions/${id}/optimize`, {
        method: "POST",
        headers: this.headers(),
      });
      if (!response.ok) throw await parseError(response);
      return response;
    };

    let delivered = 0;
    const deliver = (event: TraceEvent, index: number) => {
      if (index < cursor) return;
      cursor = index + 1;
      delivered += 1;
      onEvent(event, index);
    };

    try {
      const response = await startRound();
      onStatus?.("stream");
      const streamStart = cursor;
      let streamed = 0;
      for await (const event of sseEvents(response)) {
        deliver(event, streamStart + streamed);
        streamed += 1;
        if (event.terminal || event.error) return delivered;
      }
    } catch (e) {
      if (e instanceof ServiceError) throw e; // conflict/validation: not retriable
      // network drop: fall through to polling
    }

    onStatus?.("polling");
    for (;;) {
      const page = await this.pollEvents(id, cursor);
      page.events.forEach((event, i) => deliver(event, page.from + i));
      const last = page.events[page.events.length - 1];
      if (last && (last.terminal || last.error)) return delivered;
      if (page.state === "failed") return delivered;
      if (page.state !== "optimizing" && page.events.length === 0) return delivered;
      await sleep(120);
    }
  }
}

async function* sseEvents(response: Response): AsyncGenerator<TraceEvent> {
  const body = response.body;
  if (!body) return;
  const reader = body.getReader();
  const decoder = new TextDecoder();
  let buffer = "";
  for (;;) {
    const { done, value } = await reader.read();
    if (done) break;
    buffer += decoder.decode(value, { stream: true });
    let cut;
    while ((cut = buffer.indexOf("\n\n")) >= 0) {
      const frame = buffer.slice(0, cut);
      buffer = buffer.slice(cut + 2);
      for (const line of frame.split("\n")) {
        if (line.startsWith("data: ")) {
          yield JSON.parse(line.slice(6)) as TraceEvent;
        }
      }
    }
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
