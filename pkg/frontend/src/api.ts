import type {
  DotsRecord,
  FinalizeForm,
  FinalizeResult,
  GateDecision,
  MessageReply,
  RunSummary,
  SessionOpened,
  WindowMetrics,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`${status}: ${detail}`);
  }
}

async function parse<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = (await resp.json()) as { detail?: string };
      if (body.detail) detail = body.detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export class DotsClient {
  constructor(
    private base: string,
    private token?: string,
  ) {}

  private headers(json = false): Record<string, string> {
    const h: Record<string, string> = {};
    if (json) h["Content-Type"] = "application/json";
    if (this.token) h["Authorization"] = `Bearer ${this.token}`;
    return h;
  }

  async health(): Promise<{ status: string; version: string }> {
    return parse(await fetch(`${this.base}/healthz`));
  }

  async openSession(caseId: string): Promise<SessionOpened> {
    return parse(
      await fetch(`${this.base}/sessions`, {
        method: "POST",
        headers: this.headers(true),
        body: JSON.stringify({ case_id: caseId }),
      }),
    );
  }

  async sendMessage(sessionId: string, text: string): Promise<MessageReply> {
    return parse(
      await fetch(`${this.base}/sessions/${sessionId}/message`, {
        method: "POST",
        headers: this.headers(true),
        body: JSON.stringify({ text }),
      }),
    );
  }

  async finalize(sessionId: string, form: FinalizeForm): Promise<FinalizeResult> {
    return parse(
      await fetch(`${this.base}/sessions/${sessionId}/finalize`, {
        method: "POST",
        headers: this.headers(true),
        body: JSON.stringify(form),
      }),
    );
  }

  async runDots(runId: string): Promise<DotsRecord> {
    return parse(
      await fetch(`${this.base}/runs/${runId}/dots`, { headers: this.headers() }),
    );
  }

  async runs(params: Record<string, string> = {}): Promise<{ runs: RunSummary[] }> {
    const qs = new URLSearchParams(params).toString();
    return parse(
      await fetch(`${this.base}/runs${qs ? `?${qs}` : ""}`, { headers: this.headers() }),
    );
  }

  async windowMetrics(model?: string): Promise<WindowMetrics> {
    const qs = model ? `?model=${encodeURIComponent(model)}` : "";
    return parse(
      await fetch(`${this.base}/metrics/windows${qs}`, { headers: this.headers() }),
    );
  }

  async gate(modelVersion: string): Promise<GateDecision> {
    return parse(
      await fetch(`${this.base}/gate/${encodeURIComponent(modelVersion)}`, {
        headers: this.headers(),
      }),
    );
  }
}
