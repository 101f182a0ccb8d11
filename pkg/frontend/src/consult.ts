import { ApiError, DotsClient } from "./api.js";
import type {
  AttachmentRef,
  DotsRecord,
  FinalizeForm,
  SessionOpened,
} from "./types.js";

export type ConsultPhase = "idle" | "active" | "budget-exhausted" | "scored" | "expired";

export interface ChatEntry {
  role: "doctor" | "patient";
  text: string;
  attachments: AttachmentRef[];
}

/**
 * Human-doctor console state. Every number here is server-authoritative:
 * the step counter is whatever the service last reported, the scorecard
 * is the service's record verbatim, and the client never recomputes or
 * adjusts a metric.
 */
export class ConsultSession {
  phase: ConsultPhase = "idle";
  sessionId = "";
  caseId = "";
  intro = "";
  attachments: AttachmentRef[] = [];
  stepsExpected = 0;
  maxSteps = 0;
  stepsUsed = 0;
  messages: ChatEntry[] = [];
  runId = "";
  scorecard: DotsRecord | null = null;
  lastError = "";

  constructor(private client: DotsClient) {}

  get inputEnabled(): boolean {
    return this.phase === "active" && this.stepsUsed < this.maxSteps;
  }

  /** Expected step band shown next to the counter: [0.75x, 1.25x]. */
  get stepBand(): [number, number] {
    return [0.75 * this.stepsExpected, 1.25 * this.stepsExpected];
  }

  async open(caseId: string): Promise<SessionOpened> {
    const opened = await this.client.openSession(caseId);
    this.applyOpened(opened);
    return opened;
  }

  /** Rebuild local state for an existing session after a reload or a
   * network drop. The transcript so far is not replayed (the service owns
   * it); the console resumes with the live step counter. */
  resume(opened: SessionOpened, stepsUsed: number): void {
    this.applyOpened(opened);
    this.stepsUsed = stepsUsed;
    if (stepsUsed >= this.maxSteps) this.phase = "budget-exhausted";
  }

  private applyOpened(opened: SessionOpened): void {
    this.phase = "active";
    this.sessionId = opened.session_id;
    this.caseId = opened.case_id;
    this.intro = opened.intro;
    this.attachments = opened.attachments;
    this.stepsExpected = opened.steps_expected;
    this.maxSteps = opened.max_steps;
    this.stepsUsed = opened.steps_used;
    this.messages = [{ role: "patient", text: opened.intro, attachments: opened.attachments }];
    this.runId = "";
    this.scorecard = null;
    this.lastError = "";
  }

  async ask(text: string): Promise<string> {
    if (!this.inputEnabled) {
      throw new Error("input disabled: " + this.phase);
    }
    try {
      const reply = await this.client.sendMessage(this.sessionId, text);
      this.messages.push({ role: "doctor", text, attachments: [] });
      this.messages.push({ role: "patient", text: reply.reply, attachments: reply.attachments });
      this.stepsUsed = reply.steps_used;
      if (reply.steps_remaining <= 0) this.phase = "budget-exhausted";
      return reply.reply;
    } catch (err) {
      this.noteError(err);
      throw err;
    }
  }

  validateForm(form: FinalizeForm): string[] {
    const problems: string[] = [];
    if (form.diagnoses.filter((d) => d.trim()).length === 0) {
      problems.push("at least one diagnosis is required");
    }
    return problems;
  }

  async finalize(form: FinalizeForm): Promise<DotsRecord> {
    if (this.phase !== "active" && this.phase !== "budget-exhausted") {
      throw new Error("no session to finalize");
    }
    const problems = this.validateForm(form);
    if (problems.length > 0) {
      throw new Error(problems.join("; "));
    }
    try {
      const result = await this.client.finalize(this.sessionId, form);
      this.runId = result.run_id;
      this.scorecard = result.dots;
      this.phase = "scored";
      return result.dots;
    } catch (err) {
      this.noteError(err);
      throw err;
    }
  }

  private noteError(err: unknown): void {
    if (err instanceof ApiError) {
      this.lastError = err.detail;
      if (err.status === 409) this.phase = "budget-exhausted";
      if (err.status === 410 || err.status === 404) this.phase = "expired";
    } else {
      this.lastError = String(err);
    }
  }
}
