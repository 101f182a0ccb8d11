import { DotsClient } from "./api.js";
import { ConsultSession } from "./consult.js";
import { pollDashboard } from "./dashboard.js";
import { renderChat, renderDashboard, renderScorecard, renderStepCounter } from "./render.js";
import type { FinalizeForm } from "./types.js";

declare global {
  interface Window {
    DOTS_API_BASE?: string;
  }
}

const base = window.DOTS_API_BASE ?? "http://127.0.0.1:8000";
const client = new DotsClient(base);
const session = new ConsultSession(client);

const $ = (id: string) => document.getElementById(id) as HTMLElement;
const input = (id: string) => document.getElementById(id) as HTMLInputElement;

function splitList(value: string): string[] {
  return value.split(";").map((s) => s.trim()).filter(Boolean);
}

function refreshConsole(): void {
  renderChat(session, $("chat"));
  renderStepCounter(session, $("steps"));
  renderScorecard(session.scorecard, $("scorecard"));
  input("question").disabled = !session.inputEnabled;
  ($("ask") as HTMLButtonElement).disabled = !session.inputEnabled;
  $("status").textContent = session.phase + (session.lastError ? ` (${session.lastError})` : "");
}

$("open").addEventListener("click", async () => {
  try {
    await session.open(input("case-id").value.trim());
  } catch (err) {
    $("status").textContent = String(err);
  }
  refreshConsole();
});

$("ask").addEventListener("click", async () => {
  const text = input("question").value.trim();
  if (!text) return;
  try {
    await session.ask(text);
    input("question").value = "";
  } catch {
    // phase/lastError already updated by the session
  }
  refreshConsole();
});

$("finalize").addEventListener("click", async () => {
  const form: FinalizeForm = {
    diagnoses: splitList(input("f-diagnoses").value),
    icd10: splitList(input("f-icd10").value),
    differential: splitList(input("f-differential").value),
    investigations: splitList(input("f-investigations").value),
    treatments: splitList(input("f-treatments").value),
    explanation: input("f-explanation").value,
  };
  const problems = session.validateForm(form);
  if (problems.length > 0) {
    $("form-errors").textContent = problems.join("; ");
    return;
  }
  $("form-errors").textContent = "";
  try {
    await session.finalize(form);
  } catch (err) {
    $("form-errors").textContent = session.lastError || String(err);
  }
  refreshConsole();
});

pollDashboard(client, (state) => renderDashboard(state, $("dashboard")), 30_000);
refreshConsole();
