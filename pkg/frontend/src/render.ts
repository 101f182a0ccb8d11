import type { ConsultSession } from "./consult.js";
import type { DashboardState } from "./dashboard.js";
import { DOTS_FIELDS, type DotsRecord } from "./types.js";

// Thin DOM layer: state in, elements out. No metric math here.

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className = "",
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  return node;
}

export function renderChat(session: ConsultSession, container: HTMLElement): void {
  container.replaceChildren();
  for (const entry of session.messages) {
    const row = el("div", `turn turn-${entry.role}`);
    row.appendChild(el("span", "role", entry.role === "doctor" ? "You" : "Patient"));
    row.appendChild(el("span", "text", entry.text));
    for (const att of entry.attachments) {
      row.appendChild(el("span", "attachment", `[${att.kind}] ${att.content_ref}`));
    }
    container.appendChild(row);
  }
}

export function renderStepCounter(session: ConsultSession, container: HTMLElement): void {
  const [lo, hi] = session.stepBand;
  container.textContent =
    `steps ${session.stepsUsed}/${session.maxSteps} (expected band ${lo}-${hi})`;
  container.classList.toggle("over-budget", !session.inputEnabled && session.phase !== "idle");
}

export function renderScorecard(dots: DotsRecord | null, container: HTMLElement): void {
  container.replaceChildren();
  if (!dots) {
    container.appendChild(el("p", "empty", "No scorecard yet."));
    return;
  }
  const table = el("table", "scorecard");
  for (const field of DOTS_FIELDS) {
    const row = el("tr");
    row.appendChild(el("td", "metric-name", String(field)));
    const value = dots[field];
    row.appendChild(el("td", "metric-value",
      typeof value === "number" ? value.toFixed(2) : String(value)));
    table.appendChild(row);
  }
  container.appendChild(table);
  if (dots.critical_flag) {
    container.appendChild(el("p", "critical-banner", "CRITICAL CONDITION VIOLATED"));
  }
}

export function renderDashboard(state: DashboardState, container: HTMLElement): void {
  container.replaceChildren();
  if (state.error) {
    container.appendChild(el("p", "error", state.error));
    return;
  }
  for (const version of state.blockedVersions) {
    container.appendChild(el("p", "gate-banner", `PROMOTION BLOCKED: ${version}`));
  }
  if (state.empty) {
    container.appendChild(el("p", "empty", "No probes recorded yet."));
    return;
  }
  const rate = state.metrics?.trap_pass_rate;
  container.appendChild(el("p", "pass-rate",
    `trap pass rate: ${rate === null || rate === undefined ? "n/a" : rate.toFixed(1) + "%"}`));
  container.appendChild(el("p", "mttd",
    `MTTD: ${state.mttdS === null ? "n/a" : (state.mttdS / 60).toFixed(1) + " min"}`));

  const table = el("table", "heatmap");
  const header = el("tr");
  header.appendChild(el("th"));
  for (const m of state.heatmap.metrics) header.appendChild(el("th", "", m));
  table.appendChild(header);
  for (const cat of state.heatmap.categories) {
    const row = el("tr");
    row.appendChild(el("th", "", cat));
    for (const m of state.heatmap.metrics) {
      const cell = state.heatmap.cells.find((c) => c.category === cat && c.metric === m);
      const td = el("td", "cell", cell?.value === null || !cell ? "-" : cell.value.toFixed(1));
      if (cell?.value !== null && cell !== undefined) {
        td.style.background = heatColor(cell.value as number);
      }
      row.appendChild(td);
    }
    table.appendChild(row);
  }
  container.appendChild(table);

  const list = el("ul", "incidents");
  for (const incident of state.incidents) {
    list.appendChild(el("li", `incident incident-${incident.outcome}`,
      `${incident.incident_id} [${incident.model_version}] ` +
      `${incident.outcome}, detected after ${(incident.detectionLagS / 60).toFixed(0)} min: ` +
      incident.trigger));
  }
  container.appendChild(list);
}

function heatColor(value: number): string {
  // 0 -> red, 100 -> green, linear in between
  const clamped = Math.max(0, Math.min(100, value));
  const hue = (clamped / 100) * 120;
  return `hsl(${hue}, 70%, 82%)`;
}
