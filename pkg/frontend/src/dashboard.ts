import { DotsClient } from "./api.js";
import type { Incident, WindowMetrics } from "./types.js";

// Read-only monitoring views. Everything is fetched; nothing is derived
// beyond reshaping for display (heatmap grid, MTTD formatting).

export interface HeatmapCell {
  category: string;
  metric: string;
  value: number | null;
}

export interface HeatmapModel {
  categories: string[];
  metrics: string[];
  cells: HeatmapCell[];
}

export function heatmapFromWindows(
  metrics: WindowMetrics,
  window: "1h" | "24h" = "24h",
): HeatmapModel {
  const perCategory = metrics.windows[window] ?? {};
  const categories = Object.keys(perCategory).sort();
  const metricNames = new Set<string>();
  for (const cat of categories) {
    for (const m of Object.keys(perCategory[cat] ?? {})) metricNames.add(m);
  }
  const names = [...metricNames].sort();
  const cells: HeatmapCell[] = [];
  for (const cat of categories) {
    for (const m of names) {
      const value = perCategory[cat]?.[m];
      cells.push({ category: cat, metric: m, value: value ?? null });
    }
  }
  return { categories, metrics: names, cells };
}

export interface IncidentRow {
  incident_id: string;
  model_version: string;
  detectionLagS: number;
  outcome: string;
  trigger: string;
}

export function incidentTimeline(incidents: Incident[]): IncidentRow[] {
  return [...incidents]
    .sort((a, b) => a.detected_at - b.detected_at)
    .map((i) => ({
      incident_id: i.incident_id,
      model_version: i.model_version,
      detectionLagS: i.detected_at - i.first_failure_at,
      outcome: i.outcome,
      trigger: i.trigger,
    }));
}

export function meanTimeToDetectionS(incidents: Incident[]): number | null {
  if (incidents.length === 0) return null;
  const total = incidents.reduce((acc, i) => acc + (i.detected_at - i.first_failure_at), 0);
  return total / incidents.length;
}

export interface DashboardState {
  metrics: WindowMetrics | null;
  heatmap: HeatmapModel;
  incidents: IncidentRow[];
  mttdS: number | null;
  blockedVersions: string[];
  empty: boolean;
  error: string;
}

export async function loadDashboard(
  client: DotsClient,
  model?: string,
  gateVersions: string[] = [],
): Promise<DashboardState> {
  try {
    const metrics = await client.windowMetrics(model);
    const blocked: string[] = [];
    for (const version of gateVersions) {
      const decision = await client.gate(version);
      if (decision.decision === "deny") blocked.push(version);
    }
    return {
      metrics,
      heatmap: heatmapFromWindows(metrics),
      incidents: incidentTimeline(metrics.incidents),
      mttdS: meanTimeToDetectionS(metrics.incidents),
      blockedVersions: blocked,
      empty: metrics.probe_count === 0,
      error: "",
    };
  } catch (err) {
    return {
      metrics: null,
      heatmap: { categories: [], metrics: [], cells: [] },
      incidents: [],
      mttdS: null,
      blockedVersions: [],
      empty: true,
      error: String(err),
    };
  }
}

/** Poll the dashboard on a fixed interval (default 30 s); returns a stop
 * function. One active poller per page. */
export function pollDashboard(
  client: DotsClient,
  onUpdate: (state: DashboardState) => void,
  intervalMs = 30_000,
  model?: string,
  gateVersions: string[] = [],
): () => void {
  let stopped = false;
  const tick = async () => {
    if (stopped) return;
    onUpdate(await loadDashboard(client, model, gateVersions));
  };
  void tick();
  const timer = setInterval(() => void tick(), intervalMs);
  return () => {
    stopped = true;
    clearInterval(timer);
  };
}
