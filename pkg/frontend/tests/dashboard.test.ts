import { afterEach, describe, expect, it, vi } from "vitest";

import { DotsClient } from "../src/api.js";
import {
  heatmapFromWindows,
  incidentTimeline,
  loadDashboard,
  meanTimeToDetectionS,
} from "../src/dashboard.js";
import type { Incident, WindowMetrics } from "../src/types.js";

const INCIDENTS: Incident[] = [
  {
    incident_id: "inc-2", model_version: "v1", first_failure_at: 7200,
    detected_at: 10800, trigger: "window drop", resolved_at: null, outcome: "blocked",
  },
  {
    incident_id: "inc-1", model_version: "v1", first_failure_at: 0,
    detected_at: 1200, trigger: "safety trap", resolved_at: 2000, outcome: "transient",
  },
];

const METRICS: WindowMetrics = {
  model: "v1",
  now: 100000,
  windows: {
    "1h": { EmergencyMedicine: { diagnosis_accuracy: 80, treatment_accuracy: 70 } },
    "24h": {
      EmergencyMedicine: { diagnosis_accuracy: 90, treatment_accuracy: 75 },
      InternalMedicine: { diagnosis_accuracy: 85 },
    },
  },
  trap_pass_rate: 96.5,
  probe_count: 48,
  incidents: INCIDENTS,
};

afterEach(() => vi.unstubAllGlobals());

describe("heatmap shaping", () => {
  it("builds a categories x metrics grid", () => {
    const heatmap = heatmapFromWindows(METRICS, "24h");
    expect(heatmap.categories).toEqual(["EmergencyMedicine", "InternalMedicine"]);
    expect(heatmap.metrics).toEqual(["diagnosis_accuracy", "treatment_accuracy"]);
    expect(heatmap.cells).toHaveLength(heatmap.categories.length * heatmap.metrics.length);
  });

  it("marks missing cells null instead of inventing numbers", () => {
    const heatmap = heatmapFromWindows(METRICS, "24h");
    const missing = heatmap.cells.find(
      (c) => c.category === "InternalMedicine" && c.metric === "treatment_accuracy",
    );
    expect(missing?.value).toBeNull();
  });

  it("handles an empty window", () => {
    const heatmap = heatmapFromWindows({ ...METRICS, windows: {} });
    expect(heatmap.cells).toEqual([]);
  });
});

describe("incidents", () => {
  it("orders the timeline by detection time and computes lags", () => {
    const rows = incidentTimeline(INCIDENTS);
    expect(rows.map((r) => r.incident_id)).toEqual(["inc-1", "inc-2"]);
    expect(rows[0]?.detectionLagS).toBe(1200);
    expect(rows[1]?.detectionLagS).toBe(3600);
  });

  it("averages detection lags", () => {
    expect(meanTimeToDetectionS(INCIDENTS)).toBe((1200 + 3600) / 2);
    expect(meanTimeToDetectionS([])).toBeNull();
  });
});

describe("loadDashboard", () => {
  it("fetches metrics and flags denied versions", async () => {
    vi.stubGlobal("fetch", vi.fn(async (url: RequestInfo | URL) => {
      const path = String(url);
      if (path.includes("/metrics/windows")) {
        return new Response(JSON.stringify(METRICS), { status: 200 });
      }
      if (path.includes("/gate/v1")) {
        return new Response(JSON.stringify({ model_version: "v1", decision: "deny" }), { status: 200 });
      }
      if (path.includes("/gate/v2")) {
        return new Response(JSON.stringify({ model_version: "v2", decision: "allow" }), { status: 200 });
      }
      throw new Error(`unexpected: ${path}`);
    }));
    const state = await loadDashboard(new DotsClient("http://svc"), "v1", ["v1", "v2"]);
    expect(state.empty).toBe(false);
    expect(state.blockedVersions).toEqual(["v1"]);
    expect(state.mttdS).toBe(2400);
    expect(state.heatmap.categories).toContain("EmergencyMedicine");
  });

  it("reports an empty store as an empty state, not an error", async () => {
    vi.stubGlobal("fetch", vi.fn(async () => new Response(JSON.stringify({
      model: null, now: 0, windows: { "1h": {}, "24h": {} },
      trap_pass_rate: null, probe_count: 0, incidents: [],
    }), { status: 200 })));
    const state = await loadDashboard(new DotsClient("http://svc"));
    expect(state.empty).toBe(true);
    expect(state.error).toBe("");
  });

  it("captures fetch failures as display errors", async () => {
    vi.stubGlobal("fetch", vi.fn(async () => {
      throw new Error("connection refused");
    }));
    const state = await loadDashboard(new DotsClient("http://svc"));
    expect(state.error).toContain("connection refused");
    expect(state.empty).toBe(true);
  });
});
