// Mirrors of the service payloads. The UI never computes any of these
// numbers itself; they arrive verbatim from the service.

export interface DotsRecord {
  question_accuracy: number;
  diagnosis_accuracy: number;
  icd10_accuracy: number;
  d_pass: boolean;
  differential_accuracy: number;
  differential_top3: number;
  differential_top5: number;
  treatment_accuracy: number;
  treatment_weighted_score: number;
  diagnostic_accuracy: number;
  critical_passed: number;
  conversation_complete: number;
  steps: number;
  step_flag: boolean;
  critical_flag: boolean;
  details: Record<string, number>;
  vacuous: string[];
}

export const DOTS_FIELDS: (keyof DotsRecord)[] = [
  "question_accuracy",
  "diagnosis_accuracy",
  "icd10_accuracy",
  "d_pass",
  "differential_accuracy",
  "differential_top3",
  "differential_top5",
  "treatment_accuracy",
  "treatment_weighted_score",
  "diagnostic_accuracy",
  "critical_passed",
  "conversation_complete",
  "steps",
  "step_flag",
];

export interface AttachmentRef {
  kind: string;
  content_ref: string;
}

export interface SessionOpened {
  session_id: string;
  case_id: string;
  intro: string;
  attachments: AttachmentRef[];
  steps_expected: number;
  max_steps: number;
  steps_used: number;
}

export interface MessageReply {
  reply: string;
  attachments: AttachmentRef[];
  steps_used: number;
  steps_remaining: number;
}

export interface FinalizeForm {
  diagnoses: string[];
  icd10: string[];
  differential: string[];
  investigations: string[];
  treatments: string[];
  explanation: string;
}

export interface FinalizeResult {
  run_id: string;
  dots: DotsRecord;
}

export interface Incident {
  incident_id: string;
  model_version: string;
  first_failure_at: number;
  detected_at: number;
  trigger: string;
  resolved_at: number | null;
  outcome: string;
}

export interface WindowMetrics {
  model: string | null;
  now: number;
  windows: Record<string, Record<string, Record<string, number>>>;
  trap_pass_rate: number | null;
  probe_count: number;
  incidents: Incident[];
}

export interface GateDecision {
  model_version: string;
  decision: "allow" | "deny";
}

export interface RunSummary {
  run_id: string;
  kind: string;
  namespace: string;
  model_version: string;
  case_id: string | null;
  created_at: number;
}
