/** Wire types mirroring the service's JSON, plus the view model they fold into. */

export interface SessionEvent {
  seq: number;
  timestamp: number;
  actor: string;
  kind:
    | "TurnStarted"
    | "TurnEnded"
    | "ModelCall"
    | "ToolCall"
    | "CodeExecuted"
    | "RenderProduced"
    | "PhaseChanged"
    | "Error"
    | "Terminated";
  payload: Record<string, any>;
}

export interface StreamFrame {
  seq: number;
  event: SessionEvent;
}

export interface SessionSummary {
  session_id: string;
  goal: string;
  phase: string;
  latest_code_version: number | null;
  latest_render_set_id: string | null;
  created_at: number | null;
  updated_at: number | null;
}

export type ItemStatus = "Pending" | "Resolved" | "Partial" | "Unresolved";

export interface TimelineEntry {
  seq: number;
  kind: string;
  actor: string;
  label: string;
  /** expandable detail, e.g. a traceback for failed executions */
  detail?: string;
  error?: boolean;
}

export interface RenderRow {
  renderSetId: string;
  purpose: string;
  seq: number;
  /** image paths relative to the session directory */
  views: string[];
}

export interface CodePane {
  version: number;
  source: string;
  ok: boolean;
}

export interface ChecklistItem {
  index: number;
  problem: string;
  fix: string;
  status: ItemStatus;
  followup?: string;
}

export interface ComposerState {
  /** enabled only in UserRefine with no refinement in flight */
  enabled: boolean;
  busy: boolean;
  notice: string | null;
}

export interface ViewModel {
  sessionId: string;
  goal: string;
  phase: string;
  lastSeq: number;
  timeline: TimelineEntry[];
  renders: RenderRow[];
  code: CodePane[];
  checklist: ChecklistItem[];
  refinements: string[];
  composer: ComposerState;
}

export function emptyModel(sessionId: string): ViewModel {
  return {
    sessionId,
    goal: "",
    phase: "InitialCreation",
    lastSeq: 0,
    timeline: [],
    renders: [],
    code: [],
    checklist: [],
    refinements: [],
    composer: { enabled: false, busy: false, notice: null },
  };
}
