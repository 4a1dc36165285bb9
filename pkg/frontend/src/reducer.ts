/**
 * Pure fold from stream frames to the view model.
 *
 * The UI is a function of the event stream plus composer state: replaying the
 * same frames always lands on the same model, and a duplicate frame after a
 * reconnect (same seq) is dropped before it can duplicate a timeline entry.
 */

import {
  ChecklistItem,
  SessionEvent,
  StreamFrame,
  TimelineEntry,
  ViewModel,
} from "./types.js";

function turnLabel(event: SessionEvent): string {
  const p = event.payload;
  switch (p.role) {
    case "planner":
      return "planner is breaking the goal into subtasks";
    case "retrieval":
      return p.query_kind === "ErrorMessage"
        ? "retrieval is looking up the execution error"
        : `retrieval is researching subtask ${p.subtask_index ?? ""}`.trim();
    case "coding": {
      const purpose = p.purpose ?? "code";
      if (purpose === "subtask") return `coding subtask ${p.subtask_index}`;
      if (purpose === "retry") return "coding a fix for the execution error";
      if (purpose === "fix") return "coding fixes for the critiques";
      if (purpose === "followup") return "coding the verification follow-ups";
      if (purpose === "refine") return "coding the requested edit";
      return "coding";
    }
    case "critic":
      return `critic is reviewing the renders (round ${p.round})`;
    case "verification":
      return `verification round ${p.round}`;
    case "user":
      return "user request";
    default:
      return `${p.role ?? event.actor} turn`;
  }
}

function pushTimeline(model: ViewModel, event: SessionEvent, entry: Omit<TimelineEntry, "seq" | "actor" | "kind">): void {
  model.timeline.push({ seq: event.seq, actor: event.actor, kind: event.kind, ...entry });
}

/** Fold one frame; frames at or below lastSeq are duplicates and ignored. */
export function reduce(model: ViewModel, frame: StreamFrame): ViewModel {
  if (frame.seq <= model.lastSeq) return model;
  const event = frame.event;
  model.lastSeq = frame.seq;
  const p = event.payload;

  switch (event.kind) {
    case "PhaseChanged": {
      model.phase = p.to;
      if (p.goal) model.goal = p.goal;
      if (p.from !== null && p.from !== undefined) {
        pushTimeline(model, event, { label: `phase changed to ${p.to}` });
      }
      break;
    }
    case "TurnStarted": {
      pushTimeline(model, event, { label: turnLabel(event) });
      break;
    }
    case "TurnEnded": {
      if (p.role === "critic" && p.critique_round) {
        const round = p.critique_round;
        model.checklist = round.items.map(
          (item: any): ChecklistItem => ({
            index: item.index,
            problem: item.problem,
            fix: item.suggested_fix,
            status: "Pending",
          }),
        );
        pushTimeline(model, event, {
          label: round.approved
            ? "critic approved the scene"
            : `critic found ${round.items.length} issue(s)`,
        });
      } else if (p.role === "verification" && p.verification_round) {
        const round = p.verification_round;
        for (const item of round.items) {
          const target = model.checklist.find((c) => c.index === item.critique_index);
          if (target) {
            target.status = item.status;
            target.followup = item.followup_instruction ?? undefined;
          }
        }
        pushTimeline(model, event, {
          label: round.all_resolved
            ? "verification: all critiques resolved"
            : "verification: follow-ups required",
        });
        if (round.all_resolved && model.phase === "UserRefine") {
          model.composer.busy = false;
        }
      } else if (p.role === "user" && p.refinement) {
        model.refinements.push(p.refinement.text);
        model.composer.busy = !p.refinement.terminator;
        pushTimeline(model, event, {
          label: p.refinement.terminator
            ? "termination keyword submitted"
            : `edit requested: ${p.refinement.text}`,
        });
        // a fresh edit gets its own checklist entry until verification reports
        if (!p.refinement.terminator) {
          model.checklist = [
            {
              index: 1,
              problem: `edit pending: ${p.refinement.text}`,
              fix: p.refinement.text,
              status: "Pending",
            },
          ];
        }
      }
      break;
    }
    case "CodeExecuted": {
      model.code.push({ version: p.version, source: p.source, ok: p.ok });
      if (p.ok) {
        pushTimeline(model, event, { label: `executed version ${p.version}` });
      } else {
        pushTimeline(model, event, {
          label: `version ${p.version} failed: ${p.error?.kind ?? "error"}`,
          detail: p.error?.traceback ?? p.error?.message ?? "",
          error: true,
        });
      }
      break;
    }
    case "RenderProduced": {
      const rs = p.render_set;
      model.renders.push({
        renderSetId: rs.render_set_id,
        purpose: p.purpose ?? "",
        seq: event.seq,
        views: rs.views.map((v: any) => v.image_path),
      });
      pushTimeline(model, event, {
        label: `rendered ${rs.render_set_id} (${rs.view_count} views, ${p.purpose})`,
      });
      break;
    }
    case "Error": {
      if (p.warning) {
        pushTimeline(model, event, { label: `warning: ${p.message}` });
        if (model.phase === "UserRefine") model.composer.busy = false;
      } else {
        pushTimeline(model, event, { label: `error: ${p.message}`, error: true });
      }
      break;
    }
    case "Terminated": {
      model.phase = "Terminated";
      model.composer.busy = false;
      pushTimeline(model, event, { label: "session terminated" });
      break;
    }
    default:
      break; // ModelCall / ToolCall stay out of the timeline
  }

  model.composer.enabled =
    model.phase === "UserRefine" && !model.composer.busy;
  return model;
}

export function reduceAll(model: ViewModel, frames: StreamFrame[]): ViewModel {
  for (const frame of frames) reduce(model, frame);
  return model;
}

/** Stable JSON snapshot used by fidelity tests and debugging. */
export function snapshot(model: ViewModel): string {
  return JSON.stringify(model, null, 2);
}
