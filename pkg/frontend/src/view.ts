/** DOM rendering: each panel redraws from the model after every frame. */

import { Api } from "./api.js";
import { changedLineCount, diffLines } from "./diff.js";
import { ViewModel } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export class StudioView {
  private root: HTMLElement;
  private timelineBox: HTMLElement;
  private galleryBox: HTMLElement;
  private codeBox: HTMLElement;
  private checklistBox: HTMLElement;
  private composerBox: HTMLElement;
  private header: HTMLElement;
  private input: HTMLTextAreaElement;
  private sendButton: HTMLButtonElement;
  private terminateButton: HTMLButtonElement;
  private notice: HTMLElement;
  private renderedTimelineCount = 0;
  private renderedGalleryCount = 0;

  constructor(
    root: HTMLElement,
    private api: Api,
    private onSubmit: (text: string) => void,
    private onTerminate: () => void,
  ) {
    this.root = root;
    this.header = el("div", "header");
    this.timelineBox = el("div", "timeline panel");
    this.galleryBox = el("div", "gallery panel");
    this.codeBox = el("div", "code panel");
    this.checklistBox = el("div", "checklist panel");
    this.composerBox = el("div", "composer panel");
    this.input = el("textarea");
    this.input.placeholder = "Describe the next edit, or send the termination keyword";
    this.sendButton = el("button", "", "Send edit");
    this.terminateButton = el("button", "secondary", "Finish session");
    this.notice = el("div", "notice");

    this.sendButton.addEventListener("click", () => {
      const text = this.input.value.trim();
      if (text) this.onSubmit(text);
    });
    this.terminateButton.addEventListener("click", () => this.onTerminate());

    const columns = el("div", "columns");
    const left = el("div", "column");
    left.append(this.timelineBox, this.checklistBox);
    const right = el("div", "column");
    right.append(this.galleryBox, this.codeBox);
    columns.append(left, right);
    this.composerBox.append(this.input, this.sendButton, this.terminateButton, this.notice);
    this.root.append(this.header, columns, this.composerBox);
  }

  showNotice(text: string): void {
    this.notice.textContent = text;
  }

  render(model: ViewModel): void {
    this.header.textContent = `${model.goal || model.sessionId} - phase: ${model.phase}`;

    for (const entry of model.timeline.slice(this.renderedTimelineCount)) {
      const row = el("div", entry.error ? "entry error" : "entry");
      row.append(el("span", "seq", `#${entry.seq}`), el("span", "label", entry.label));
      if (entry.detail) {
        const expander = el("details");
        expander.append(el("summary", "", "traceback"), el("pre", "", entry.detail));
        row.append(expander);
      }
      this.timelineBox.append(row);
    }
    this.renderedTimelineCount = model.timeline.length;

    for (const renderRow of model.renders.slice(this.renderedGalleryCount)) {
      const row = el("div", "render-row");
      row.append(el("div", "caption", `${renderRow.renderSetId} (${renderRow.purpose})`));
      const strip = el("div", "strip");
      for (const view of renderRow.views) {
        const img = el("img");
        img.src = this.api.renderUrl(model.sessionId, renderRow.renderSetId, view);
        img.loading = "lazy";
        strip.append(img);
      }
      row.append(strip);
      this.galleryBox.append(row);
    }
    this.renderedGalleryCount = model.renders.length;

    this.renderCode(model);
    this.renderChecklist(model);

    this.input.disabled = !model.composer.enabled;
    this.sendButton.disabled = !model.composer.enabled;
    this.terminateButton.disabled = !model.composer.enabled;
    if (model.phase === "Terminated") {
      this.showNotice("session terminated");
    } else if (model.composer.busy) {
      this.showNotice("edit in progress...");
    }
  }

  private renderCode(model: ViewModel): void {
    this.codeBox.textContent = "";
    const latest = model.code[model.code.length - 1];
    if (!latest) return;
    this.codeBox.append(
      el("div", "caption", `version ${latest.version} ${latest.ok ? "(ok)" : "(failed)"}`),
    );
    const previous = model.code[model.code.length - 2];
    if (previous) {
      const diff = diffLines(previous.source, latest.source);
      const caption = el(
        "div",
        "caption small",
        `diff vs v${previous.version}: ${changedLineCount(diff)} changed line(s)`,
      );
      const pre = el("pre", "diff");
      for (const line of diff) {
        const span = el("span", `line ${line.kind}`);
        span.textContent =
          (line.kind === "add" ? "+ " : line.kind === "del" ? "- " : "  ") + line.text + "\n";
        pre.append(span);
      }
      this.codeBox.append(caption, pre);
    } else {
      this.codeBox.append(el("pre", "", latest.source));
    }
  }

  private renderChecklist(model: ViewModel): void {
    this.checklistBox.textContent = "";
    if (!model.checklist.length) return;
    this.checklistBox.append(el("div", "caption", "critiques"));
    for (const item of model.checklist) {
      const row = el("div", `check ${item.status.toLowerCase()}`);
      row.append(
        el("span", "badge", item.status),
        el("span", "", `${item.index}. ${item.problem} -> ${item.fix}`),
      );
      if (item.followup) row.append(el("div", "followup", `follow-up: ${item.followup}`));
      this.checklistBox.append(row);
    }
  }
}
