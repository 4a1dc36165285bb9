/** Bootstrap: pick or create a session, subscribe, wire the composer. */

import { Api, ApiError } from "./api.js";
import { reduce } from "./reducer.js";
import { openEventStream } from "./stream.js";
import { emptyModel } from "./types.js";
import { StudioView } from "./view.js";

async function pickSession(api: Api): Promise<string> {
  const params = new URLSearchParams(window.location.search);
  const fromUrl = params.get("session");
  if (fromUrl) return fromUrl;
  const sessions = await api.listSessions();
  if (sessions.length) {
    const latest = sessions.sort((a, b) => (b.updated_at ?? 0) - (a.updated_at ?? 0))[0];
    return latest.session_id;
  }
  const goal = window.prompt("No sessions yet. Describe the asset to create:");
  if (!goal) throw new Error("no session selected");
  const created = await api.createSession(goal);
  return created.session_id;
}

async function start(): Promise<void> {
  const api = new Api("");
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app element");

  let sessionId: string;
  try {
    sessionId = await pickSession(api);
  } catch (err) {
    root.textContent = `cannot open a session: ${err}`;
    return;
  }

  const model = emptyModel(sessionId);
  const view = new StudioView(
    root,
    api,
    async (text) => {
      try {
        await api.refine(sessionId, text);
        view.showNotice("queued");
      } catch (err) {
        if (err instanceof ApiError && err.status === 409) {
          view.showNotice("session is still auto-refining");
        } else {
          view.showNotice(`refine failed: ${err}`);
        }
      }
    },
    async () => {
      try {
        await api.terminate(sessionId);
      } catch (err) {
        view.showNotice(`terminate failed: ${err}`);
      }
    },
  );

  openEventStream(
    sessionId,
    (frame) => {
      reduce(model, frame);
      view.render(model);
    },
    {
      onError: (err) => view.showNotice(`stream hiccup: ${err}`),
    },
  );
}

start();
