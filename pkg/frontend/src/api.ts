/** Thin REST client; every mutation in the UI goes through these calls. */

import { SessionSummary } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

async function request<T>(base: string, path: string, init?: RequestInit): Promise<T> {
  const response = await fetch(`${base}${path}`, {
    headers: { "content-type": "application/json" },
    ...init,
  });
  if (!response.ok) {
    let detail = `${response.status}`;
    try {
      const body = await response.json();
      detail = body.detail ?? detail;
    } catch {
      /* non-json error body */
    }
    throw new ApiError(response.status, detail);
  }
  return (await response.json()) as T;
}

export class Api {
  constructor(readonly base: string = "") {}

  listSessions(): Promise<SessionSummary[]> {
    return request(this.base, "/sessions");
  }

  getSession(id: string): Promise<SessionSummary> {
    return request(this.base, `/sessions/${id}`);
  }

  createSession(goal: string): Promise<{ session_id: string }> {
    return request(this.base, "/sessions", {
      method: "POST",
      body: JSON.stringify({ goal }),
    });
  }

  refine(id: string, text: string): Promise<{ queued: boolean }> {
    return request(this.base, `/sessions/${id}/refine`, {
      method: "POST",
      body: JSON.stringify({ text }),
    });
  }

  terminate(id: string): Promise<{ phase: string }> {
    return request(this.base, `/sessions/${id}/terminate`, { method: "POST" });
  }

  async fetchCode(id: string, version: number): Promise<string> {
    const response = await fetch(`${this.base}/sessions/${id}/code/${version}`);
    if (!response.ok) throw new ApiError(response.status, `no code version ${version}`);
    return response.text();
  }

  renderUrl(id: string, renderSetId: string, viewPath: string): string {
    const name = viewPath.split("/").pop() ?? viewPath;
    return `${this.base}/sessions/${id}/renders/${renderSetId}/${name}`;
  }
}
