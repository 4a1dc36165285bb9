/**
 * Server-sent-events consumer on fetch + ReadableStream, so the same code
 * runs in the browser and under node. Resumes from the last seen seq after a
 * drop; the reducer's seq check makes re-delivered frames harmless.
 */

import { StreamFrame } from "./types.js";

export interface StreamHandle {
  stop: () => void;
  done: Promise<void>;
}

export interface StreamOptions {
  baseUrl?: string;
  fromSeq?: number;
  /** reconnect delay in ms; retries stop after `stop()` or a terminal error */
  retryMs?: number;
  onError?: (err: unknown) => void;
}

export function openEventStream(
  sessionId: string,
  onFrame: (frame: StreamFrame) => void,
  options: StreamOptions = {},
): StreamHandle {
  const base = (options.baseUrl ?? "").replace(/\/$/, "");
  let lastSeq = (options.fromSeq ?? 1) - 1;
  let stopped = false;
  let abort = new AbortController();

  const done = (async () => {
    while (!stopped) {
      try {
        const response = await fetch(
          `${base}/sessions/${sessionId}/events?from_seq=${lastSeq + 1}`,
          { signal: abort.signal, headers: { accept: "text/event-stream" } },
        );
        if (response.status === 404) {
          throw new Error(`unknown session ${sessionId}`);
        }
        if (!response.ok || !response.body) {
          throw new Error(`stream failed with status ${response.status}`);
        }
        const reader = response.body.getReader();
        const decoder = new TextDecoder();
        let buffer = "";
        for (;;) {
          const { value, done: eof } = await reader.read();
          if (eof) return; // server closed: session is terminal
          buffer += decoder.decode(value, { stream: true });
          let newline;
          while ((newline = buffer.indexOf("\n")) >= 0) {
            const line = buffer.slice(0, newline).trim();
            buffer = buffer.slice(newline + 1);
            if (line.startsWith("data: ")) {
              const frame = JSON.parse(line.slice("data: ".length)) as StreamFrame;
              if (frame.seq > lastSeq) lastSeq = frame.seq;
              onFrame(frame);
            }
          }
        }
      } catch (err) {
        if (stopped) return;
        if (err instanceof Error && err.message.startsWith("unknown session")) {
          options.onError?.(err);
          return;
        }
        options.onError?.(err);
        await new Promise((resolve) => setTimeout(resolve, options.retryMs ?? 1000));
        abort = new AbortController();
      }
    }
  })();

  return {
    stop: () => {
      stopped = true;
      abort.abort();
    },
    done,
  };
}
