/**
 * Session client: owns the socket, the UiSessionState, and the control
 * pump. Transport-agnostic over the WebSocket interface so tests can run
 * it under node's `ws`.
 */

import {
  Control,
  controlMessage,
  endSessionMessage,
  parseFrame,
  startSessionMessage,
} from "./protocol.js";
import { UiSessionState } from "./state.js";

export interface SessionHooks {
  onFrame?: (frame: ReturnType<typeof parseFrame>) => void;
  onStats?: (stats: { frameIndex: number; stepMs: number; nfe: number }) => void;
  onError?: (code: string, text: string) => void;
  onStarted?: (info: { width: number; height: number; framesPerStep: number; targetFps: number }) => void;
  onClosed?: () => void;
  now?: () => number;
}

export interface WebSocketLike {
  binaryType: string;
  send(data: string): void;
  close(): void;
  addEventListener(type: string, listener: (ev: any) => void): void;
}

export class SessionClient {
  state = new UiSessionState();
  private pump: ReturnType<typeof setInterval> | null = null;
  private controlIntervalMs = 250;

  constructor(private ws: WebSocketLike, private hooks: SessionHooks = {}) {
    ws.binaryType = "arraybuffer";
    ws.addEventListener("open", () => {
      this.state.status = "open";
    });
    ws.addEventListener("message", (ev: MessageEvent) => this.onMessage(ev.data));
    ws.addEventListener("close", () => {
      this.state.status = "closed";
      this.stopPump();
      hooks.onClosed?.();
    });
    ws.addEventListener("error", () => {
      this.state.status = "error";
      this.stopPump();
      hooks.onClosed?.();
    });
  }

  start(seed: number, promptId?: number) {
    this.ws.send(startSessionMessage(seed, promptId));
  }

  setControl(c: Control) {
    this.state.setControl(c);
  }

  end() {
    this.stopPump();
    this.ws.send(endSessionMessage());
  }

  private onMessage(data: any) {
    const now = this.hooks.now ? this.hooks.now() : Date.now();
    if (typeof data === "string") {
      const msg = JSON.parse(data);
      switch (msg.type) {
        case "session_started": {
          this.controlIntervalMs = 1000 / (msg.target_fps ?? 4);
          this.startPump();
          this.hooks.onStarted?.({
            width: msg.width,
            height: msg.height,
            framesPerStep: msg.frames_per_step,
            targetFps: msg.target_fps,
          });
          break;
        }
        case "stats": {
          const s = { frameIndex: msg.frame_index, stepMs: msg.step_ms, nfe: msg.nfe };
          this.state.acceptStats(s);
          this.hooks.onStats?.(s);
          break;
        }
        case "session_ended":
          this.stopPump();
          break;
        case "error":
          this.hooks.onError?.(msg.code, msg.text);
          break;
      }
      return;
    }
    const frame = parseFrame(data as ArrayBuffer);
    const accepted = this.state.acceptFrame(frame, now);
    if (accepted) this.hooks.onFrame?.(accepted);
  }

  /** One coalesced Control per frame interval, never more. */
  private startPump() {
    this.stopPump();
    this.pump = setInterval(() => {
      const c = this.state.drainControl();
      this.ws.send(controlMessage(c));
    }, this.controlIntervalMs);
  }

  private stopPump() {
    if (this.pump !== null) {
      clearInterval(this.pump);
      this.pump = null;
    }
  }
}
