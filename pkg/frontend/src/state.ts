/**
 * Session-side bookkeeping: monotone frame ordering, fps estimation, a
 * stats ring for the HUD, and latest-wins control coalescing (at most one
 * Control leaves per frame interval, mirroring the service policy).
 */

import { Control, FrameOut, Stats } from "./protocol.js";

export type ConnectionStatus = "connecting" | "open" | "closed" | "error";

const ZERO: Control = { dx: 0, dy: 0, dzoom: 0, drot: 0 };

export class UiSessionState {
  status: ConnectionStatus = "connecting";
  lastFrameIndex = -1;
  staleDropped = 0;
  framesRendered = 0;
  fpsEstimate = 0;
  pendingControl: Control = { ...ZERO };
  statsRing: Stats[] = [];
  controlTrace: Control[] = [];
  private frameTimes: number[] = [];

  /** Returns the frame when it should be rendered, null when stale. */
  acceptFrame(frame: FrameOut, nowMs: number): FrameOut | null {
    if (frame.frameIndex <= this.lastFrameIndex) {
      this.staleDropped += 1;
      return null;
    }
    this.lastFrameIndex = frame.frameIndex;
    this.framesRendered += 1;
    this.frameTimes.push(nowMs);
    while (this.frameTimes.length > 0 && nowMs - this.frameTimes[0] > 3000) {
      this.frameTimes.shift();
    }
    if (this.frameTimes.length >= 2) {
      const span = (nowMs - this.frameTimes[0]) / 1000;
      this.fpsEstimate = span > 0 ? (this.frameTimes.length - 1) / span : 0;
    }
    return frame;
  }

  acceptStats(s: Stats) {
    this.statsRing.push(s);
    if (this.statsRing.length > 64) this.statsRing.shift();
  }

  setControl(c: Control) {
    this.pendingControl = { ...c };
  }

  /** Take the coalesced control for this frame interval and record it. */
  drainControl(): Control {
    const c = this.pendingControl;
    this.pendingControl = { ...ZERO };
    this.controlTrace.push({ ...c });
    return c;
  }

  lastStats(): Stats | null {
    return this.statsRing.length ? this.statsRing[this.statsRing.length - 1] : null;
  }
}
