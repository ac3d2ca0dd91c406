import { describe, expect, it } from "vitest";

import { FrameOut } from "../src/protocol.js";
import { UiSessionState } from "../src/state.js";

function frame(idx: number): FrameOut {
  return { frameIndex: idx, width: 2, height: 2, pixels: new Uint8Array(12) };
}

describe("UiSessionState", () => {
  it("renders only monotonically increasing frame indices", () => {
    const st = new UiSessionState();
    expect(st.acceptFrame(frame(0), 0)).not.toBeNull();
    expect(st.acceptFrame(frame(1), 100)).not.toBeNull();
    expect(st.acceptFrame(frame(1), 200)).toBeNull(); // stale: equal index
    expect(st.acceptFrame(frame(0), 300)).toBeNull(); // stale: lower index
    expect(st.staleDropped).toBe(2);
    expect(st.lastFrameIndex).toBe(1);
    expect(st.acceptFrame(frame(5), 400)).not.toBeNull();
  });

  it("estimates fps from recent frames", () => {
    const st = new UiSessionState();
    for (let i = 0; i < 9; i++) st.acceptFrame(frame(i), i * 125);
    expect(st.fpsEstimate).toBeGreaterThan(7);
    expect(st.fpsEstimate).toBeLessThan(9);
  });

  it("coalesces controls latest-wins and resets after drain", () => {
    const st = new UiSessionState();
    st.setControl({ dx: 1, dy: 0, dzoom: 0, drot: 0 });
    st.setControl({ dx: -2, dy: 1, dzoom: 0, drot: 0 });
    const sent = st.drainControl();
    expect(sent.dx).toBe(-2); // the later control superseded the earlier
    expect(sent.dy).toBe(1);
    const next = st.drainControl();
    expect(next.dx).toBe(0); // no input -> zero-delta control
    expect(st.controlTrace.length).toBe(2);
  });

  it("keeps a bounded stats ring", () => {
    const st = new UiSessionState();
    for (let i = 0; i < 100; i++) st.acceptStats({ frameIndex: i, stepMs: 5, nfe: i });
    expect(st.statsRing.length).toBe(64);
    expect(st.lastStats()!.frameIndex).toBe(99);
  });
});
