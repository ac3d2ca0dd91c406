/**
 * Fixed keyboard map: arrows pan, +/- zoom, q/e rotate. Key state is
 * sampled once per frame interval so held keys repeat and taps coalesce.
 */

import { Control } from "./protocol.js";

export const PAN_STEP = 1.0; // px per pixel-frame
export const ZOOM_STEP = 0.01;
export const ROT_STEP = 0.02;

export class KeyboardControls {
  private down = new Set<string>();

  attach(target: { addEventListener: Function }) {
    target.addEventListener("keydown", (e: KeyboardEvent) => {
      if (this.handles(e.key)) {
        this.down.add(e.key);
        e.preventDefault?.();
      }
    });
    target.addEventListener("keyup", (e: KeyboardEvent) => this.down.delete(e.key));
  }

  handles(key: string): boolean {
    return ["ArrowLeft", "ArrowRight", "ArrowUp", "ArrowDown", "+", "=", "-", "q", "e"].includes(key);
  }

  press(key: string) {
    this.down.add(key);
  }

  release(key: string) {
    this.down.delete(key);
  }

  /** Current control sample; camera-space deltas per pixel frame. */
  sample(): Control {
    const c: Control = { dx: 0, dy: 0, dzoom: 0, drot: 0 };
    if (this.down.has("ArrowRight")) c.dx += PAN_STEP;
    if (this.down.has("ArrowLeft")) c.dx -= PAN_STEP;
    if (this.down.has("ArrowDown")) c.dy += PAN_STEP;
    if (this.down.has("ArrowUp")) c.dy -= PAN_STEP;
    if (this.down.has("+") || this.down.has("=")) c.dzoom += ZOOM_STEP;
    if (this.down.has("-")) c.dzoom -= ZOOM_STEP;
    if (this.down.has("q")) c.drot -= ROT_STEP;
    if (this.down.has("e")) c.drot += ROT_STEP;
    return c;
  }
}
