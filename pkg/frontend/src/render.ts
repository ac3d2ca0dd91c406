/** Canvas blitting: pixel-exact nearest-neighbor upscale plus the HUD. */

import { FrameOut, Stats } from "./protocol.js";

export const UPSCALE = 8;

export function rgbToImageData(frame: FrameOut): ImageData {
  const rgba = new Uint8ClampedArray(frame.width * frame.height * 4);
  const px = frame.pixels;
  for (let i = 0, j = 0; i < px.length; i += 3, j += 4) {
    rgba[j] = px[i];
    rgba[j + 1] = px[i + 1];
    rgba[j + 2] = px[i + 2];
    rgba[j + 3] = 255;
  }
  return new ImageData(rgba, frame.width, frame.height);
}

export class FrameRenderer {
  private staging: HTMLCanvasElement;

  constructor(private canvas: HTMLCanvasElement) {
    this.staging = document.createElement("canvas");
  }

  render(frame: FrameOut) {
    this.staging.width = frame.width;
    this.staging.height = frame.height;
    const sctx = this.staging.getContext("2d")!;
    sctx.putImageData(rgbToImageData(frame), 0, 0);

    this.canvas.width = frame.width * UPSCALE;
    this.canvas.height = frame.height * UPSCALE;
    const ctx = this.canvas.getContext("2d")!;
    ctx.imageSmoothingEnabled = false; // nearest-neighbor, no smoothing
    ctx.drawImage(this.staging, 0, 0, this.canvas.width, this.canvas.height);
  }
}

export function hudText(frameIndex: number, fps: number, stats: Stats | null, dropped: number): string {
  const stepMs = stats ? stats.stepMs.toFixed(1) : "-";
  const nfe = stats ? String(stats.nfe) : "-";
  return `frame ${frameIndex}  fps ${fps.toFixed(1)}  step ${stepMs} ms  nfe ${nfe}  dropped ${dropped}`;
}
