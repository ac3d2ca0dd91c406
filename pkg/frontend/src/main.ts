/** Browser entry: wires socket, canvas, keyboard, HUD, and trace export. */

import { SessionClient } from "./client.js";
import { KeyboardControls } from "./input.js";
import { encodeEpisode } from "./protocol.js";
import { FrameRenderer, hudText } from "./render.js";

function el<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

function main() {
  const canvas = el<HTMLCanvasElement>("view");
  const hud = el<HTMLDivElement>("hud");
  const banner = el<HTMLDivElement>("banner");
  const seedInput = el<HTMLInputElement>("seed");
  const renderer = new FrameRenderer(canvas);
  const keys = new KeyboardControls();
  keys.attach(window as any);

  let client: SessionClient | null = null;
  let frameH = 32;
  let frameW = 32;

  el<HTMLButtonElement>("connect").onclick = () => {
    const url = el<HTMLInputElement>("url").value;
    banner.textContent = "";
    banner.className = "";
    const ws = new WebSocket(url);
    client = new SessionClient(ws as any, {
      onStarted: (info) => {
        frameH = info.height;
        frameW = info.width;
        banner.textContent = `session live (${info.width}x${info.height}, ${info.framesPerStep} frames/step)`;
      },
      onFrame: (frame) => {
        renderer.render(frame);
        const st = client!.state;
        hud.textContent = hudText(st.lastFrameIndex, st.fpsEstimate, st.lastStats(), st.staleDropped);
      },
      onError: (code, text) => {
        banner.textContent = `error ${code}: ${text}`;
        banner.className = "error";
      },
      onClosed: () => {
        banner.textContent = "disconnected - canvas frozen on last frame";
        banner.className = "error";
      },
    });
    ws.addEventListener("open", () => client!.start(parseInt(seedInput.value || "0", 10)));
    ws.addEventListener("error", () => {
      banner.textContent = "connection refused";
      banner.className = "error";
    });

    // sample held keys once per frame interval; latest state wins
    setInterval(() => client?.setControl(keys.sample()), 100);
  };

  el<HTMLButtonElement>("end").onclick = () => client?.end();

  el<HTMLButtonElement>("export").onclick = () => {
    if (!client) return;
    const trace = client.state.controlTrace;
    const seed = parseInt(seedInput.value || "0", 10);
    // per-latent-step controls held constant across each pixel frame
    const bin = encodeEpisode(seed, trace.length + 1, trace, frameH, frameW);
    const blob = new Blob([bin.buffer as ArrayBuffer], { type: "application/octet-stream" });
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = `trace-seed${seed}.bin`;
    a.click();
  };
}

window.addEventListener("DOMContentLoaded", main);
