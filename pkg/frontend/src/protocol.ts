/**
 * Wire protocol shared with the streaming service.
 *
 * Text messages are JSON with a "type" field. Frames arrive as binary:
 * magic "AAPTFR1", u32 frame_index (LE), u16 width, u16 height, RGB8 rows.
 */

export const FRAME_MAGIC = "AAPTFR1";
export const EPISODE_MAGIC = "AAPTEP1\0";

export interface FrameOut {
  frameIndex: number;
  width: number;
  height: number;
  /** RGB8, row-major, 3 bytes per pixel */
  pixels: Uint8Array;
}

export interface Control {
  dx: number;
  dy: number;
  dzoom: number;
  drot: number;
}

export interface Stats {
  frameIndex: number;
  stepMs: number;
  nfe: number;
}

export class ProtocolError extends Error {}

export function parseFrame(buf: ArrayBuffer): FrameOut {
  const bytes = new Uint8Array(buf);
  const magic = new TextDecoder().decode(bytes.subarray(0, FRAME_MAGIC.length));
  if (magic !== FRAME_MAGIC) {
    throw new ProtocolError(`bad frame magic ${JSON.stringify(magic)}`);
  }
  const view = new DataView(buf, FRAME_MAGIC.length);
  const frameIndex = view.getUint32(0, true);
  const width = view.getUint16(4, true);
  const height = view.getUint16(6, true);
  const pixels = bytes.subarray(FRAME_MAGIC.length + 8);
  if (pixels.length !== width * height * 3) {
    throw new ProtocolError(`payload ${pixels.length} bytes for ${width}x${height}`);
  }
  return { frameIndex, width, height, pixels };
}

/** Split a concatenated stream of FrameOut records (e.g. frames.bin). */
export function parseFrameStream(buf: ArrayBuffer): FrameOut[] {
  const out: FrameOut[] = [];
  let off = 0;
  const total = buf.byteLength;
  while (off < total) {
    const view = new DataView(buf, off + FRAME_MAGIC.length);
    const width = view.getUint16(4, true);
    const height = view.getUint16(6, true);
    const size = FRAME_MAGIC.length + 8 + width * height * 3;
    out.push(parseFrame(buf.slice(off, off + size)));
    off += size;
  }
  return out;
}

/** FNV-1a over pixel bytes; the fixture tests pin these values. */
export function pixelChecksum(pixels: Uint8Array): number {
  let h = 0x811c9dc5;
  for (let i = 0; i < pixels.length; i++) {
    h ^= pixels[i];
    h = Math.imul(h, 0x01000193) >>> 0;
  }
  return h >>> 0;
}

export function startSessionMessage(seed: number, promptId?: number): string {
  const msg: Record<string, unknown> = { type: "start_session", seed };
  if (promptId !== undefined) msg.prompt_id = promptId;
  return JSON.stringify(msg);
}

export function controlMessage(c: Control): string {
  return JSON.stringify({ type: "control", dx: c.dx, dy: c.dy, dzoom: c.dzoom, drot: c.drot });
}

export function endSessionMessage(): string {
  return JSON.stringify({ type: "end_session" });
}

/**
 * Export a recorded control trace as an episode file (controls stored, no
 * pixel payload), so a UI session replays as an evaluation input.
 */
export function encodeEpisode(seed: number, frames: number, controls: Control[], H: number, W: number): Uint8Array {
  if (controls.length !== frames - 1) {
    throw new ProtocolError(`${controls.length} controls for ${frames} frames`);
  }
  const headerSize = EPISODE_MAGIC.length + 16 + 8;
  const buf = new ArrayBuffer(headerSize + controls.length * 16 + 1);
  const bytes = new Uint8Array(buf);
  new TextEncoder().encodeInto(EPISODE_MAGIC, bytes);
  const view = new DataView(buf, EPISODE_MAGIC.length);
  view.setUint32(0, frames, true);
  view.setUint32(4, H, true);
  view.setUint32(8, W, true);
  view.setUint32(12, 4, true); // control_dim
  view.setBigUint64(16, BigInt(seed), true);
  let off = EPISODE_MAGIC.length + 24;
  const fv = new DataView(buf);
  for (const c of controls) {
    fv.setFloat32(off, c.dx, true);
    fv.setFloat32(off + 4, c.dy, true);
    fv.setFloat32(off + 8, c.dzoom, true);
    fv.setFloat32(off + 12, c.drot, true);
    off += 16;
  }
  bytes[off] = 0; // no pixel payload
  return bytes;
}
