"""Real-time interactive session service over a browser WebSocket.

Text messages are JSON objects with a "type" field; frames go out as binary
records (magic "AAPTFR1", u32 frame_index, u16 width, u16 height, raw RGB8
rows). Each connection hosts at most one session: a paced loop generates a
latent frame (one forward pass), streams its decoded pixel frames, and
emits a stats line. Controls coalesce latest-wins within a frame interval
and apply to the very next generated frame.
"""

from __future__ import annotations

import asyncio
import base64
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine, world

FRAME_MAGIC = b"AAPTFR1"


class ProtocolError(Exception):
    pass


def pack_frame(frame_index: int, rgb: np.ndarray) -> bytes:
    """rgb: [H, W, 3] uint8."""
    h, w = rgb.shape[:2]
    return FRAME_MAGIC + struct.pack("<IHH", frame_index, w, h) + rgb.tobytes()


def parse_frame(buf: bytes):
    if buf[: len(FRAME_MAGIC)] != FRAME_MAGIC:
        raise ProtocolError("bad frame magic")
    idx, w, h = struct.unpack_from("<IHH", buf, len(FRAME_MAGIC))
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=len(FRAME_MAGIC) + 8)
    if pixels.size != w * h * 3:
        raise ProtocolError("frame payload size mismatch")
    return idx, w, h, pixels.reshape(h, w, 3)


def to_rgb8(frame: np.ndarray) -> np.ndarray:
    """[3, H, W] float in [0,1] -> [H, W, 3] uint8."""
    return np.round(frame.clip(0.0, 1.0).transpose(1, 2, 0) * 255).astype(np.uint8)


@dataclass
class ServiceContext:
    backbone: object
    codec: object
    stats: world.ScaleStats
    frame_h: int
    frame_w: int
    temporal_factor: int
    target_fps: float = 4.0


@dataclass
class _SessionState:
    session: engine.GenSession
    decoder_state: object
    pending_control: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=np.float32))
    next_pixel_index: int = 0
    closed: bool = False
    pace_task: asyncio.Task | None = None


class SessionRegistry:
    """session_id -> state; one writer (its connection) per session."""

    def __init__(self):
        self._sessions: dict[int, _SessionState] = {}
        self._next_id = 1
        self._lock = asyncio.Lock()

    async def create(self, state: _SessionState) -> int:
        async with self._lock:
            sid = self._next_id
            self._next_id += 1
            self._sessions[sid] = state
            return sid

    async def drop(self, sid: int):
        async with self._lock:
            self._sessions.pop(sid, None)


async def _pace_loop(ws, st: _SessionState, ctx: ServiceContext):
    """Generate at most target_fps latent-frame groups per second; at most one
    undelivered frame in flight (sends are awaited)."""
    interval = 1.0 / ctx.target_fps
    try:
        while not st.closed:
            t0 = time.perf_counter()
            ctrl = st.pending_control
            st.pending_control = np.zeros(4, dtype=np.float32)
            chunk_ctrl = ctrl * ctx.temporal_factor  # per-pixel-frame delta, held for the chunk
            latent = engine.generate_next(st.session, chunk_ctrl)
            pixels, st.decoder_state = ctx.codec.decode_stream(latent, st.decoder_state)
            step_ms = (time.perf_counter() - t0) * 1e3
            for f in pixels:
                await ws.send(pack_frame(st.next_pixel_index, to_rgb8(f)))
                st.next_pixel_index += 1
            await ws.send(
                json.dumps(
                    {
                        "type": "stats",
                        "frame_index": st.next_pixel_index - 1,
                        "step_ms": round(step_ms, 3),
                        "nfe": st.session.nfe_counter,
                    }
                )
            )
            elapsed = time.perf_counter() - t0
            await asyncio.sleep(max(interval - elapsed, 0.0))
    except asyncio.CancelledError:
        pass


async def _send_error(ws, code: str, text: str):
    await ws.send(json.dumps({"type": "error", "code": code, "text": text}))


async def handle_connection(ws, ctx: ServiceContext, registry: SessionRegistry):
    st: _SessionState | None = None
    sid = None
    try:
        async for message in ws:
            if isinstance(message, bytes):
                await _send_error(ws, "bad_message", "binary messages flow server to client only")
                continue
            try:
                msg = json.loads(message)
            except json.JSONDecodeError:
                await _send_error(ws, "bad_json", "not a JSON object")
                continue
            kind = msg.get("type")

            if kind == "start_session":
                if st is not None:
                    await _send_error(ws, "session_exists", "one session per connection")
                    continue
                try:
                    first, prompt_id = _first_frame_from(msg, ctx)
                    session = engine.open_session(
                        first, prompt_id, ctx.backbone, ctx.codec, ctx.stats, seed=int(msg.get("seed", 0))
                    )
                except (ValueError, KeyError) as e:
                    await _send_error(ws, "bad_start", str(e))
                    continue
                dec = ctx.codec.open_decoder()
                st = _SessionState(session=session, decoder_state=dec)
                sid = await registry.create(st)
                await ws.send(
                    json.dumps(
                        {
                            "type": "session_started",
                            "session_id": sid,
                            "width": ctx.frame_w,
                            "height": ctx.frame_h,
                            "frames_per_step": ctx.temporal_factor,
                            "target_fps": ctx.target_fps,
                        }
                    )
                )
                z0 = ctx.codec.encode(first[None])[0]
                first_px, st.decoder_state = ctx.codec.decode_stream(z0, st.decoder_state)
                await ws.send(pack_frame(0, to_rgb8(first_px[0])))
                st.next_pixel_index = 1
                st.pace_task = asyncio.create_task(_pace_loop(ws, st, ctx))

            elif kind == "control":
                if st is None:
                    await _send_error(ws, "no_session", "control before start_session")
                elif st.closed:
                    await _send_error(ws, "closed", "session already ended")
                else:
                    st.pending_control = np.array(
                        [msg.get("dx", 0.0), msg.get("dy", 0.0), msg.get("dzoom", 0.0), msg.get("drot", 0.0)],
                        dtype=np.float32,
                    )

            elif kind == "end_session":
                if st is not None and not st.closed:
                    st.closed = True
                    if st.pace_task:
                        st.pace_task.cancel()
                    await ws.send(json.dumps({"type": "session_ended"}))
                else:
                    await _send_error(ws, "closed", "no open session")

            else:
                await _send_error(ws, "bad_type", f"unknown message type {kind!r}")
    finally:
        if st is not None:
            st.closed = True
            if st.pace_task:
                st.pace_task.cancel()
        if sid is not None:
            await registry.drop(sid)


def _first_frame_from(msg: dict, ctx: ServiceContext) -> tuple[np.ndarray, int]:
    if "image_b64" in msg:
        raw = base64.b64decode(msg["image_b64"])
        expect = ctx.frame_h * ctx.frame_w * 3
        if len(raw) != expect:
            raise ValueError(f"image payload must be {expect} RGB8 bytes")
        img = np.frombuffer(raw, dtype=np.uint8).reshape(ctx.frame_h, ctx.frame_w, 3)
        first = img.astype(np.float32).transpose(2, 0, 1) / 255.0
        prompt_id = int(msg.get("prompt_id", 0))
    else:
        seed = int(msg["seed"])
        first = world.quantize_pixels(
            world.render_world(seed, world.Trajectory(world.WorldState(seed), []), 1, ctx.frame_h, ctx.frame_w)[0]
        )
        prompt_id = int(msg.get("prompt_id", world.scene_class(seed)))
    return first.astype(np.float32), prompt_id


async def run_service(ctx: ServiceContext, port: int, host: str = "127.0.0.1", ready: asyncio.Event | None = None):
    import websockets

    registry = SessionRegistry()

    async def handler(ws):
        await handle_connection(ws, ctx, registry)

    async with websockets.serve(handler, host, port, max_size=16 * 1024 * 1024):
        if ready is not None:
            ready.set()
        await asyncio.Future()  # run until cancelled


def serve(ctx: ServiceContext, port: int, host: str = "127.0.0.1"):
    """Blocking entry point used by the CLI."""
    asyncio.run(run_service(ctx, port, host))
