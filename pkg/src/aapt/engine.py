"""Streaming autoregressive generation: session lifecycle, KV eviction,
NFE accounting, cost model, latency bench.

Cache residency bookkeeping: block label p holds the tokens computed while
generating frame p+1 (their recycled input is frame p). A pending block is
created the moment its recycled frame exists - at open_session for block 0,
after each generation for block p - and its K/V are filled by the next
forward step. Eviction runs after the step that overflows, dropping the
oldest non-pinned block; the prompt and block 0 are never evicted.

Sessions are batched internally (seeds per element); inference uses B=1.
Training rollouts call the same step() so a generated stream is bit-equal
to inference given the same seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, CacheTensors, FrameInput
from .tensor import Tensor
from .world import ControlSignal, ScaleStats


def noise_for(seed: int, frame_index: int, shape) -> np.ndarray:
    """Fresh per-step noise, reproducible per (session seed, frame index)."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFF, int(frame_index)])
    return rng.standard_normal(shape).astype(np.float32)


def normalize_control(raw, stats: ScaleStats) -> np.ndarray:
    arr = raw.as_array() if isinstance(raw, ControlSignal) else np.asarray(raw, dtype=np.float32)
    return (arr / stats.std).astype(np.float32)


class SessionCache:
    """Engine-side view over the backbone's CacheTensors: which blocks are
    resident, which are pinned, what can be evicted."""

    def __init__(self, tensors: CacheTensors, window_N: int, prompt_tokens: int, tokens_per_frame: int):
        self.tensors = tensors
        self.window_N = window_N
        self.prompt_tokens = prompt_tokens
        self.tokens_per_frame = tokens_per_frame
        self.filled: list[int] = []  # block labels with K/V in `tensors`, in token order
        self.pending: int | None = None  # block whose recycled frame is staged

    @property
    def resident_frames(self) -> list[int]:
        out = list(self.filled)
        if self.pending is not None:
            out.append(self.pending)
        return out

    def non_pinned(self) -> list[int]:
        return [b for b in self.resident_frames if b != 0]

    def mark_filled(self, label: int) -> None:
        assert self.pending == label
        self.filled.append(label)
        self.pending = None

    def evict(self) -> None:
        """Drop oldest non-pinned blocks until |resident \\ pinned| <= window_N."""
        while len(self.non_pinned()) > self.window_N:
            victim = next(b for b in self.filled if b != 0)
            idx = self.filled.index(victim)
            start = self.prompt_tokens + idx * self.tokens_per_frame
            self.tensors.drop_span(start, start + self.tokens_per_frame)
            self.filled.pop(idx)

    def detach(self) -> None:
        self.tensors = self.tensors.detach()

    def logical_bytes(self) -> int:
        total = 0
        for lkv in self.tensors.layers:
            total += lkv.k.data.nbytes + lkv.v.data.nbytes
        return total


@dataclass
class GenSession:
    backbone: Backbone
    cache: SessionCache
    last_frame: object  # [B, C, h, w]: np.ndarray at inference, Tensor during rollouts
    stats: ScaleStats
    seeds: list[int]
    prompt_ids: np.ndarray
    frame_counter: int = 0
    nfe_counter: int = 0
    ablate_recycle: bool = False  # zero the recycled channel (keeps user frame 0)

    @property
    def batch(self) -> int:
        return len(self.seeds)

    def check_counters(self):
        assert self.nfe_counter == self.frame_counter, "one forward per generated frame"


def open_session_latents(
    z0: np.ndarray,
    prompt_ids: np.ndarray,
    backbone: Backbone,
    stats: ScaleStats,
    seeds: list[int],
    ablate_recycle: bool = False,
) -> GenSession:
    """Batched session over first-frame latents [B, C, h, w]."""
    cfg = backbone.cfg
    z0 = np.asarray(z0, dtype=np.float32)
    if z0.shape[1:] != (cfg.latent_channels, cfg.latent_h, cfg.latent_w):
        raise ValueError(f"bad first-latent shape {z0.shape}")
    prompt_ids = np.asarray(prompt_ids)
    t = np.full(z0.shape[0], cfg.inference_timestep, dtype=np.float32)
    with T.no_grad():
        tensors = backbone.open_cache(prompt_ids, t)
    cache = SessionCache(tensors, cfg.window_N, cfg.prompt_tokens, cfg.tokens_per_frame)
    cache.pending = 0
    return GenSession(
        backbone=backbone,
        cache=cache,
        last_frame=z0,
        stats=stats,
        seeds=[int(s) for s in seeds],
        prompt_ids=prompt_ids,
        ablate_recycle=ablate_recycle,
    )


def open_session(
    first_frame,
    prompt_id: int,
    backbone: Backbone,
    codec,
    stats: ScaleStats,
    seed: int = 0,
    ablate_recycle: bool = False,
) -> GenSession:
    """Single inference session; first_frame is [3, H, W] pixels (encoded via
    the codec) or [C, h, w] latents."""
    cfg = backbone.cfg
    first_frame = np.asarray(first_frame, dtype=np.float32)
    if first_frame.ndim != 3:
        raise ValueError(f"first frame must be 3-dimensional, got {first_frame.shape}")
    if first_frame.shape[0] == 3 and first_frame.shape != (cfg.latent_channels, cfg.latent_h, cfg.latent_w):
        z0 = codec.encode(first_frame[None])[0]
    elif first_frame.shape == (cfg.latent_channels, cfg.latent_h, cfg.latent_w):
        z0 = first_frame
    else:
        raise ValueError(f"first frame shape {first_frame.shape} matches neither pixels nor latents")
    return open_session_latents(z0[None], np.array([prompt_id]), backbone, stats, [seed], ablate_recycle)


def step(session: GenSession, ctrl, record_graph: bool = False, detach_recycled: bool = True):
    """One autoregressive step: fill the pending block, emit the next frames.

    ctrl is the per-latent-step camera delta (raw units), [4] or [B, 4].
    With record_graph the output is a graph Tensor (KV-cache path
    differentiable, recycled input detached per flag); otherwise a plain
    array. Values are bit-identical either way given the same seeds.
    """
    cfg = session.backbone.cfg
    B = session.batch
    p = session.cache.pending
    shape = (1, cfg.latent_channels, cfg.latent_h, cfg.latent_w)
    noise = np.concatenate([noise_for(s, p, shape) for s in session.seeds], axis=0)
    ctrl_n = normalize_control(ctrl, session.stats)
    if ctrl_n.ndim == 1:
        ctrl_n = np.broadcast_to(ctrl_n, (B, 4))

    prev = session.last_frame
    if isinstance(prev, Tensor):
        rec = prev.detach() if detach_recycled else prev
    else:
        rec = Tensor(prev)
    if session.ablate_recycle and p > 0:
        rec = rec * 0.0

    t_arr = np.full(B, cfg.inference_timestep, dtype=np.float32)
    fi = FrameInput(noisy=Tensor(noise), recycled=rec, control=ctrl_n, timestep=t_arr)

    def run():
        v_hat, _ = session.backbone.forward_step(session.cache.tensors, [fi], start_position=p)
        return Tensor(noise) - v_hat[:, 0] * cfg.inference_timestep

    if record_graph:
        x0 = run()
    else:
        with T.no_grad():
            x0 = run()

    session.cache.mark_filled(p)
    session.cache.pending = p + 1
    session.cache.evict()
    session.nfe_counter += 1
    session.frame_counter += 1
    out = x0 if record_graph else x0.data
    session.last_frame = out
    return out


def generate_next(session: GenSession, ctrl) -> np.ndarray:
    """Inference path (B=1): fresh noise, one forward, recycle, evict."""
    assert session.batch == 1
    return step(session, ctrl, record_graph=False)[0]


def generate_clip(session: GenSession, controls) -> np.ndarray:
    """[K, C, h, w] latents for a [K, 4] raw control sequence."""
    return np.stack([generate_next(session, c) for c in controls])


# -- cost model ------------------------------------------------------------------


def cost_model(scheme: str, steps: int, tokens_per_frame: int) -> dict:
    """Idealized new-frame tokens computed per step (prompt/window constants
    excluded). Recycling processes one frame per step; one-step diffusion
    forcing needs two."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    per_step = {"recycle": tokens_per_frame, "diffusion_forcing": 2 * tokens_per_frame}[scheme]
    return {"per_step": per_step, "total": per_step * steps}


def measured_step_cost(backbone: Backbone, codec, stats: ScaleStats, warm_frames: int = 4):
    """Instrumented per-step cost of one new block vs an emulated
    diffusion-forcing step (two blocks), on a warmed-up cache. Returns
    (tokens_1, tokens_2, flops_1, flops_2)."""
    cfg = backbone.cfg

    def warm_session():
        z0 = np.zeros((cfg.latent_channels, cfg.latent_h, cfg.latent_w), dtype=np.float32)
        s = open_session(z0, 0, backbone, codec, stats, seed=1)
        for _ in range(warm_frames):
            generate_next(s, np.zeros(4, dtype=np.float32))
        return s

    def probe(n_blocks: int):
        s = warm_session()
        p = s.cache.pending
        fis = []
        for i in range(n_blocks):
            noise = noise_for(s.seeds[0], p + i, (1, cfg.latent_channels, cfg.latent_h, cfg.latent_w))
            fis.append(
                FrameInput(
                    noisy=Tensor(noise),
                    recycled=Tensor(np.asarray(s.last_frame)),
                    control=np.zeros((1, 4), dtype=np.float32),
                    timestep=np.array([cfg.inference_timestep], dtype=np.float32),
                )
            )
        T.reset_flops()
        with T.no_grad():
            backbone.forward_step(s.cache.tensors, fis, start_position=p)
        return backbone.last_new_tokens, T.flops()

    tok1, fl1 = probe(1)
    tok2, fl2 = probe(2)
    return tok1, tok2, fl1, fl2


# -- bench -----------------------------------------------------------------------


def bench(session: GenSession, steps: int) -> dict:
    """Latency/memory report; warm-up split at frame window_N."""
    N = session.cache.window_N
    if steps <= N:
        raise ValueError("steps must exceed window_N for a steady-state bench")
    lat_ms = []
    mem = []
    for _ in range(steps):
        t0 = time.perf_counter()
        generate_next(session, np.zeros(4, dtype=np.float32))
        lat_ms.append((time.perf_counter() - t0) * 1e3)
        mem.append(session.cache.logical_bytes())
    steady = lat_ms[N:]
    report = {
        "steps": steps,
        "warmup_frames": N,
        "warmup_mean_ms": float(np.mean(lat_ms[:N])),
        "steady_min_ms": float(np.min(steady)),
        "steady_mean_ms": float(np.mean(steady)),
        "steady_p99_ms": float(np.percentile(steady, 99)),
        "steady_cache_bytes": int(mem[-1]),
        "nfe": session.nfe_counter,
        "frames": session.frame_counter,
    }
    return report


def format_report(report: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in report.items())
