"""Block-causal diffusion transformer shared by generator and discriminator.

Token layout is [prompt tokens | frame block 0 | frame block 1 | ...], one
token per latent pixel. Prompt tokens attend only to themselves; tokens of
frame block i attend to the prompt, frame block 0, and at most window_N
blocks ending at i (block 0 is pinned on top of the window). Each block's
input channels are the noisy/sampled latent, the recycled previous frame,
and the camera-control plane, concatenated per token.

Rotary embeddings use a fixed per-frame interval on the temporal axis (a
frame's phase never depends on sequence length) and grid-normalized spatial
positions.

The same math runs in two modes: forward_parallel over a whole clip with a
mask, and forward_step over one new block attending a KV cache. The engine
keeps the cache residency equal to the mask's visible set, so step replay
matches the parallel pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Linear, sinusoidal_embedding
from .tensor import DTYPE, Tensor

NEG_INF = -1e9


@dataclass
class BackboneConfig:
    model_dim: int = 128
    layers: int = 4
    heads: int = 4
    prompt_tokens: int = 4
    num_prompt_classes: int = 4
    latent_channels: int = 8
    latent_h: int = 8
    latent_w: int = 8
    control_dim: int = 4
    window_N: int = 8
    temporal_rope_interval: float = 1.0
    mlp_ratio: int = 4
    inference_timestep: float = 1.0  # pure-noise endpoint fed to the one-step generator
    patch_px: int = 4  # pixels per latent cell; scales the displacement channels
    control_std: tuple = (1.0, 1.0, 1.0, 1.0)  # denormalization for geometry channels

    def __post_init__(self):
        if self.window_N < 1:
            raise ValueError("window_N must be >= 1")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must divide evenly into heads")

    @property
    def tokens_per_frame(self) -> int:
        return self.latent_h * self.latent_w

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def input_channels(self) -> dict[str, int]:
        return {
            "noise_or_frame": self.latent_channels,
            "recycled": self.latent_channels,
            "control": self.control_dim,
        }


@dataclass
class Span:
    kind: str  # prompt | frame
    frame_index: int
    start: int
    stop: int


@dataclass
class TokenLayout:
    spans: list[Span]

    def __post_init__(self):
        if not self.spans or self.spans[0].kind != "prompt":
            raise ValueError("layout must start with the prompt span")
        pos = 0
        last_frame = -1
        for s in self.spans:
            if s.start != pos:
                raise ValueError("spans must partition the sequence")
            pos = s.stop
            if s.kind == "frame":
                if s.frame_index != last_frame + 1:
                    raise ValueError("frame spans must be consecutive")
                last_frame = s.frame_index
        self.total = pos

    @property
    def n_frames(self) -> int:
        return sum(1 for s in self.spans if s.kind == "frame")


def build_layout(cfg: BackboneConfig, n_frames: int) -> TokenLayout:
    spans = [Span("prompt", -1, 0, cfg.prompt_tokens)]
    pos = cfg.prompt_tokens
    for i in range(n_frames):
        spans.append(Span("frame", i, pos, pos + cfg.tokens_per_frame))
        pos += cfg.tokens_per_frame
    return TokenLayout(spans)


def build_mask(layout: TokenLayout, window_N: int) -> np.ndarray:
    """[S, S] boolean; True = may attend. Pure function of its arguments."""
    S = layout.total
    mask = np.zeros((S, S), dtype=bool)
    prompt = layout.spans[0]
    mask[prompt.start : prompt.stop, prompt.start : prompt.stop] = True
    frames = [s for s in layout.spans if s.kind == "frame"]
    for q in frames:
        i = q.frame_index
        rows = slice(q.start, q.stop)
        mask[rows, prompt.start : prompt.stop] = True
        lo = max(1, i - window_N + 1) if i > 0 else 0
        for kspan in frames:
            j = kspan.frame_index
            if j == 0 or lo <= j <= i:
                mask[rows, kspan.start : kspan.stop] = True
    return mask


def _rope_freqs(n: int, base: float = 10000.0) -> np.ndarray:
    return (base ** (-np.arange(n) / max(n, 1))).astype(np.float64)


def rope_angles(cfg: BackboneConfig, t_index: int, spatial_index: tuple[int, int]) -> np.ndarray:
    """Rotation phases [head_dim/2] for one token.

    Temporal phase grows by exactly temporal_rope_interval per frame with no
    renormalization by sequence length; spatial positions are normalized by
    the grid so the embedding stretches with resolution.
    """
    pairs = cfg.head_dim // 2
    tp = pairs // 2
    hp = (pairs - tp) // 2
    wp = pairs - tp - hp
    i, j = spatial_index
    t_pos = t_index * cfg.temporal_rope_interval
    h_pos = 8.0 * i / cfg.latent_h
    w_pos = 8.0 * j / cfg.latent_w
    return np.concatenate(
        [t_pos * _rope_freqs(tp), h_pos * _rope_freqs(hp), w_pos * _rope_freqs(wp)]
    )


def rope_phases_block(cfg: BackboneConfig, frame_index: int) -> np.ndarray:
    """Phases [tokens_per_frame, head_dim/2] for one frame block."""
    out = np.empty((cfg.tokens_per_frame, cfg.head_dim // 2), dtype=np.float64)
    for i in range(cfg.latent_h):
        for j in range(cfg.latent_w):
            out[i * cfg.latent_w + j] = rope_angles(cfg, frame_index, (i, j))
    return out


def rope_phases_layout(cfg: BackboneConfig, layout: TokenLayout) -> np.ndarray:
    parts = [np.zeros((cfg.prompt_tokens, cfg.head_dim // 2))]
    for s in layout.spans[1:]:
        parts.append(rope_phases_block(cfg, s.frame_index))
    return np.concatenate(parts, axis=0)


def _rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    return T.concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


@dataclass
class FrameInput:
    noisy: np.ndarray | Tensor  # [B, C, h, w] noise (generator) or clean frame (discriminator)
    recycled: np.ndarray | Tensor  # [B, C, h, w] previous frame, user frame at step 0
    control: np.ndarray  # [B, control_dim]
    timestep: np.ndarray  # [B]


class LayerKV:
    __slots__ = ("k", "v")

    def __init__(self, k: Tensor, v: Tensor):
        self.k = k
        self.v = v


class CacheTensors:
    """Per-layer K/V streams plus the token count; residency bookkeeping
    lives in the engine's SessionCache."""

    def __init__(self, layers: list[LayerKV], tokens: int):
        self.layers = layers
        self.tokens = tokens

    def detach(self) -> "CacheTensors":
        return CacheTensors(
            [LayerKV(lkv.k.detach(), lkv.v.detach()) for lkv in self.layers], self.tokens
        )

    def drop_span(self, start: int, stop: int) -> None:
        for lkv in self.layers:
            lkv.k = T.concat([lkv.k[:, :, :start], lkv.k[:, :, stop:]], axis=2)
            lkv.v = T.concat([lkv.v[:, :, :start], lkv.v[:, :, stop:]], axis=2)
        self.tokens -= stop - start


class _Block:
    def __init__(self, rng, cfg: BackboneConfig):
        D = cfg.model_dim
        self.qkv = Linear(rng, D, 3 * D)
        self.attn_out = Linear(rng, D, D)
        self.fc1 = Linear(rng, D, cfg.mlp_ratio * D)
        self.fc2 = Linear(rng, cfg.mlp_ratio * D, D)
        self.mod = Linear(rng, D, 6 * D, scale=0.0)  # adaLN-zero start
        self._ln_g = Tensor(np.ones(D, dtype=DTYPE))
        self._ln_b = Tensor(np.zeros(D, dtype=DTYPE))

    def params(self, p):
        out = {}
        out.update(self.qkv.params(f"{p}.qkv"))
        out.update(self.attn_out.params(f"{p}.attn_out"))
        out.update(self.fc1.params(f"{p}.fc1"))
        out.update(self.fc2.params(f"{p}.fc2"))
        out.update(self.mod.params(f"{p}.mod"))
        return out

    def _ln(self, x):
        return T.layer_norm(x, self._ln_g, self._ln_b)


class Backbone:
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xBB])
        D = cfg.model_dim
        in_ch = 2 * cfg.latent_channels + cfg.control_dim
        # random init everywhere, including the control/recycled channels:
        # zero-init projections adapt too slowly to the new inputs
        self.in_proj = Linear(rng, in_ch, D)
        self.prompt_table = Tensor.param(
            (rng.standard_normal((cfg.num_prompt_classes, cfg.prompt_tokens, D)) * 0.02).astype(DTYPE)
        )
        self.t_fc1 = Linear(rng, D, D)
        self.t_fc2 = Linear(rng, D, D)
        self.blocks = [_Block(rng, cfg) for _ in range(cfg.layers)]
        self.final_mod = Linear(rng, D, 2 * D, scale=0.0)
        self.head = Linear(rng, D, cfg.latent_channels, scale=0.02)
        self._ln_g = Tensor(np.ones(D, dtype=DTYPE))
        self._ln_b = Tensor(np.zeros(D, dtype=DTYPE))
        # instrumentation: forward passes and new tokens computed
        self.step_count = 0
        self.last_new_tokens = 0

    def params(self) -> dict[str, Tensor]:
        out = {"prompt_table": self.prompt_table}
        out.update(self.in_proj.params("in_proj"))
        out.update(self.t_fc1.params("t_fc1"))
        out.update(self.t_fc2.params("t_fc2"))
        for i, b in enumerate(self.blocks):
            out.update(b.params(f"block{i}"))
        out.update(self.final_mod.params("final_mod"))
        out.update(self.head.params("head"))
        return out

    # -- shared pieces ---------------------------------------------------------

    def _t_embedding(self, t: np.ndarray) -> Tensor:
        emb = sinusoidal_embedding(np.asarray(t, dtype=np.float64) * 1000.0, self.cfg.model_dim)
        return self.t_fc2(T.silu(self.t_fc1(Tensor(emb))))

    def control_plane(self, ctrl_norm: np.ndarray) -> np.ndarray:
        """[B, 4] normalized deltas -> [B, control_dim, h, w] token plane.

        control_dim 4 broadcasts the deltas. control_dim 6 appends the
        content-displacement field the camera delta induces at each token
        (latent-cell units) - the desk analog of per-pixel camera ray maps:
        translation displaces uniformly, zoom and rotation proportionally to
        the token's offset from the image center."""
        cfg = self.cfg
        ctrl_norm = np.asarray(ctrl_norm, dtype=np.float32)
        B = ctrl_norm.shape[0]
        base = np.broadcast_to(ctrl_norm[:, :, None, None], (B, 4, cfg.latent_h, cfg.latent_w))
        if cfg.control_dim == 4:
            return np.ascontiguousarray(base)
        if cfg.control_dim != 6:
            raise ValueError(f"control_dim must be 4 or 6, got {cfg.control_dim}")
        std = np.asarray(cfg.control_std, dtype=np.float32)
        raw = ctrl_norm * std[None, :]
        ccx = np.arange(cfg.latent_w, dtype=np.float32) + 0.5 - cfg.latent_w / 2
        ccy = np.arange(cfg.latent_h, dtype=np.float32) + 0.5 - cfg.latent_h / 2
        gx, gy = np.meshgrid(ccx, ccy)
        dx = raw[:, 0, None, None]
        dy = raw[:, 1, None, None]
        dzoom = raw[:, 2, None, None]
        drot = raw[:, 3, None, None]
        disp_x = -dx / cfg.patch_px + dzoom * gx + drot * gy
        disp_y = -dy / cfg.patch_px + dzoom * gy - drot * gx
        return np.ascontiguousarray(
            np.concatenate([base, disp_x[:, None], disp_y[:, None]], axis=1).astype(np.float32)
        )

    def _frame_tokens(self, fis: list[FrameInput]) -> Tensor:
        """[B, n*tokens_per_frame, D] input projection of frame blocks."""
        cfg = self.cfg
        planes = []
        for fi in fis:
            noisy = fi.noisy if isinstance(fi.noisy, Tensor) else Tensor(fi.noisy)
            rec = fi.recycled if isinstance(fi.recycled, Tensor) else Tensor(fi.recycled)
            B = noisy.shape[0]
            ctrl = np.asarray(fi.control, dtype=DTYPE)
            if ctrl.ndim == 2:
                ctrl = self.control_plane(ctrl)
            x = T.concat([noisy, rec, Tensor(np.ascontiguousarray(ctrl))], axis=1)
            x = x.transpose((0, 2, 3, 1)).reshape((B, cfg.tokens_per_frame, 2 * cfg.latent_channels + cfg.control_dim))
            planes.append(x)
        return self.in_proj(T.concat(planes, axis=1) if len(planes) > 1 else planes[0])

    def _modulate(self, x, shift, scale):
        return x * (scale + 1.0) + shift

    def _attend(self, blk: _Block, x, t_vec, phases, mask, cache_layer: LayerKV | None):
        cfg = self.cfg
        B, S, D = x.shape
        H, hd = cfg.heads, cfg.head_dim
        m = blk.mod(T.silu(t_vec)).reshape((B, 1, 6 * D))
        sh1, sc1, g1 = m[:, :, :D], m[:, :, D : 2 * D], m[:, :, 2 * D : 3 * D]
        sh2, sc2, g2 = m[:, :, 3 * D : 4 * D], m[:, :, 4 * D : 5 * D], m[:, :, 5 * D :]

        h = self._modulate(blk._ln(x), sh1, sc1)
        qkv = blk.qkv(h).reshape((B, S, 3, H, hd)).transpose((2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        cos = np.cos(phases).astype(DTYPE)[None, None]
        sin = np.sin(phases).astype(DTYPE)[None, None]
        q = _rotate(q, cos, sin)
        k = _rotate(k, cos, sin)
        if cache_layer is not None:
            k_full = T.concat([cache_layer.k, k], axis=2)
            v_full = T.concat([cache_layer.v, v], axis=2)
            cache_layer.k, cache_layer.v = k_full, v_full
        else:
            k_full, v_full = k, v
        scores = T.matmul(q, k_full.transpose((0, 1, 3, 2))) * DTYPE(1.0 / np.sqrt(hd))
        if mask is not None:
            scores = T.where(mask[None, None], scores, Tensor(np.float32(NEG_INF)))
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v_full).transpose((0, 2, 1, 3)).reshape((B, S, D))
        x = x + g1 * blk.attn_out(out)

        h2 = self._modulate(blk._ln(x), sh2, sc2)
        x = x + g2 * blk.fc2(T.silu(blk.fc1(h2)))
        return x

    def _head_out(self, x_frames, t_vec):
        B, n_tok, D = x_frames.shape
        m = self.final_mod(T.silu(t_vec)).reshape((B, 1, 2 * D))
        h = self._modulate(T.layer_norm(x_frames, self._ln_g, self._ln_b), m[:, :, :D], m[:, :, D:])
        return self.head(h)

    def _to_grid(self, out, B, n):
        cfg = self.cfg
        out = out.reshape((B, n, cfg.latent_h, cfg.latent_w, cfg.latent_channels))
        return out.transpose((0, 1, 4, 2, 3))

    # -- parallel (training) path ------------------------------------------------

    def forward_parallel(
        self,
        fis: list[FrameInput],
        prompt_ids: np.ndarray,
        window_N: int | None = None,
        mask: np.ndarray | None = None,
        positions: list[int] | None = None,
    ):
        """All frame blocks in one masked pass.

        Diffusion-mode contract: every FrameInput carries the same timestep
        (one noise level per clip). `mask`/`positions` override the standard
        layout (the teacher-forcing discriminator shares real-block context
        between probe blocks at equal temporal positions). Returns (frame
        outputs [B,T,C,h,w], per-frame pooled features [B,T,D]).
        """
        cfg = self.cfg
        t0 = np.asarray(fis[0].timestep, dtype=np.float64)
        for fi in fis[1:]:
            if not np.array_equal(np.asarray(fi.timestep, dtype=np.float64), t0):
                raise ValueError("mixed timesteps within one clip")
        n = len(fis)
        B = (fis[0].noisy if isinstance(fis[0].noisy, Tensor) else np.asarray(fis[0].noisy)).shape[0]
        layout = build_layout(cfg, n)
        if mask is None:
            mask = build_mask(layout, window_N if window_N is not None else cfg.window_N)
        if positions is None:
            phases = rope_phases_layout(cfg, layout)
        else:
            phases = np.concatenate(
                [np.zeros((cfg.prompt_tokens, cfg.head_dim // 2))]
                + [rope_phases_block(cfg, p) for p in positions],
                axis=0,
            )
        t_vec = self._t_embedding(t0)

        prompt = T.embedding(self.prompt_table, np.asarray(prompt_ids))
        frames = self._frame_tokens(fis)
        x = T.concat([prompt, frames], axis=1)
        for blk in self.blocks:
            x = self._attend(blk, x, t_vec, phases, mask, None)
        xf = x[:, cfg.prompt_tokens :]
        out = self._head_out(xf, t_vec)
        pooled = x[:, cfg.prompt_tokens :].reshape((B, n, cfg.tokens_per_frame, cfg.model_dim)).mean(axis=2)
        self.step_count += 1
        self.last_new_tokens = layout.total
        return self._to_grid(out, B, n), pooled

    # -- incremental (streaming) path ---------------------------------------------

    def open_cache(self, prompt_ids: np.ndarray, timestep: np.ndarray) -> CacheTensors:
        """Run the prompt tokens once; they attend only to themselves, so
        their K/V never change afterward."""
        cfg = self.cfg
        t_vec = self._t_embedding(timestep)
        x = T.embedding(self.prompt_table, np.asarray(prompt_ids))
        phases = np.zeros((cfg.prompt_tokens, cfg.head_dim // 2))
        layers = []
        cache = CacheTensors([], 0)
        for blk in self.blocks:
            lkv = LayerKV(None, None)  # filled by _attend via concat path below
            B = x.shape[0]
            # self-attention over prompt tokens only
            empty_k = Tensor(np.zeros((B, cfg.heads, 0, cfg.head_dim), dtype=DTYPE))
            lkv.k, lkv.v = empty_k, Tensor(np.zeros((B, cfg.heads, 0, cfg.head_dim), dtype=DTYPE))
            x = self._attend(blk, x, t_vec, phases, None, lkv)
            layers.append(lkv)
        cache.layers = layers
        cache.tokens = cfg.prompt_tokens
        return cache

    def forward_step(self, cache: CacheTensors, fis: list[FrameInput], start_position: int):
        """One incremental pass over `len(fis)` new frame blocks attending the
        cache; appends their K/V. Exactly one transformer forward."""
        cfg = self.cfg
        n = len(fis)
        t_vec = self._t_embedding(np.asarray(fis[0].timestep, dtype=np.float64))
        phases = np.concatenate(
            [rope_phases_block(cfg, start_position + i) for i in range(n)], axis=0
        )
        x = self._frame_tokens(fis)
        B = x.shape[0]
        for blk, lkv in zip(self.blocks, cache.layers):
            x = self._attend(blk, x, t_vec, phases, None, lkv)
        cache.tokens += n * cfg.tokens_per_frame
        out = self._head_out(x, t_vec)
        pooled = x.reshape((B, n, cfg.tokens_per_frame, cfg.model_dim)).mean(axis=2)
        self.step_count += 1
        self.last_new_tokens = n * cfg.tokens_per_frame
        return self._to_grid(out, B, n), pooled
