"""Tiny causal video autoencoder with streaming decode.

Pixel frames are grouped [f0 | f1..f4 | f5..f8 | ...]: frame 0 is encoded
on its own, every later latent frame covers `temporal_factor` pixel frames
and may look back one pixel frame for temporal context. Decoding a chunk
needs only the current and previous latent frame, so generation streams.

Both the streaming and the batch decode paths process one chunk at a time
with identical GEMM shapes; their outputs are bit-equal, which the tests
pin. Batch decode differs only in how it sources the previous-latent
context (array indexing vs DecoderState buffers).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d
from .optim import OptimizerConfig, adamw_step, collect_grads, init_state, zero_grads
from .tensor import Tensor, backward, no_grad


@dataclass
class CodecConfig:
    temporal_factor: int = 4
    spatial_factor: int = 4
    latent_channels: int = 8
    decoder_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    residual_blocks_per_scale: int = 2
    kl_weight: float = 1e-6

    def __post_init__(self):
        if self.temporal_factor < 1:
            raise ValueError("temporal_factor must be >= 1")
        if self.spatial_factor & (self.spatial_factor - 1):
            raise ValueError("spatial_factor must be a power of two")

    @property
    def spatial_scales(self) -> int:
        return int(math.log2(self.spatial_factor))

    def latent_count(self, pixel_frames: int) -> int:
        if (pixel_frames - 1) % self.temporal_factor != 0:
            raise ValueError(
                f"pixel frame count must be 1 + {self.temporal_factor}*k, got {pixel_frames}"
            )
        return 1 + (pixel_frames - 1) // self.temporal_factor


class _ResBlock:
    def __init__(self, rng, ch):
        self.c1 = Conv2d(rng, ch, ch, 3)
        self.c2 = Conv2d(rng, ch, ch, 3)
        self.c2.w.data *= 0.2  # near-identity start

    def __call__(self, x):
        h = self.c2(T.silu(self.c1(T.silu(x))))
        return x + h

    def params(self, p):
        return {**self.c1.params(f"{p}.c1"), **self.c2.params(f"{p}.c2")}


class _SpatialEncoder:
    """Per-frame 2D encoder: [B,3,H,W] -> [B,feat,H/sf,W/sf]."""

    def __init__(self, rng, cfg: CodecConfig):
        chans = cfg.decoder_channels
        self.stages = []
        c_in = 3
        for scale in range(cfg.spatial_scales):
            c_out = chans[min(scale + 1, len(chans) - 1)]
            down = Conv2d(rng, c_in, c_out, 3, stride=2)
            blocks = [_ResBlock(rng, c_out) for _ in range(cfg.residual_blocks_per_scale)]
            self.stages.append((down, blocks))
            c_in = c_out
        self.feat = c_in

    def __call__(self, x):
        for down, blocks in self.stages:
            x = down(x)
            for b in blocks:
                x = b(x)
        return x

    def params(self, p):
        out = {}
        for i, (down, blocks) in enumerate(self.stages):
            out.update(down.params(f"{p}.s{i}.down"))
            for j, b in enumerate(blocks):
                out.update(b.params(f"{p}.s{i}.b{j}"))
        return out


class _SpatialDecoder:
    """[B,feat,h,w] -> [B,3,H,W]; channels walk the config list deep-to-pixel."""

    def __init__(self, rng, cfg: CodecConfig):
        chans = cfg.decoder_channels
        self.stages = []
        c_in = chans[min(cfg.spatial_scales, len(chans) - 1)]
        self.feat = c_in
        for scale in range(cfg.spatial_scales - 1, -1, -1):
            c_out = chans[scale]
            proj = Conv2d(rng, c_in, c_out, 3)
            blocks = [_ResBlock(rng, c_out) for _ in range(cfg.residual_blocks_per_scale)]
            self.stages.append((proj, blocks))
            c_in = c_out
        self.out = Conv2d(rng, c_in, 3, 3)

    def __call__(self, x):
        for proj, blocks in self.stages:
            x = proj(T.upsample2x(x))
            for b in blocks:
                x = b(x)
        return T.sigmoid(self.out(x))

    def params(self, p):
        out = {}
        for i, (proj, blocks) in enumerate(self.stages):
            out.update(proj.params(f"{p}.u{i}.proj"))
            for j, b in enumerate(blocks):
                out.update(b.params(f"{p}.u{i}.b{j}"))
        out.update(self.out.params(f"{p}.out"))
        return out


class DecoderState:
    """Causal streaming-decode context: the previous latent frame only."""

    def __init__(self, codec_token: int):
        self.codec_token = codec_token
        self.prev: np.ndarray | None = None
        self.chunks_done = 0


class Codec:
    def __init__(self, cfg: CodecConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xC0DEC])
        tf = cfg.temporal_factor
        self.enc2d = _SpatialEncoder(rng, cfg)
        feat = self.enc2d.feat
        C = cfg.latent_channels
        self.head0 = Conv2d(rng, feat, 2 * C, 1, pad=0)
        self.merge = Conv2d(rng, (tf + 1) * feat, feat, 1, pad=0)
        self.merge_block = _ResBlock(rng, feat)
        self.headk = Conv2d(rng, feat, 2 * C, 1, pad=0)
        self.dec2d = _SpatialDecoder(rng, cfg)
        dfeat = self.dec2d.feat
        self.embed0 = Conv2d(rng, C, dfeat, 3)
        self.embedk = Conv2d(rng, 2 * C, tf * dfeat, 3)
        # latent normalization fitted after training (unit scale for the generator)
        self.latent_mean = np.zeros(C, dtype=np.float32)
        self.latent_std = np.ones(C, dtype=np.float32)
        self._token = id(self)

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.enc2d.params("enc2d"))
        out.update(self.head0.params("head0"))
        out.update(self.merge.params("merge"))
        out.update(self.merge_block.params("merge_block"))
        out.update(self.headk.params("headk"))
        out.update(self.dec2d.params("dec2d"))
        out.update(self.embed0.params("embed0"))
        out.update(self.embedk.params("embedk"))
        return out

    # -- encode ---------------------------------------------------------------

    def _frame_feats(self, video) -> Tensor:
        v = video if isinstance(video, Tensor) else Tensor(video)
        Tn, c, H, W = v.shape
        if c != 3 or H % self.cfg.spatial_factor or W % self.cfg.spatial_factor:
            raise ValueError(f"bad video shape {v.shape}")
        return self.enc2d(v)

    def encode_dist(self, video) -> tuple[Tensor, Tensor]:
        """[T,3,H,W] -> (mu, logvar) latents [K,C,h,w]; K = 1 + (T-1)/tf.

        Chunk k sees only pixel frames <= k*tf (one-frame lookback context),
        so latents are causal in pixel time.
        """
        tf = self.cfg.temporal_factor
        K = self.cfg.latent_count(video.shape[0])
        feats = self._frame_feats(video)  # [T, feat, h, w]
        d0 = self.head0(feats[0:1])
        dists = [d0]
        for k in range(1, K):
            ctx = feats[(k - 1) * tf : (k - 1) * tf + 1]
            chunk = feats[1 + (k - 1) * tf : 1 + k * tf]
            grouped = T.concat([ctx] + [chunk[j : j + 1] for j in range(tf)], axis=1)
            h = self.merge_block(self.merge(grouped))
            dists.append(self.headk(h))
        dist = T.concat(dists, axis=0)
        C = self.cfg.latent_channels
        return dist[:, :C], dist[:, C:]

    def encode(self, video) -> np.ndarray:
        """Deterministic latents (posterior mean), normalized to unit scale."""
        with no_grad():
            mu, _ = self.encode_dist(video)
        return self.normalize(mu.data)

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.latent_mean[:, None, None]) / self.latent_std[:, None, None]

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.latent_std[:, None, None] + self.latent_mean[:, None, None]

    def fit_latent_scale(self, videos: list[np.ndarray]) -> None:
        with no_grad():
            all_mu = [self.encode_dist(v)[0].data for v in videos]
        cat = np.concatenate(all_mu, axis=0)
        self.latent_mean = cat.mean(axis=(0, 2, 3)).astype(np.float32)
        self.latent_std = np.maximum(cat.std(axis=(0, 2, 3)), 1e-4).astype(np.float32)

    # -- decode ---------------------------------------------------------------

    def _decode_chunk(self, lat: Tensor, prev: Tensor | None) -> Tensor:
        tf = self.cfg.temporal_factor
        if prev is None:
            return self.dec2d(self.embed0(lat))
        x = self.embedk(T.concat([lat, prev], axis=1))  # [1, tf*dfeat, h, w]
        dfeat = self.dec2d.feat
        per_frame = T.concat([x[:, j * dfeat : (j + 1) * dfeat] for j in range(tf)], axis=0)
        return self.dec2d(per_frame)

    def decode_stream(self, latent_frame: np.ndarray, state: DecoderState) -> tuple[np.ndarray, DecoderState]:
        """One latent frame -> 1 pixel frame (first chunk) or tf pixel frames."""
        if state.codec_token != self._token:
            raise ValueError("DecoderState belongs to a different codec session")
        raw = self.denormalize(np.asarray(latent_frame, dtype=np.float32))
        with no_grad():
            lat = Tensor(raw[None])
            prev = None if state.prev is None else Tensor(state.prev[None])
            out = self._decode_chunk(lat, prev)
        state.prev = raw
        state.chunks_done += 1
        return out.data, state

    def open_decoder(self) -> DecoderState:
        return DecoderState(self._token)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        """Batch decode [K,C,h,w] -> [1+(K-1)*tf, 3, H, W], chunk by chunk."""
        raw = self.denormalize(np.asarray(latents, dtype=np.float32))
        chunks = []
        with no_grad():
            for k in range(raw.shape[0]):
                prev = None if k == 0 else Tensor(raw[k - 1 : k])
                chunks.append(self._decode_chunk(Tensor(raw[k : k + 1]), prev).data)
        return np.concatenate(chunks, axis=0)

    def decode_train(self, video: Tensor, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        """Reparameterized round trip for training: returns (recon, kl)."""
        mu, logvar = self.encode_dist(video)
        eps = Tensor(rng.standard_normal(mu.shape).astype(np.float32))
        z = mu + T.exp(logvar * 0.5) * eps
        kl = ((T.exp(logvar) + mu * mu - logvar - 1.0) * 0.5).mean()
        chunks = []
        for k in range(z.shape[0]):
            prev = None if k == 0 else z[k - 1 : k]
            chunks.append(self._decode_chunk(z[k : k + 1], prev))
        return T.concat(chunks, axis=0), kl


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def train_codec(
    clips: list,
    cfg: CodecConfig,
    opt_cfg: OptimizerConfig,
    steps: int,
    seed: int = 0,
    log=None,
    warmup: int = 0,
) -> Codec:
    """Reconstruction + KL training over TrainingClip pixels.

    Aborts on non-finite loss. Fits the latent normalization afterward and
    logs `step,loss` lines through `log` when given.
    """
    from .optim import cosine_lr

    if not clips:
        raise ValueError("empty dataset")
    codec = Codec(cfg, seed=seed)
    params = codec.params()
    state = init_state(params)
    rng = np.random.default_rng([seed, 0x7A17])
    order = itertools.cycle(range(len(clips)))
    base_lr = opt_cfg.learning_rate
    for step in range(steps):
        clip = clips[next(order)]
        video = Tensor(clip.pixels)
        recon, kl = codec.decode_train(video, rng)
        loss = ((recon - video) * (recon - video)).mean() + cfg.kl_weight * kl
        val = loss.item()
        if not math.isfinite(val):
            raise FloatingPointError(f"codec training diverged at step {step}: loss={val}")
        zero_grads(params)
        backward(loss)
        opt_cfg.learning_rate = cosine_lr(step, steps, base_lr, warmup)
        adamw_step(params, collect_grads(params), state, opt_cfg)
        if log is not None and (step % 25 == 0 or step == steps - 1):
            log(f"{step},{val:.6f}")
    opt_cfg.learning_rate = base_lr
    codec.fit_latent_scale([c.pixels for c in clips[: min(len(clips), 8)]])
    return codec
