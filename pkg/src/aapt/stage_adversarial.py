"""Stage 3: adversarial post-training of the one-step generator.

Student forcing: the generator rolls out autoregressively through its KV
cache exactly as at inference (recycled inputs detached, cache path
differentiable); the discriminator scores every frame of the clip with one
parallel pass, one logit per frame. Relativistic pairing on per-frame
logits; approximated R1/R2 penalties on the discriminator only; RMSProp on
both networks.

Teacher-forcing mode (the ablation) predicts all next frames in parallel
from ground-truth inputs; the discriminator then judges each predicted
frame independently against the real video's KV context via a doubled
token sequence sharing the real blocks.

Long-video rounds stream segments from one generator session, detaching
the KV cache at segment boundaries and accumulating per-segment gradients
into a single optimizer step per network.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import engine
from . import tensor as T
from .backbone import Backbone, FrameInput, build_layout, build_mask, rope_phases_block
from .nn import Linear, load_params
from .optim import OptimizerConfig, collect_grads, init_state, rmsprop_step, zero_grads
from .tensor import Tensor, backward
from .world import MOTION_PROFILES, ScaleStats, chunk_controls, sample_trajectory


@dataclass
class AdversarialConfig:
    sigma_perturb: float = 0.1
    lambda_reg: float = 1000.0
    segment_len_frames: int = 4  # latent frames judged per segment
    overlap_frames: int = 1
    extensions: int = 0
    detach_recycled: bool = True
    extension_profile: str = "roam"
    ablate_recycle: bool = False
    d_steps: int = 1  # discriminator updates per generator update

    def __post_init__(self):
        if self.sigma_perturb <= 0:
            raise ValueError("sigma_perturb must be positive")
        if self.overlap_frames >= self.segment_len_frames:
            raise ValueError("overlap must be smaller than the segment")


@dataclass
class DiscOutput:
    per_frame_logits: Tensor  # [B, frames]


@contextlib.contextmanager
def frozen(params: dict[str, Tensor]):
    """Temporarily stop gradient accumulation into these parameters."""
    flags = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for k, p in params.items():
            p.requires_grad = flags[k]


class Discriminator:
    """Generator backbone plus a per-frame logit projection; frames replace
    the noise channels, timesteps stay uniform and unshifted."""

    def __init__(self, cfg, seed: int = 1):
        self.backbone = Backbone(cfg, seed=seed)
        rng = np.random.default_rng([seed, 0xD15C])
        self.logit_head = Linear(rng, cfg.model_dim, 1, scale=0.02)

    def params(self) -> dict[str, Tensor]:
        out = {f"disc.{k}": v for k, v in self.backbone.params().items()}
        out.update({f"disc.{k}": v for k, v in self.logit_head.params("logit_head").items()})
        return out

    def init_from_stage1(self, stage1_values: dict[str, np.ndarray]) -> None:
        load_params(self.backbone.params(), stage1_values)


def sample_disc_timestep(rng: np.random.Generator) -> float:
    """Uniform, never shifted."""
    return float(rng.uniform(0.0, 1.0))


def disc_forward(disc: Discriminator, frames, first_frame, controls, t: float) -> DiscOutput:
    """Per-frame causal logits: T judged frames in, T logits out.

    frames [B,T,C,h,w] occupy the noise channel slots (clean; t is
    embedding-only); recycled inputs are the same clip shifted back one
    frame, starting at first_frame."""
    M = frames.shape[1] if not isinstance(frames, Tensor) else frames.shape[1]
    tcol = np.full(first_frame.shape[0] if not isinstance(first_frame, Tensor) else first_frame.shape[0], t, dtype=np.float32)
    fis = []
    for p in range(M):
        rec = first_frame if p == 0 else frames[:, p - 1]
        fis.append(FrameInput(noisy=frames[:, p], recycled=rec, control=controls[:, p], timestep=tcol))
    _, pooled = disc.backbone.forward_parallel(fis, np.asarray(_ids_of(disc, first_frame, controls)))
    logits = disc.logit_head(pooled)[:, :, 0]
    return DiscOutput(per_frame_logits=logits)


def _ids_of(disc, first_frame, controls):
    # prompt ids travel alongside via attribute set by callers; default 0
    B = first_frame.shape[0]
    ids = getattr(disc, "_prompt_ids", None)
    if ids is None or len(ids) != B:
        return np.zeros(B, dtype=np.int64)
    return ids


def rpgan_loss(fake_logits, real_logits, side: str):
    """Relativistic pairing value f_side(fake - real), averaged over frame
    positions and batch. f_G(x) = -log(1+e^-x), f_D(x) = -log(1+e^x);
    each side maximizes its own f, so optimizers descend on the negation."""
    fake = fake_logits if isinstance(fake_logits, Tensor) else Tensor(fake_logits)
    real = real_logits if isinstance(real_logits, Tensor) else Tensor(real_logits)
    if fake.shape != real.shape:
        raise ValueError(f"logit shapes differ: {fake.shape} vs {real.shape}")
    diff = fake - real
    if side == "generator":
        return -T.softplus(-diff).mean()
    if side == "discriminator":
        return -T.softplus(diff).mean()
    raise ValueError(f"unknown side {side}")


def approx_r1(disc_fn, x0: np.ndarray, sigma: float, lam: float, rng: np.random.Generator):
    """lambda * ||D(x) - D(x + sigma*n)||^2, one Gaussian draw, squared-L2
    over the per-frame logits, batch-averaged."""
    n = rng.standard_normal(x0.shape).astype(np.float32)
    clean = disc_fn(x0)
    pert = disc_fn((x0 + sigma * n).astype(np.float32))
    d = clean - pert
    per_sample = (d * d).sum(axis=tuple(range(1, len(d.shape))))
    return per_sample.mean() * lam


def approx_r2(disc_fn, fake: np.ndarray, sigma: float, lam: float, rng: np.random.Generator):
    """Same penalty evaluated on generated samples."""
    return approx_r1(disc_fn, fake, sigma, lam, rng)


def student_forcing_rollout(
    backbone: Backbone,
    z0: np.ndarray,
    prompt_ids: np.ndarray,
    controls_raw: np.ndarray,
    stats: ScaleStats,
    seeds: list[int],
    detach_recycled: bool = True,
    ablate_recycle: bool = False,
    session: engine.GenSession | None = None,
):
    """T sequential cached forward steps, strictly the inference procedure.

    Returns (frames: list of [B,C,h,w] graph Tensors, session). Gradients
    flow through the KV cache; the recycled input is detached per flag. Pass
    a session to continue an existing stream (long-video segments)."""
    if session is None:
        session = engine.open_session_latents(
            z0, prompt_ids, backbone, stats, seeds, ablate_recycle=ablate_recycle
        )
    frames = []
    for p in range(controls_raw.shape[1]):
        out = engine.step(
            session, controls_raw[:, p], record_graph=True, detach_recycled=detach_recycled
        )
        frames.append(out)
    return frames, session


def _stack_frames(frames: list[Tensor]) -> Tensor:
    return T.stack(frames, axis=1)  # [B, T, C, h, w]


@dataclass
class RoundRecord:
    g_loss: float
    d_loss: float
    ar1: float
    ar2: float
    disc_t: float


def _disc_fn_for(disc, first_frame, controls, t):
    def fn(frames):
        return disc_forward(disc, frames if isinstance(frames, Tensor) else Tensor(frames), Tensor(np.asarray(first_frame)), controls, t).per_frame_logits

    return fn


def adversarial_round(
    gen: Backbone,
    disc: Discriminator,
    z: np.ndarray,
    ctrl_norm: np.ndarray,
    ctrl_raw: np.ndarray,
    prompt_ids: np.ndarray,
    stats: ScaleStats,
    cfg: AdversarialConfig,
    g_state: dict,
    d_state: dict,
    opt_cfg: OptimizerConfig,
    rng: np.random.Generator,
    seeds: list[int] | None = None,
    d_opt_cfg: OptimizerConfig | None = None,
) -> RoundRecord:
    """One round: cfg.d_steps discriminator updates, then one generator
    update against the refreshed discriminator.

    The generator rolls out in student-forcing mode from the real first
    frames under the real controls; the discriminator pairs fake and real
    logits per frame index. Regularizers enter the discriminator loss only.
    D-only steps use no-grad rollouts (the graph is needed only for G).
    """
    B, Mp1 = z.shape[:2]
    M = Mp1 - 1
    gen_params = gen.params()
    disc_params = disc.params()
    disc._prompt_ids = prompt_ids
    d_opt = d_opt_cfg or opt_cfg
    if seeds is None:
        seeds = [int(s) for s in rng.integers(0, 2**31 - 1, B)]

    real_np = z[:, 1:]
    t_d = sample_disc_timestep(rng)
    dfn = _disc_fn_for(disc, z[:, 0], ctrl_norm, t_d)

    d_pair = ar1 = ar2 = None
    for _ in range(max(cfg.d_steps, 1)):
        with T.no_grad():
            frames, _ = student_forcing_rollout(
                gen, z[:, 0], prompt_ids, ctrl_raw, stats,
                [int(s) for s in rng.integers(0, 2**31 - 1, B)],
                detach_recycled=cfg.detach_recycled, ablate_recycle=cfg.ablate_recycle,
            )
        fake_np = np.stack([f.data if isinstance(f, Tensor) else f for f in frames], axis=1)
        zero_grads(disc_params)
        d_fake = dfn(fake_np)
        d_real = dfn(real_np)
        d_pair = -rpgan_loss(d_fake, d_real, "discriminator")
        ar1 = approx_r1(dfn, real_np, cfg.sigma_perturb, cfg.lambda_reg, rng)
        ar2 = approx_r2(dfn, fake_np, cfg.sigma_perturb, cfg.lambda_reg, rng)
        d_obj = d_pair + ar1 + ar2
        backward(d_obj)
        rmsprop_step(disc_params, collect_grads(disc_params), d_state, d_opt)

    # generator update against the refreshed discriminator
    frames, _ = student_forcing_rollout(
        gen, z[:, 0], prompt_ids, ctrl_raw, stats, seeds,
        detach_recycled=cfg.detach_recycled, ablate_recycle=cfg.ablate_recycle,
    )
    fake = _stack_frames(frames)
    zero_grads(gen_params)
    with frozen(disc_params):
        g_fake = dfn(fake)
        with T.no_grad():
            g_real = dfn(real_np)
        g_obj = -rpgan_loss(g_fake, g_real.detach(), "generator")
        backward(g_obj)
    rmsprop_step(gen_params, collect_grads(gen_params), g_state, opt_cfg)

    rec = RoundRecord(
        g_loss=float(g_obj.data),
        d_loss=float(d_pair.data),
        ar1=float(ar1.data),
        ar2=float(ar2.data),
        disc_t=t_d,
    )
    if not (math.isfinite(rec.g_loss) and math.isfinite(rec.d_loss)):
        raise FloatingPointError("adversarial training diverged")
    return rec


# -- teacher-forcing ablation -------------------------------------------------------


def teacher_forced_generate(gen: Backbone, z: np.ndarray, ctrl_norm: np.ndarray, prompt_ids: np.ndarray, rng: np.random.Generator, ablate_recycle: bool = False):
    """Parallel one-step predictions from ground-truth inputs: position p
    predicts frame p+1 independently of other predictions."""
    B, Mp1 = z.shape[:2]
    M = Mp1 - 1
    t1 = np.ones(B, dtype=np.float32)
    eps = rng.standard_normal((B, M) + z.shape[2:]).astype(np.float32)
    fis = []
    for p in range(M):
        rec = z[:, p]
        if ablate_recycle and p > 0:
            rec = np.zeros_like(rec)
        fis.append(FrameInput(noisy=eps[:, p], recycled=rec, control=ctrl_norm[:, p], timestep=t1))
    v_hat, _ = gen.forward_parallel(fis, prompt_ids)
    return Tensor(eps) - v_hat  # [B, M, C, h, w] one-step samples


def disc_forward_teacher(disc: Discriminator, real_frames, fake_frames, first_frame, controls, t: float):
    """Doubled-sequence pass: real blocks provide the KV context, probe
    blocks carry the predicted frames and attend only prompt + past real
    blocks + themselves. Returns (real logits, probe logits), each [B, M]."""
    cfg = disc.backbone.cfg
    B, M = controls.shape[:2]
    tcol = np.full(B, t, dtype=np.float32)
    fis = []
    for p in range(M):  # real blocks
        rec = first_frame if p == 0 else real_frames[:, p - 1]
        fis.append(FrameInput(noisy=real_frames[:, p], recycled=rec, control=controls[:, p], timestep=tcol))
    for p in range(M):  # probe blocks, recycled input is still the real past
        rec = first_frame if p == 0 else real_frames[:, p - 1]
        noisy = fake_frames[:, p] if isinstance(fake_frames, Tensor) else Tensor(np.asarray(fake_frames)[:, p])
        fis.append(FrameInput(noisy=noisy, recycled=rec, control=controls[:, p], timestep=tcol))

    layout = build_layout(cfg, 2 * M)
    N = cfg.window_N
    base = build_mask(build_layout(cfg, M), N)
    S = layout.total
    P = cfg.prompt_tokens
    tpf = cfg.tokens_per_frame
    mask = np.zeros((S, S), dtype=bool)
    half = P + M * tpf
    mask[:half, :half] = base  # prompt + real blocks: standard rules
    for p in range(M):
        rows = slice(half + p * tpf, half + (p + 1) * tpf)
        mask[rows, : base.shape[1]] = base[P + p * tpf : P + (p + 1) * tpf, :]  # same visible real set
        mask[rows, P + p * tpf : P + (p + 1) * tpf] = False  # not the real frame it replaces
        mask[rows, rows] = True  # itself
    positions = list(range(M)) + list(range(M))  # probes share real temporal positions

    _, pooled = disc.backbone.forward_parallel(fis, _ids_of(disc, first_frame, controls), mask=mask, positions=positions)
    logits = disc.logit_head(pooled)[:, :, 0]
    return logits[:, :M], logits[:, M:]


def teacher_forcing_adv_step(
    gen: Backbone,
    disc: Discriminator,
    z: np.ndarray,
    ctrl_norm: np.ndarray,
    prompt_ids: np.ndarray,
    cfg: AdversarialConfig,
    g_state: dict,
    d_state: dict,
    opt_cfg: OptimizerConfig,
    rng: np.random.Generator,
) -> RoundRecord:
    """Ablation round: parallel teacher-forced generation, discriminator on
    the real-video KV cache."""
    gen_params = gen.params()
    disc_params = disc.params()
    disc._prompt_ids = prompt_ids
    real_np = z[:, 1:]
    fake = teacher_forced_generate(gen, z, ctrl_norm, prompt_ids, rng, cfg.ablate_recycle)
    fake_np = fake.data.copy()
    t_d = sample_disc_timestep(rng)

    zero_grads(disc_params)
    d_real, d_probe = disc_forward_teacher(disc, real_np, fake_np, z[:, 0], ctrl_norm, t_d)
    d_pair = -rpgan_loss(d_probe, d_real, "discriminator")
    dfn = _disc_fn_for(disc, z[:, 0], ctrl_norm, t_d)
    ar1 = approx_r1(dfn, real_np, cfg.sigma_perturb, cfg.lambda_reg, rng)
    ar2 = approx_r2(dfn, fake_np, cfg.sigma_perturb, cfg.lambda_reg, rng)
    d_obj = d_pair + ar1 + ar2
    backward(d_obj)
    rmsprop_step(disc_params, collect_grads(disc_params), d_state, opt_cfg)

    zero_grads(gen_params)
    with frozen(disc_params):
        g_real, g_probe = disc_forward_teacher(disc, real_np, fake, z[:, 0], ctrl_norm, t_d)
        g_obj = -rpgan_loss(g_probe, g_real.detach(), "generator")
        backward(g_obj)
    rmsprop_step(gen_params, collect_grads(gen_params), g_state, opt_cfg)

    return RoundRecord(
        g_loss=float(g_obj.data),
        d_loss=float(d_pair.data),
        ar1=float(ar1.data),
        ar2=float(ar2.data),
        disc_t=t_d,
    )


# -- long-video segment training ------------------------------------------------------


def _sample_extension_controls(rng: np.random.Generator, n_steps: int, profile_name: str, temporal_factor: int) -> np.ndarray:
    traj = sample_trajectory(rng, n_steps * temporal_factor, MOTION_PROFILES[profile_name])
    return chunk_controls(traj, temporal_factor)


def long_video_round(
    gen: Backbone,
    disc: Discriminator,
    clips,
    stats: ScaleStats,
    cfg: AdversarialConfig,
    g_state: dict,
    d_state: dict,
    opt_cfg: OptimizerConfig,
    rng: np.random.Generator,
    temporal_factor: int,
    batch_size: int = 1,
    seeds: list[int] | None = None,
):
    """One accumulated round over segment_len + extensions*(segment_len -
    overlap) generated frames.

    The generator streams one session; between segments its KV cache (and
    the staged recycled frame) are detached, so no gradient crosses a
    boundary. Every segment is scored by the discriminator against a real
    segment from the dataset; per-segment backwards accumulate into one
    RMSProp step per network."""
    from .dataset import batch_clips

    S, o, E = cfg.segment_len_frames, cfg.overlap_frames, cfg.extensions
    idx = rng.choice(len(clips), size=batch_size, replace=False).tolist()
    z, ctrl_n, ids = batch_clips(clips, idx)
    ctrl_raw = np.stack([clips[i].controls_raw for i in idx])
    B = z.shape[0]
    if seeds is None:
        seeds = [int(s) for s in rng.integers(0, 2**31 - 1, B)]
    disc._prompt_ids = ids
    gen_params = gen.params()
    disc_params = disc.params()
    zero_grads(gen_params)
    zero_grads(disc_params)

    session = None
    stream: list = []
    segments: list[np.ndarray] = []  # judged frames per segment, for the reconstruction law
    prev_tail_detached: list = []
    records = []
    total_new = S + E * (S - o)
    produced = 0

    for seg in range(E + 1):
        new = S if seg == 0 else S - o
        if seg == 0:
            seg_ctrl_raw = ctrl_raw[:, :new]
            seg_ctrl_norm = ctrl_n[:, :new]
            first = z[:, 0]
        else:
            seg_ctrl_raw = np.stack(
                [_sample_extension_controls(rng, new, cfg.extension_profile, temporal_factor) for _ in range(B)]
            ).astype(np.float32)
            seg_ctrl_norm = (seg_ctrl_raw / stats.std).astype(np.float32)
            first = None
        frames, session = student_forcing_rollout(
            gen,
            first if seg == 0 else None,
            ids,
            seg_ctrl_raw,
            stats,
            seeds,
            detach_recycled=cfg.detach_recycled,
            ablate_recycle=cfg.ablate_recycle,
            session=session,
        )
        produced += new

        # discriminator inputs: overlap tail from the previous segment
        # (detached: the boundary is absolute) plus this segment's frames
        if seg == 0:
            judged = frames
            judged_ctrl = seg_ctrl_norm
            seg_first = z[:, 0]
            seg_first_t = Tensor(z[:, 0])
        else:
            judged = prev_tail_detached + frames
            judged_ctrl = np.concatenate([prev_ctrl_tail, seg_ctrl_norm], axis=1)
            seg_first = prev_first_np
            seg_first_t = Tensor(prev_first_np)
        fake_seg = _stack_frames([f if isinstance(f, Tensor) else Tensor(f) for f in judged])
        fake_seg_np = fake_seg.data.copy()

        # real segment of matching length from the dataset
        ridx = rng.choice(len(clips), size=B, replace=True).tolist()
        rz, rctrl, _ = batch_clips(clips, ridx)
        L = fake_seg_np.shape[1]
        w0 = int(rng.integers(0, max(rz.shape[1] - 1 - L, 0) + 1))
        real_first = rz[:, w0]
        real_seg = rz[:, w0 + 1 : w0 + 1 + L]
        real_ctrl = rctrl[:, w0 : w0 + L]
        t_d = sample_disc_timestep(rng)

        # accumulate generator gradients (frozen discriminator)
        with frozen(disc_params):
            g_fake = disc_forward(disc, fake_seg, seg_first_t, judged_ctrl, t_d).per_frame_logits
            with T.no_grad():
                g_real = disc_forward(disc, Tensor(real_seg), Tensor(real_first), real_ctrl, t_d).per_frame_logits
            g_obj = -rpgan_loss(g_fake, g_real.detach(), "generator")
            backward(g_obj)

        # accumulate discriminator gradients (fakes detached)
        dfn_f = _disc_fn_for(disc, seg_first, judged_ctrl, t_d)
        dfn_r = _disc_fn_for(disc, real_first, real_ctrl, t_d)
        d_fake = dfn_f(fake_seg_np)
        d_real = dfn_r(real_seg)
        d_pair = -rpgan_loss(d_fake, d_real, "discriminator")
        ar1 = approx_r1(dfn_r, real_seg, cfg.sigma_perturb, cfg.lambda_reg, rng)
        ar2 = approx_r2(dfn_f, fake_seg_np, cfg.sigma_perturb, cfg.lambda_reg, rng)
        d_obj = d_pair + ar1 + ar2
        backward(d_obj)

        records.append(
            RoundRecord(float(g_obj.data), float(d_pair.data), float(ar1.data), float(ar2.data), t_d)
        )

        # detach the boundary: cache, staged frame, and the tail kept for overlap
        session.cache.detach()
        if isinstance(session.last_frame, Tensor):
            session.last_frame = session.last_frame.detach()
        prev_tail_detached = [
            (f.detach() if isinstance(f, Tensor) else Tensor(f)) for f in frames[-o:]
        ]
        prev_ctrl_tail = judged_ctrl[:, -o:]
        prev_first_np = fake_seg_np[:, -o - 1] if fake_seg_np.shape[1] > o else np.asarray(seg_first)
        stream.extend([f.data.copy() if isinstance(f, Tensor) else f for f in frames])
        segments.append(fake_seg_np)

    assert produced == total_new, (produced, total_new)
    rmsprop_step(gen_params, collect_grads(gen_params), g_state, opt_cfg)
    rmsprop_step(disc_params, collect_grads(disc_params), d_state, opt_cfg)
    return records, np.stack(stream, axis=1), segments


def train_adversarial(
    gen: Backbone,
    disc: Discriminator,
    clips,
    stats: ScaleStats,
    cfg: AdversarialConfig,
    opt_cfg: OptimizerConfig,
    rounds: int,
    temporal_factor: int,
    batch_size: int = 2,
    seed: int = 0,
    mode: str = "student",
    log=None,
    d_opt_cfg: OptimizerConfig | None = None,
):
    """mode: student | teacher | long."""
    from .dataset import batch_clips

    rng = np.random.default_rng([seed, 0x5D3])
    g_state = init_state(gen.params())
    d_state = init_state(disc.params())
    records = []
    for r in range(rounds):
        if mode == "long":
            recs, _, _ = long_video_round(
                gen, disc, clips, stats, cfg, g_state, d_state, opt_cfg, rng, temporal_factor, batch_size=1
            )
            rec = recs[-1]
        else:
            idx = rng.choice(len(clips), size=min(batch_size, len(clips)), replace=False).tolist()
            z, ctrl_n, ids = batch_clips(clips, idx)
            ctrl_raw = np.stack([clips[i].controls_raw for i in idx])
            if mode == "student":
                rec = adversarial_round(
                    gen, disc, z, ctrl_n, ctrl_raw, ids, stats, cfg, g_state, d_state, opt_cfg, rng,
                    d_opt_cfg=d_opt_cfg,
                )
            elif mode == "teacher":
                rec = teacher_forcing_adv_step(
                    gen, disc, z, ctrl_n, ids, cfg, g_state, d_state, opt_cfg, rng
                )
            else:
                raise ValueError(f"unknown mode {mode}")
        records.append(rec)
        if log is not None and (r % 10 == 0 or r == rounds - 1):
            log(f"{r},{rec.g_loss:.5f},{rec.d_loss:.5f},{rec.ar1:.5f},{rec.ar2:.5f}")
    return records
