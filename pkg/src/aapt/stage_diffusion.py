"""Stage 1: teacher-forced flow-matching training of the causal backbone.

One uniform timestep per clip, pushed through the shifting map toward the
noisy end; clean ground-truth frames on the recycled channel; noisy inputs
and velocity targets shifted one frame ahead of the recycled inputs so every
position performs next-frame prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, FrameInput
from .dataset import LatentClip, batch_clips
from .optim import OptimizerConfig, adamw_step, collect_grads, init_state, zero_grads
from .tensor import Tensor, backward


@dataclass
class TimestepSchedule:
    s: float = 24.0

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("shift factor must be >= 1")


def shift_timestep(t, s: float):
    """shift(t, s) = s*t / (1 + (s-1)*t); monotone, fixes 0 and 1."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if s < 1:
        raise ValueError("shift factor must be >= 1")
    return (s * t) / (1.0 + (s - 1.0) * t)


def make_noisy(x0, eps, t_shifted):
    """Linear interpolation x_t = (1-t)*x0 + t*eps; t broadcasts per clip."""
    if x0.shape != eps.shape:
        raise ValueError("x0/eps shape mismatch")
    t = np.asarray(t_shifted, dtype=np.float32)
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return (x0 if isinstance(x0, Tensor) else Tensor(x0)) * (1.0 - t) + (
            eps if isinstance(eps, Tensor) else Tensor(eps)
        ) * t
    return ((1.0 - t) * x0 + t * eps).astype(np.float32)


def velocity_target(x0, eps):
    """v = eps - x0."""
    if x0.shape != eps.shape:
        raise ValueError("x0/eps shape mismatch")
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return (eps if isinstance(eps, Tensor) else Tensor(eps)) - (
            x0 if isinstance(x0, Tensor) else Tensor(x0)
        )
    return (eps - x0).astype(np.float32)


def assemble_teacher_forced(z: np.ndarray, eps: np.ndarray, ctrl: np.ndarray, t_shifted: np.ndarray, ablate_recycle: bool = False):
    """Build the shifted-by-one frame inputs.

    z [B, M+1, C, h, w] clean latents, eps noise for targets [B, M, ...],
    ctrl [B, M, 4]. Position p: noisy(z[p+1]), recycled z[p], control ctrl[p];
    the target is v(z[p+1]). Returns (frame inputs, velocity targets).

    ablate_recycle zeroes the recycled channel for every position past the
    first (the user frame stays), matching the recycling ablation.
    """
    B, M = ctrl.shape[:2]
    fis = []
    targets = []
    tcol = t_shifted.astype(np.float32)
    for p in range(M):
        x0_next = z[:, p + 1]
        e = eps[:, p]
        rec = z[:, p]
        if ablate_recycle and p > 0:
            rec = np.zeros_like(rec)
        fis.append(
            FrameInput(
                noisy=make_noisy(x0_next, e, tcol[:, None, None, None]),
                recycled=rec,
                control=ctrl[:, p],
                timestep=tcol,
            )
        )
        targets.append(velocity_target(x0_next, e))
    return fis, np.stack(targets, axis=1)


@dataclass
class StepRecord:
    loss: float
    t_shifted: np.ndarray  # one entry per clip; every frame shares it


def diffusion_train_step(
    model: Backbone,
    z: np.ndarray,
    ctrl: np.ndarray,
    prompt_ids: np.ndarray,
    sched: TimestepSchedule,
    opt_cfg: OptimizerConfig,
    opt_state: dict,
    rng: np.random.Generator,
    ablate_recycle: bool = False,
) -> StepRecord:
    if z.shape[1] < 2:
        raise ValueError("clip needs at least 2 latent frames")
    B = z.shape[0]
    t = shift_timestep(rng.uniform(0.0, 1.0, B), sched.s)
    eps = rng.standard_normal((B, ctrl.shape[1]) + z.shape[2:]).astype(np.float32)
    fis, targets = assemble_teacher_forced(z, eps, ctrl, t, ablate_recycle)
    params = model.params()
    zero_grads(params)
    v_hat, _ = model.forward_parallel(fis, prompt_ids)
    diff = v_hat - Tensor(targets)
    loss = (diff * diff).mean()
    val = loss.item()
    if not math.isfinite(val):
        raise FloatingPointError("diffusion training diverged")
    backward(loss)
    adamw_step(params, collect_grads(params), opt_state, opt_cfg)
    return StepRecord(loss=val, t_shifted=t)


def velocity_mse(model: Backbone, clips: list[LatentClip], sched: TimestepSchedule, seed: int = 1234, ablate_recycle: bool = False) -> float:
    """Validation objective on a fixed noise/timestep draw (comparable across
    checkpoints)."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for clip in clips:
        z = clip.latents[None]
        ctrl = clip.controls[None]
        t = shift_timestep(rng.uniform(0.0, 1.0, 1), sched.s)
        eps = rng.standard_normal((1, ctrl.shape[1]) + z.shape[2:]).astype(np.float32)
        fis, targets = assemble_teacher_forced(z, eps, ctrl, t, ablate_recycle)
        with T.no_grad():
            v_hat, _ = model.forward_parallel(fis, np.array([clip.prompt_id]))
        total += float(np.mean((v_hat.data - targets) ** 2))
        count += 1
    return total / max(count, 1)


def train(
    model: Backbone,
    clips: list[LatentClip],
    steps: int,
    batch_size: int,
    sched: TimestepSchedule,
    opt_cfg: OptimizerConfig,
    seed: int = 0,
    log=None,
    val_clips: list[LatentClip] | None = None,
    val_every: int = 100,
    ablate_recycle: bool = False,
    warmup: int = 0,
) -> dict:
    """Returns {step: validation MSE} checkpoints of the run."""
    from .optim import cosine_lr

    rng = np.random.default_rng([seed, 0x5D1])
    params = model.params()
    opt_state = init_state(params)
    history = {}
    base_lr = opt_cfg.learning_rate
    for step_i in range(steps):
        opt_cfg.learning_rate = cosine_lr(step_i, steps, base_lr, warmup)
        idx = rng.choice(len(clips), size=min(batch_size, len(clips)), replace=False).tolist()
        z, ctrl, ids = batch_clips(clips, idx)
        rec = diffusion_train_step(model, z, ctrl, ids, sched, opt_cfg, opt_state, rng, ablate_recycle)
        if log is not None and (step_i % 20 == 0 or step_i == steps - 1):
            log(f"{step_i},{rec.loss:.6f}")
        if val_clips is not None and (step_i % val_every == 0 or step_i == steps - 1):
            history[step_i] = velocity_mse(model, val_clips, sched, ablate_recycle=ablate_recycle)
    opt_cfg.learning_rate = base_lr
    return history
