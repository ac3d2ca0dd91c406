"""Stage 2: consistency distillation onto a fixed shifted step grid.

The frozen stage-1 model supplies one Euler step between adjacent grid
points; the student matches its own clean-sample prediction at the lower
timestep (stop-gradient, no EMA copy, no classifier-free guidance).
Teacher forcing and the shift-by-one alignment carry over from stage 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone
from .dataset import LatentClip, batch_clips
from .optim import OptimizerConfig, adamw_step, collect_grads, init_state, zero_grads
from .stage_diffusion import shift_timestep
from .tensor import Tensor, backward


@dataclass
class StepGrid:
    K: int
    timesteps: np.ndarray = field(default=None)

    def __post_init__(self):
        ts = self.timesteps
        if ts is None or len(ts) != self.K:
            raise ValueError("timesteps must hold K entries")
        if ts[0] != 0.0 or ts[-1] != 1.0 or np.any(np.diff(ts) <= 0):
            raise ValueError("grid must ascend from 0 to 1")


def build_step_grid(K: int, s: float) -> StepGrid:
    """K uniform points pushed through the shifting map."""
    if K < 2:
        raise ValueError("grid needs at least 2 steps")
    ts = shift_timestep(np.arange(K, dtype=np.float64) / (K - 1), s)
    return StepGrid(K=K, timesteps=ts)


def _forward_v(model: Backbone, z, x_traj, ctrl, ids, t, ablate_recycle: bool = False):
    """Velocity prediction at trajectory point x_traj [B,M,C,h,w], recycled
    inputs teacher-forced from the clean clip z, timestep t per clip."""
    from .backbone import FrameInput

    tcol = np.asarray(t, dtype=np.float32)
    fis = []
    for p in range(ctrl.shape[1]):
        rec = z[:, p]
        if ablate_recycle and p > 0:
            rec = np.zeros_like(rec)
        fis.append(FrameInput(noisy=x_traj[:, p], recycled=rec, control=ctrl[:, p], timestep=tcol))
    out, _ = model.forward_parallel(fis, ids)
    return out


def teacher_velocity_fn(teacher: Backbone, z, ctrl, ids, ablate_recycle: bool = False):
    """No-grad velocity oracle of the frozen stage-1 model. A single
    conditional branch: no classifier-free guidance anywhere."""

    def v_fn(x_t, t):
        B = x_t.shape[0]
        with T.no_grad():
            v = _forward_v(teacher, z, x_t, ctrl, ids, np.full(B, t), ablate_recycle)
        return v.data

    return v_fn


def teacher_euler_step(v_fn, x_t, t_hi: float, t_lo: float):
    """Flow-matching Euler step x_lo = x_t - (t_hi - t_lo) * v(x_t, t_hi)."""
    if t_hi < t_lo:
        raise ValueError("t_hi must be >= t_lo")
    if t_hi == t_lo:
        return x_t
    return x_t - (t_hi - t_lo) * v_fn(x_t, t_hi)


def x0_from_velocity(x_t, t, v):
    """Invert the interpolation: x0 = x_t - t*v (exact when v = eps - x0)."""
    if isinstance(x_t, Tensor) or isinstance(v, Tensor):
        xt = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        return xt - v * np.float32(t)
    return x_t - t * v


def cd_train_step(
    student: Backbone,
    teacher: Backbone,
    z: np.ndarray,
    ctrl: np.ndarray,
    prompt_ids: np.ndarray,
    grid: StepGrid,
    opt_cfg: OptimizerConfig,
    opt_state: dict,
    rng: np.random.Generator,
    ablate_recycle: bool = False,
) -> float:
    """One distillation step on an adjacent grid pair (t_n, t_n+1)."""
    if grid.K < 2:
        raise ValueError("grid too small")
    B, M = ctrl.shape[:2]
    n = int(rng.integers(0, grid.K - 1))
    t_lo, t_hi = float(grid.timesteps[n]), float(grid.timesteps[n + 1])
    x0 = z[:, 1:]
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    x_hi = ((1.0 - t_hi) * x0 + t_hi * eps).astype(np.float32)

    x_lo = teacher_euler_step(teacher_velocity_fn(teacher, z, ctrl, prompt_ids, ablate_recycle), x_hi, t_hi, t_lo)
    with T.no_grad():
        v_lo = _forward_v(student, z, x_lo, ctrl, prompt_ids, np.full(B, t_lo), ablate_recycle)
    target = x0_from_velocity(x_lo, t_lo, v_lo.data)  # stop-gradient target

    params = student.params()
    zero_grads(params)
    v_hi = _forward_v(student, z, x_hi, ctrl, prompt_ids, np.full(B, t_hi), ablate_recycle)
    pred = x0_from_velocity(Tensor(x_hi), t_hi, v_hi)
    diff = pred - Tensor(target)
    loss = (diff * diff).mean()
    val = loss.item()
    if not math.isfinite(val):
        raise FloatingPointError("consistency distillation diverged")
    backward(loss)
    adamw_step(params, collect_grads(params), opt_state, opt_cfg)
    return val


def sample_one_step(model: Backbone, z: np.ndarray, ctrl: np.ndarray, prompt_ids: np.ndarray, eps: np.ndarray):
    """One NFE from the pure-noise endpoint, teacher-forced context."""
    B = z.shape[0]
    before = model.step_count
    with T.no_grad():
        v = _forward_v(model, z, eps, ctrl, prompt_ids, np.full(B, 1.0))
    assert model.step_count == before + 1
    return eps - v.data


def sample_multi_step(model: Backbone, z: np.ndarray, ctrl: np.ndarray, prompt_ids: np.ndarray, eps: np.ndarray, grid: StepGrid):
    """Full grid traversal 1 -> 0 with Euler steps (the teacher's sampler)."""
    x = eps.copy()
    B = z.shape[0]
    for n in range(grid.K - 1, 0, -1):
        t_hi, t_lo = float(grid.timesteps[n]), float(grid.timesteps[n - 1])
        with T.no_grad():
            v = _forward_v(model, z, x, ctrl, prompt_ids, np.full(B, t_hi))
        x = x - (t_hi - t_lo) * v.data
    return x


def train(
    student: Backbone,
    teacher: Backbone,
    clips: list[LatentClip],
    steps: int,
    batch_size: int,
    grid: StepGrid,
    opt_cfg: OptimizerConfig,
    seed: int = 0,
    log=None,
    ablate_recycle: bool = False,
    warmup: int = 0,
) -> list[float]:
    from .optim import cosine_lr

    rng = np.random.default_rng([seed, 0x5D2])
    params = student.params()
    opt_state = init_state(params)
    losses = []
    base_lr = opt_cfg.learning_rate
    for step_i in range(steps):
        opt_cfg.learning_rate = cosine_lr(step_i, steps, base_lr, warmup)
        idx = rng.choice(len(clips), size=min(batch_size, len(clips)), replace=False).tolist()
        z, ctrl, ids = batch_clips(clips, idx)
        val = cd_train_step(student, teacher, z, ctrl, ids, grid, opt_cfg, opt_state, rng, ablate_recycle)
        losses.append(val)
        if log is not None and (step_i % 20 == 0 or step_i == steps - 1):
            log(f"{step_i},{val:.6f}")
    opt_cfg.learning_rate = base_lr
    return losses
