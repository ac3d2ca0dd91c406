"""AdamW and RMSProp parameter updates.

Both operate on named parameter dicts ({name: Tensor}) and keep their
running moments in a plain state dict so checkpointing stays trivial.
Updates are deterministic given identical inputs and state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, Tensor


@dataclass
class OptimizerConfig:
    kind: str = "adamw"  # adamw | rmsprop
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    alpha: float = 0.9  # rmsprop second-moment smoothing
    beta1: float = 0.9
    beta2: float = 0.999
    eps_num: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.alpha < 1):
            raise ValueError("alpha must be in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def init_state(params: dict[str, Tensor]) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros(p.shape, dtype=DTYPE) for k, p in params.items()},
        "v": {k: np.zeros(p.shape, dtype=DTYPE) for k, p in params.items()},
    }


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict, cfg: OptimizerConfig) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    if cfg.kind != "adamw":
        raise ValueError(f"adamw_step called with kind={cfg.kind}")
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape, dtype=DTYPE)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        m = state["m"][name]
        v = state["v"][name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data *= DTYPE(1.0 - cfg.learning_rate * cfg.weight_decay)
        p.data -= (cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps_num)).astype(DTYPE)


def rmsprop_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict, cfg: OptimizerConfig) -> None:
    """s <- alpha*s + (1-alpha)*g^2; p <- p - lr * g / (sqrt(s) + eps). No momentum."""
    if cfg.kind != "rmsprop":
        raise ValueError(f"rmsprop_step called with kind={cfg.kind}")
    state["step"] += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        s = state["v"][name]
        s *= cfg.alpha
        s += (1.0 - cfg.alpha) * g * g
        p.data -= (cfg.learning_rate * g / (np.sqrt(s) + cfg.eps_num)).astype(DTYPE)


def cosine_lr(step: int, total: int, base: float, warmup: int = 0, min_frac: float = 0.05) -> float:
    """Linear warmup then cosine decay to min_frac*base."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    t = min(max(step - warmup, 0) / span, 1.0)
    return base * (min_frac + (1.0 - min_frac) * 0.5 * (1.0 + np.cos(np.pi * t)))


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.grad for k, p in params.items() if p.grad is not None}


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()
