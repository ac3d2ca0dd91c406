"""Latent-space training clips: codec-encoded episodes plus normalized
per-latent-step controls. Outlier-control episodes are dropped here."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import Codec
from .world import OutlierRejection, ScaleStats, TrainingClip, encode_camera


@dataclass
class LatentClip:
    latents: np.ndarray  # [M+1, C, h, w] normalized latent frames
    controls: np.ndarray  # [M, 4] normalized per-latent-step deltas
    controls_raw: np.ndarray  # [M, 4] raw units (for rendering ground truth)
    prompt_id: int
    seed: int
    pixels: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return self.controls.shape[0]


def prepare_clips(
    clips: list[TrainingClip],
    codec: Codec,
    stats: ScaleStats,
    keep_pixels: bool = False,
) -> list[LatentClip]:
    tf = codec.cfg.temporal_factor
    out = []
    dropped = 0
    for clip in clips:
        try:
            ctrl = encode_camera(clip.trajectory, stats, tf)
        except OutlierRejection:
            dropped += 1
            continue
        from .world import chunk_controls

        z = codec.encode(clip.pixels)
        out.append(
            LatentClip(
                latents=z,
                controls=ctrl,
                controls_raw=chunk_controls(clip.trajectory, tf),
                prompt_id=clip.prompt_id,
                seed=clip.seed,
                pixels=clip.pixels if keep_pixels else None,
            )
        )
    if not out:
        raise ValueError(f"all {dropped} clips rejected during preparation")
    return out


def batch_clips(clips: list[LatentClip], idx: list[int]):
    """Stack same-length clips into batch arrays (z, ctrl, prompt_ids)."""
    chosen = [clips[i] for i in idx]
    steps = {c.steps for c in chosen}
    if len(steps) != 1:
        raise ValueError("batch must hold clips of one length")
    z = np.stack([c.latents for c in chosen])
    ctrl = np.stack([c.controls for c in chosen])
    ids = np.array([c.prompt_id for c in chosen])
    return z, ctrl, ids
