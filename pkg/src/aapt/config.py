"""Flat key=value run configuration.

One text format for every stage: `key = value` lines, '#' comments, unknown
keys rejected. Every run echoes the fully resolved config next to its
outputs so runs diff cleanly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .backbone import BackboneConfig
from .codec import CodecConfig
from .optim import OptimizerConfig
from .stage_adversarial import AdversarialConfig


@dataclass
class RunConfig:
    seed: int = 0
    stage: str = "full"

    # world / data
    frame_h: int = 32
    frame_w: int = 32
    clip_frames: int = 17
    corpus_episodes: int = 48
    val_episodes: int = 8
    profiles: str = "gentle,roam,brisk"
    outlier_threshold: float = 6.0

    # codec
    temporal_factor: int = 4
    spatial_factor: int = 4
    latent_channels: int = 8
    decoder_channels: str = "16,32,64,64"
    residual_blocks_per_scale: int = 2
    kl_weight: float = 1e-6
    codec_steps: int = 1100
    codec_clip_frames: int = 9
    codec_lr: float = 1.5e-3
    codec_warmup: int = 25

    # backbone
    model_dim: int = 128
    layers: int = 4
    heads: int = 4
    prompt_tokens: int = 4
    num_prompt_classes: int = 4
    window_N: int = 8
    temporal_rope_interval: float = 1.0
    mlp_ratio: int = 4
    inference_timestep: float = 1.0
    control_dim: int = 6

    # stage 1: diffusion adaptation
    shift_s: float = 24.0
    s1_steps: int = 1600
    s1_batch: int = 4
    s1_lr: float = 7e-4
    s1_warmup: int = 250
    weight_decay: float = 0.01

    # stage 2: consistency distillation
    cd_grid_k: int = 32
    s2_steps: int = 300
    s2_batch: int = 4
    s2_lr: float = 1e-4

    # stage 3: adversarial
    s3_rounds: int = 200
    s3_batch: int = 2
    s3_lr: float = 1e-4
    s3_d_lr: float = 1e-3
    s3_d_steps: int = 1
    s3_long_lr: float = 3e-4
    sigma_perturb: float = 0.1
    lambda_reg: float = 1000.0
    segment_len_frames: int = 4
    overlap_frames: int = 1
    extensions: int = 3
    detach_recycled: bool = True
    rmsprop_alpha: float = 0.9
    extension_profile: str = "roam"

    # service
    port: int = 8765
    target_fps: float = 4.0

    def codec_config(self) -> CodecConfig:
        return CodecConfig(
            temporal_factor=self.temporal_factor,
            spatial_factor=self.spatial_factor,
            latent_channels=self.latent_channels,
            decoder_channels=[int(c) for c in self.decoder_channels.split(",")],
            residual_blocks_per_scale=self.residual_blocks_per_scale,
            kl_weight=self.kl_weight,
        )

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            model_dim=self.model_dim,
            layers=self.layers,
            heads=self.heads,
            prompt_tokens=self.prompt_tokens,
            num_prompt_classes=self.num_prompt_classes,
            latent_channels=self.latent_channels,
            latent_h=self.frame_h // self.spatial_factor,
            latent_w=self.frame_w // self.spatial_factor,
            window_N=self.window_N,
            temporal_rope_interval=self.temporal_rope_interval,
            mlp_ratio=self.mlp_ratio,
            inference_timestep=self.inference_timestep,
            control_dim=self.control_dim,
            patch_px=self.spatial_factor,
        )

    def adversarial_config(self) -> AdversarialConfig:
        return AdversarialConfig(
            sigma_perturb=self.sigma_perturb,
            lambda_reg=self.lambda_reg,
            segment_len_frames=self.segment_len_frames,
            overlap_frames=self.overlap_frames,
            extensions=self.extensions,
            detach_recycled=self.detach_recycled,
            extension_profile=self.extension_profile,
            d_steps=self.s3_d_steps,
        )

    def adamw(self, lr: float) -> OptimizerConfig:
        return OptimizerConfig(kind="adamw", learning_rate=lr, weight_decay=self.weight_decay)

    def rmsprop(self, lr: float) -> OptimizerConfig:
        return OptimizerConfig(kind="rmsprop", learning_rate=lr, weight_decay=0.0, alpha=self.rmsprop_alpha)

    def to_text(self) -> str:
        lines = ["# resolved run configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(raw: str, target_type):
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return target_type(raw)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(cfg, f.name)) for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(raw, types[key]))
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read(), base)
