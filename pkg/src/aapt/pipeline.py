"""End-to-end desk pipeline: corpus -> codec -> diffusion adaptation ->
consistency distillation -> adversarial post-training -> evaluation.

Artifacts land in a working directory (checkpoints, loss logs, resolved
config); every ensure_* step loads an existing artifact instead of
retraining, so a directory acts as a build cache keyed by its config.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import engine, evalharness, stage_adversarial as adv, stage_consistency as cd, stage_diffusion as sd, world
from .backbone import Backbone
from .checkpoint import load_checkpoint, require_stage, save_checkpoint
from .codec import Codec, psnr, train_codec
from .config import RunConfig
from .dataset import LatentClip, prepare_clips
from .nn import clone_values, load_params
from .tensor import Tensor


@dataclass
class Artifacts:
    workdir: str

    def path(self, name: str) -> str:
        return os.path.join(self.workdir, name)

    def __post_init__(self):
        os.makedirs(self.workdir, exist_ok=True)


def _append_log(path, line):
    with open(path, "a") as f:
        f.write(line + "\n")


def write_resolved_config(cfg: RunConfig, art: Artifacts) -> None:
    with open(art.path("config.resolved"), "w") as f:
        f.write(cfg.to_text())


# -- corpus ---------------------------------------------------------------------


def ensure_corpus(cfg: RunConfig, art: Artifacts):
    """Episodes + manifest + control scale stats. Episodes regenerate from the
    manifest deterministically; only the manifest is stored."""
    manifest = art.path("manifest.txt")
    profiles = cfg.profiles.split(",")
    if not os.path.exists(manifest):
        entries = []
        for i in range(cfg.corpus_episodes + cfg.val_episodes):
            seed = cfg.seed * 100_003 + i
            entries.append((seed, cfg.clip_frames, profiles[i % len(profiles)]))
        world.write_manifest(manifest, entries)
    clips = world.clips_from_manifest(manifest, cfg.frame_h, cfg.frame_w)
    train, val = clips[: cfg.corpus_episodes], clips[cfg.corpus_episodes :]
    stats = world.compute_scale_stats(
        [c.trajectory for c in train], cfg.temporal_factor, cfg.outlier_threshold
    )
    return train, val, stats


# -- codec ----------------------------------------------------------------------


def _codec_windows(clips, window_frames: int, tf: int):
    """Short pixel windows cut from episodes for codec training."""
    out = []
    for clip in clips:
        T_ = clip.pixels.shape[0]
        for start in range(0, T_ - window_frames + 1, tf):
            out.append(SimpleNamespace(pixels=clip.pixels[start : start + window_frames]))
    return out


def ensure_codec(cfg: RunConfig, art: Artifacts, clips) -> Codec:
    path = art.path("codec.ckpt")
    ccfg = cfg.codec_config()
    if os.path.exists(path):
        values, config = require_stage(path, "codec")
        codec = Codec(ccfg, seed=cfg.seed)
        load_params(codec.params(), values)
        codec.latent_mean = np.asarray(config["latent_mean"], dtype=np.float32)
        codec.latent_std = np.asarray(config["latent_std"], dtype=np.float32)
        return codec
    windows = _codec_windows(clips, cfg.codec_clip_frames, cfg.temporal_factor)
    log_path = art.path("losses_codec.csv")
    codec = train_codec(
        windows,
        ccfg,
        cfg.adamw(cfg.codec_lr),
        steps=cfg.codec_steps,
        seed=cfg.seed,
        log=lambda line: _append_log(log_path, line),
        warmup=cfg.codec_warmup,
    )
    snapshot = cfg.to_dict()
    snapshot["latent_mean"] = codec.latent_mean.tolist()
    snapshot["latent_std"] = codec.latent_std.tolist()
    save_checkpoint(path, clone_values(codec.params()), "codec", snapshot)
    return codec


def codec_psnr(codec: Codec, clips) -> float:
    vals = []
    for clip in clips:
        recon = codec.decode(codec.encode(clip.pixels))
        vals.append(psnr(recon, clip.pixels))
    return float(np.mean(vals))


# -- stages ---------------------------------------------------------------------


def _new_backbone(cfg: RunConfig, stats: world.ScaleStats | None = None) -> Backbone:
    bb = Backbone(cfg.backbone_config(), seed=cfg.seed)
    if stats is not None:
        bb.cfg.control_std = tuple(float(s) for s in stats.std)
    return bb


def _save_backbone(path, model: Backbone, stage: str, cfg: RunConfig, stats: world.ScaleStats, extra=None):
    snapshot = cfg.to_dict()
    snapshot["scale_stats"] = stats.to_dict()
    if extra:
        snapshot.update(extra)
    save_checkpoint(path, clone_values(model.params()), stage, snapshot)


def load_backbone(path, expected_stage: str, cfg: RunConfig | None = None):
    values, stage, config = load_checkpoint(path)
    if stage != expected_stage:
        from .checkpoint import CheckpointError

        raise CheckpointError(f"{path} carries stage tag {stage!r}, need {expected_stage!r}")
    run_cfg = cfg or RunConfig(**{k: v for k, v in config.items() if k in RunConfig().to_dict()})
    stats = world.ScaleStats.from_dict(config["scale_stats"])
    model = Backbone(run_cfg.backbone_config(), seed=run_cfg.seed)
    model.cfg.control_std = tuple(float(s) for s in stats.std)
    load_params(model.params(), values)
    return model, stats, run_cfg


def ensure_latent_clips(cfg: RunConfig, codec: Codec, clips, stats) -> list[LatentClip]:
    return prepare_clips(clips, codec, stats, keep_pixels=False)


def ensure_stage1(cfg: RunConfig, art: Artifacts, codec, train_lat, val_lat, stats, ablate_recycle=False) -> Backbone:
    path = art.path("stage1.ckpt")
    if os.path.exists(path):
        model, _, _ = load_backbone(path, "stage1", cfg)
        return model
    model = _new_backbone(cfg, stats)
    sched = sd.TimestepSchedule(s=cfg.shift_s)
    log_path = art.path("losses_stage1.csv")
    history = sd.train(
        model,
        train_lat,
        steps=cfg.s1_steps,
        batch_size=cfg.s1_batch,
        sched=sched,
        opt_cfg=cfg.adamw(cfg.s1_lr),
        seed=cfg.seed,
        log=lambda line: _append_log(log_path, line),
        val_clips=val_lat,
        val_every=100,
        ablate_recycle=ablate_recycle,
        warmup=cfg.s1_warmup,
    )
    _save_backbone(path, model, "stage1", cfg, stats, extra={"val_history": {str(k): v for k, v in history.items()}})
    return model


def stage1_val_history(art: Artifacts) -> dict:
    _, _, config = load_checkpoint(art.path("stage1.ckpt"))
    return {int(k): v for k, v in config.get("val_history", {}).items()}


def ensure_stage2(cfg: RunConfig, art: Artifacts, stats, train_lat, ablate_recycle=False) -> Backbone:
    path = art.path("stage2.ckpt")
    if os.path.exists(path):
        model, _, _ = load_backbone(path, "stage2", cfg)
        return model
    teacher_values, _ = require_stage(art.path("stage1.ckpt"), "stage1")
    teacher = _new_backbone(cfg, stats)
    load_params(teacher.params(), teacher_values)
    student = _new_backbone(cfg, stats)
    load_params(student.params(), teacher_values)  # init from stage-1 weights
    grid = cd.build_step_grid(cfg.cd_grid_k, cfg.shift_s)
    log_path = art.path("losses_stage2.csv")
    cd.train(
        student,
        teacher,
        train_lat,
        steps=cfg.s2_steps,
        batch_size=cfg.s2_batch,
        grid=grid,
        opt_cfg=cfg.adamw(cfg.s2_lr),
        seed=cfg.seed,
        log=lambda line: _append_log(log_path, line),
        ablate_recycle=ablate_recycle,
    )
    _save_backbone(path, student, "stage2", cfg, stats)
    return student


def ensure_stage3(
    cfg: RunConfig,
    art: Artifacts,
    stats,
    train_lat,
    mode: str = "student",
    tag: str = "stage3",
    ablate_recycle: bool = False,
) -> Backbone:
    path = art.path(f"{tag}.ckpt")
    if os.path.exists(path):
        model, _, _ = load_backbone(path, "stage3", cfg)
        return model
    gen_values, _ = require_stage(art.path("stage2.ckpt"), "stage2")
    disc_values, _ = require_stage(art.path("stage1.ckpt"), "stage1")
    gen = _new_backbone(cfg, stats)
    load_params(gen.params(), gen_values)  # generator from consistency-distilled weights
    disc = adv.Discriminator(cfg.backbone_config(), seed=cfg.seed + 1)
    disc.backbone.cfg.control_std = tuple(float(s) for s in stats.std)
    disc.init_from_stage1(disc_values)  # discriminator from diffusion-adaptation weights
    acfg = cfg.adversarial_config()
    acfg.ablate_recycle = ablate_recycle
    lr = cfg.s3_long_lr if mode == "long" else cfg.s3_lr
    log_path = art.path(f"losses_{tag}.csv")
    records = adv.train_adversarial(
        gen,
        disc,
        train_lat,
        stats,
        acfg,
        cfg.rmsprop(lr),
        rounds=cfg.s3_rounds,
        temporal_factor=cfg.temporal_factor,
        batch_size=cfg.s3_batch,
        seed=cfg.seed,
        mode=mode,
        log=lambda line: _append_log(log_path, line),
        d_opt_cfg=cfg.rmsprop(cfg.s3_d_lr),
    )
    if not all(np.isfinite([r.g_loss for r in records])):
        raise FloatingPointError("stage 3 produced non-finite losses")
    _save_backbone(path, gen, "stage3", cfg, stats, extra={"mode": mode})
    return gen


# -- inference and evaluation ------------------------------------------------------


def generate_video(
    cfg: RunConfig,
    model: Backbone,
    codec: Codec,
    stats: world.ScaleStats,
    world_seed: int,
    trajectory: world.Trajectory,
    session_seed: int = 0,
    ablate_recycle: bool = False,
):
    """Stream-generate under a pixel-frame trajectory; returns (pixels incl.
    frame 0, latents, session)."""
    first = world.quantize_pixels(
        world.render_world(world_seed, world.Trajectory(trajectory.initial, []), 1, cfg.frame_h, cfg.frame_w)[0]
    )
    session = engine.open_session(
        first.astype(np.float32),
        world.scene_class(world_seed),
        model,
        codec,
        stats,
        seed=session_seed,
        ablate_recycle=ablate_recycle,
    )
    chunk_raw = world.chunk_controls(trajectory, cfg.temporal_factor)
    latents = engine.generate_clip(session, chunk_raw)
    st = codec.open_decoder()
    z0 = codec.encode(first[None])[0]
    frames = [codec.decode_stream(z0, st)[0]]
    for k in range(latents.shape[0]):
        frames.append(codec.decode_stream(latents[k], st)[0])
    pixels = np.concatenate(frames, axis=0)
    return pixels, latents, session


def eval_drift(cfg, model, codec, stats, world_seed, profile: str, horizon_steps: int, session_seed=0, ablate_recycle=False):
    frames = 1 + horizon_steps * cfg.temporal_factor
    traj = world.trajectory_for_episode(world_seed, frames, profile)
    gen_pixels, _, session = generate_video(
        cfg, model, codec, stats, world_seed, traj, session_seed, ablate_recycle
    )
    truth = world.quantize_pixels(world.render_world(world_seed, traj, frames, cfg.frame_h, cfg.frame_w))
    curve = evalharness.drift_metric(gen_pixels, truth)
    return curve, gen_pixels, truth, session


def evaluate_model(cfg: RunConfig, model, codec, stats, seeds=(901, 902, 903), profile="roam", horizon_steps=None) -> evalharness.EvalReport:
    horizon = horizon_steps or (cfg.clip_frames - 1) // cfg.temporal_factor
    drifts = []
    gen_feats = []
    real_feats = []
    motions = []
    nfe = 0
    for ws in seeds:
        curve, gen_px, truth, session = eval_drift(cfg, model, codec, stats, ws, profile, horizon)
        drifts.append(curve)
        gen_feats.append(evalharness.pooled_patch_features(gen_px))
        real_feats.append(evalharness.pooled_patch_features(truth))
        motions.append(evalharness.motion_magnitude(gen_px))
        nfe += session.nfe_counter
    mse = np.mean([c.mse for c in drifts], axis=0)
    dev = np.mean([c.mean_dev for c in drifts], axis=0)
    frech = evalharness.gaussian_frechet(np.concatenate(gen_feats), np.concatenate(real_feats))
    return evalharness.EvalReport(
        drift=evalharness.DriftCurve(mse=mse, mean_dev=dev),
        frechet=frech,
        control_err={},
        motion_mag=float(np.mean(motions)),
        nfe=nfe,
    )


# -- full pipeline and ablations -----------------------------------------------------


def full_pipeline(cfg: RunConfig, workdir: str, mode: str = "student") -> dict:
    art = Artifacts(workdir)
    write_resolved_config(cfg, art)
    train, val, stats = ensure_corpus(cfg, art)
    codec = ensure_codec(cfg, art, train)
    train_lat = ensure_latent_clips(cfg, codec, train, stats)
    val_lat = ensure_latent_clips(cfg, codec, val, stats)
    ensure_stage1(cfg, art, codec, train_lat, val_lat, stats)
    ensure_stage2(cfg, art, stats, train_lat)
    ensure_stage3(cfg, art, stats, train_lat, mode=mode)
    return {
        "workdir": workdir,
        "codec": art.path("codec.ckpt"),
        "stage1": art.path("stage1.ckpt"),
        "stage2": art.path("stage2.ckpt"),
        "stage3": art.path("stage3.ckpt"),
    }


def ablation_config(base: RunConfig) -> RunConfig:
    """Reduced footprint for paired ablation runs; directions, not quality."""
    cfg = RunConfig(**base.to_dict())
    cfg.model_dim = 64
    cfg.layers = 3
    cfg.window_N = 4
    cfg.clip_frames = 13
    cfg.corpus_episodes = 24
    cfg.val_episodes = 4
    cfg.codec_steps = 400
    cfg.s1_steps = 350
    cfg.s2_steps = 120
    cfg.s3_rounds = 60
    cfg.segment_len_frames = 3
    cfg.extensions = 2
    return cfg


def run_ablation(kind: str, cfg: RunConfig, workdir: str | None = None) -> dict:
    """Paired desk run for one ablation kind at cfg.seed; returns reports,
    per-arm summary metrics, and whether the paper's direction holds."""
    import json

    workdir = workdir or f"runs/ablation-{kind}-seed{cfg.seed}"
    art = Artifacts(workdir)
    cache = art.path(f"ablation_{kind}.json")
    if os.path.exists(cache):
        with open(cache) as f:
            return json.load(f)
    write_resolved_config(cfg, art)
    train, val, stats = ensure_corpus(cfg, art)
    codec = ensure_codec(cfg, art, train)
    train_lat = ensure_latent_clips(cfg, codec, train, stats)
    val_lat = ensure_latent_clips(cfg, codec, val, stats)
    ensure_stage1(cfg, art, codec, train_lat, val_lat, stats)
    ensure_stage2(cfg, art, stats, train_lat)
    baseline = ensure_stage3(cfg, art, stats, train_lat, mode="student", tag="stage3")

    train_horizon = (cfg.clip_frames - 1) // cfg.temporal_factor
    eval_seeds = [7001 + i for i in range(3)]

    def drift_at(model, horizon, ablate=False):
        finals = []
        for ws in eval_seeds:
            curve, _, _, _ = eval_drift(cfg, model, codec, stats, ws, "roam", horizon, ablate_recycle=ablate)
            finals.append(curve.mse[-1])
        return float(np.mean(finals))

    def motion_of(model, ablate=False):
        vals = []
        for ws in eval_seeds:
            _, gen_px, _, _ = eval_drift(cfg, model, codec, stats, ws, "roam", train_horizon, ablate_recycle=ablate)
            vals.append(evalharness.motion_magnitude(gen_px))
        return float(np.mean(vals))

    if kind == "teacher_forcing":
        variant = ensure_stage3(cfg, art, stats, train_lat, mode="teacher", tag="stage3_teacher")
        base_m = drift_at(baseline, 2 * train_horizon)
        var_m = drift_at(variant, 2 * train_horizon)
        direction = base_m < var_m  # student forcing drifts less
        label = "drift_2x_horizon"
    elif kind == "short_training":
        variant = ensure_stage3(cfg, art, stats, train_lat, mode="long", tag="stage3_long")
        base_m = drift_at(variant, 4 * train_horizon)  # long-video-trained
        var_m = drift_at(baseline, 4 * train_horizon)  # short-trained
        direction = base_m < var_m
        label = "drift_4x_horizon"
    elif kind == "no_recycle":
        sub = Artifacts(os.path.join(workdir, "no_recycle"))
        ensure_stage1(cfg, sub, codec, train_lat, val_lat, stats, ablate_recycle=True)
        ensure_stage2(cfg, sub, stats, train_lat, ablate_recycle=True)
        variant = ensure_stage3(cfg, sub, stats, train_lat, mode="student", tag="stage3", ablate_recycle=True)
        base_m = motion_of(baseline)
        var_m = motion_of(variant, ablate=True)
        direction = var_m < base_m  # masked recycling cannot produce large motion
        label = "motion_magnitude"
    else:
        raise ValueError(f"unknown ablation {kind}")

    table = (
        f"ablation={kind} seed={cfg.seed} metric={label}\n"
        f"baseline={base_m:.6f}\nvariant={var_m:.6f}\ndirection_holds={direction}\n"
    )
    with open(art.path(f"ablation_{kind}.txt"), "w") as f:
        f.write(table)
    result = {
        "kind": kind,
        "metric": label,
        "baseline": base_m,
        "variant": var_m,
        "direction_holds": bool(direction),
        "table": table,
    }
    with open(cache, "w") as f:
        json.dump(result, f)
    return result
