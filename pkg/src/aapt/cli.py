"""Command-line entry points tying the stages together.

Stages gate on checkpoint provenance: distill needs a stage1 checkpoint,
advtrain needs stage2 (generator init) plus stage1 (discriminator init).
Wrong provenance exits 2, missing files exit 1. Every run echoes its
resolved config into the output directory.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys

import numpy as np

from . import engine, evalharness, pipeline as pl, service, world
from .checkpoint import CheckpointError
from .config import RunConfig, load_config

EXIT_MISSING = 1
EXIT_PROVENANCE = 2


def _load_cfg(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        if not os.path.exists(args.config):
            print(f"config not found: {args.config}", file=sys.stderr)
            sys.exit(EXIT_MISSING)
        cfg = load_config(args.config, cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _art(args, cfg) -> pl.Artifacts:
    art = pl.Artifacts(args.out)
    pl.write_resolved_config(cfg, art)
    return art


def _require(path: str):
    if not os.path.exists(path):
        print(f"missing checkpoint: {path}", file=sys.stderr)
        sys.exit(EXIT_MISSING)


def _copy_losses(art: pl.Artifacts, name: str):
    src = art.path(name)
    if os.path.exists(src):
        shutil.copyfile(src, art.path("losses.csv"))


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    art = _art(args, cfg)
    train, val, stats = pl.ensure_corpus(cfg, art)
    ep_dir = art.path("episodes")
    os.makedirs(ep_dir, exist_ok=True)
    for clip in train[:4]:
        world.write_episode(os.path.join(ep_dir, f"ep{clip.seed}.bin"), clip, include_pixels=True)
    with open(art.path("report.txt"), "w") as f:
        f.write(f"train_episodes={len(train)}\nval_episodes={len(val)}\n")
        f.write("".join(f"control_std_{c}={v:.6f}\n" for c, v in zip("xyzr", stats.std)))
    print(f"corpus ready: {len(train)} train / {len(val)} val episodes under {args.out}")
    return 0


def cmd_train_codec(args):
    cfg = _load_cfg(args)
    art = _art(args, cfg)
    train, val, _ = pl.ensure_corpus(cfg, art)
    codec = pl.ensure_codec(cfg, art, train)
    _copy_losses(art, "losses_codec.csv")
    val_psnr = pl.codec_psnr(codec, val)
    with open(art.path("report.txt"), "w") as f:
        f.write(f"val_psnr_db={val_psnr:.3f}\n")
    print(f"codec trained: validation PSNR {val_psnr:.2f} dB")
    return 0


def cmd_adapt(args):
    cfg = _load_cfg(args)
    art = _art(args, cfg)
    _require(art.path("codec.ckpt"))
    train, val, stats = pl.ensure_corpus(cfg, art)
    try:
        codec = pl.ensure_codec(cfg, art, train)
        train_lat = pl.ensure_latent_clips(cfg, codec, train, stats)
        val_lat = pl.ensure_latent_clips(cfg, codec, val, stats)
        pl.ensure_stage1(cfg, art, codec, train_lat, val_lat, stats)
    except CheckpointError as e:
        print(str(e), file=sys.stderr)
        return EXIT_PROVENANCE
    _copy_losses(art, "losses_stage1.csv")
    hist = pl.stage1_val_history(art)
    with open(art.path("report.txt"), "w") as f:
        for step, mse in sorted(hist.items()):
            f.write(f"val_mse_step{step}={mse:.6f}\n")
    print("stage 1 (diffusion adaptation) complete")
    return 0


def cmd_distill(args):
    cfg = _load_cfg(args)
    art = _art(args, cfg)
    _require(art.path("stage1.ckpt"))
    train, val, stats = pl.ensure_corpus(cfg, art)
    try:
        codec = pl.ensure_codec(cfg, art, train)
        train_lat = pl.ensure_latent_clips(cfg, codec, train, stats)
        pl.ensure_stage2(cfg, art, stats, train_lat)
    except CheckpointError as e:
        print(str(e), file=sys.stderr)
        return EXIT_PROVENANCE
    _copy_losses(art, "losses_stage2.csv")
    print("stage 2 (consistency distillation) complete")
    return 0


def cmd_advtrain(args):
    cfg = _load_cfg(args)
    art = _art(args, cfg)
    _require(art.path("stage2.ckpt"))
    _require(art.path("stage1.ckpt"))
    train, val, stats = pl.ensure_corpus(cfg, art)
    try:
        codec = pl.ensure_codec(cfg, art, train)
        train_lat = pl.ensure_latent_clips(cfg, codec, train, stats)
        pl.ensure_stage3(cfg, art, stats, train_lat, mode=args.mode)
    except CheckpointError as e:
        print(str(e), file=sys.stderr)
        return EXIT_PROVENANCE
    _copy_losses(art, "losses_stage3.csv")
    print(f"stage 3 (adversarial, {args.mode}) complete")
    return 0


def _load_generator(args, cfg):
    ckpt = args.checkpoint or os.environ.get("AAPT_CHECKPOINT") or os.path.join(args.out, "stage3.ckpt")
    _require(ckpt)
    for stage in ("stage3", "stage2", "stage1"):
        try:
            return pl.load_backbone(ckpt, stage, None) + (ckpt,)
        except CheckpointError:
            continue
    print(f"{ckpt} is not a generator checkpoint", file=sys.stderr)
    sys.exit(EXIT_PROVENANCE)


def _load_codec_for(args, run_cfg):
    path = os.path.join(args.out, "codec.ckpt")
    if not os.path.exists(path) and args.checkpoint:
        path = os.path.join(os.path.dirname(args.checkpoint), "codec.ckpt")
    _require(path)
    from .checkpoint import require_stage
    from .codec import Codec
    from .nn import load_params

    values, config = require_stage(path, "codec")
    codec = Codec(run_cfg.codec_config(), seed=run_cfg.seed)
    load_params(codec.params(), values)
    codec.latent_mean = np.asarray(config["latent_mean"], dtype=np.float32)
    codec.latent_std = np.asarray(config["latent_std"], dtype=np.float32)
    return codec


def cmd_generate(args):
    cfg = _load_cfg(args)
    (model, stats, run_cfg), ckpt = _split_loaded(_load_generator(args, cfg))
    art = _art(args, run_cfg)
    codec = _load_codec_for(args, run_cfg)
    steps = (args.frames - 1) // run_cfg.temporal_factor if args.frames else 4
    frames = 1 + steps * run_cfg.temporal_factor
    traj = world.trajectory_for_episode(args.world_seed, frames, args.profile)
    pixels, latents, session = pl.generate_video(run_cfg, model, codec, stats, args.world_seed, traj, session_seed=cfg.seed)
    with open(art.path("frames.bin"), "wb") as f:
        for i, frame in enumerate(pixels):
            f.write(service.pack_frame(i, service.to_rgb8(frame)))
    truth = world.quantize_pixels(world.render_world(args.world_seed, traj, frames, run_cfg.frame_h, run_cfg.frame_w))
    curve = evalharness.drift_metric(pixels, truth)
    with open(art.path("report.txt"), "w") as f:
        f.write(f"frames={pixels.shape[0]}\nnfe={session.nfe_counter}\n")
        f.write(f"drift_final_mse={curve.mse[-1]:.6f}\n")
    print(f"generated {pixels.shape[0]} frames ({session.nfe_counter} NFE) -> {art.path('frames.bin')}")
    return 0


def _split_loaded(loaded):
    model, stats, run_cfg, ckpt = loaded
    return (model, stats, run_cfg), ckpt


def cmd_bench(args):
    cfg = _load_cfg(args)
    (model, stats, run_cfg), _ = _split_loaded(_load_generator(args, cfg))
    art = _art(args, run_cfg)
    z0 = np.zeros((run_cfg.latent_channels, run_cfg.frame_h // run_cfg.spatial_factor, run_cfg.frame_w // run_cfg.spatial_factor), dtype=np.float32)
    session = engine.open_session(z0, 0, model, None, stats, seed=cfg.seed)
    steps = args.frames or 10 * run_cfg.window_N
    report = engine.bench(session, steps)
    with open(art.path("report.txt"), "w") as f:
        f.write(engine.format_report(report))
    print(engine.format_report(report), end="")
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    art = _art(args, cfg)
    if args.ablation:
        result = pl.run_ablation(args.ablation, cfg, workdir=args.out)
        with open(art.path("report.txt"), "w") as f:
            f.write(result["table"])
        print(result["table"], end="")
        return 0
    (model, stats, run_cfg), _ = _split_loaded(_load_generator(args, cfg))
    codec = _load_codec_for(args, run_cfg)
    report = pl.evaluate_model(run_cfg, model, codec, stats)
    with open(art.path("report.txt"), "w") as f:
        f.write(report.to_text())
    with open(art.path("drift.csv"), "w") as f:
        f.write(report.drift_csv())
    print(report.to_text(), end="")
    return 0


def cmd_serve(args):
    cfg = _load_cfg(args)
    (model, stats, run_cfg), _ = _split_loaded(_load_generator(args, cfg))
    codec = _load_codec_for(args, run_cfg)
    ctx = service.ServiceContext(
        backbone=model,
        codec=codec,
        stats=stats,
        frame_h=run_cfg.frame_h,
        frame_w=run_cfg.frame_w,
        temporal_factor=run_cfg.temporal_factor,
        target_fps=args.fps or run_cfg.target_fps,
    )
    port = args.port or run_cfg.port
    print(f"serving on ws://127.0.0.1:{port}")
    service.serve(ctx, port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aapt", description="causal one-pass-per-frame video generator, desk scale")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/default", help="artifact directory")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic corpus").set_defaults(fn=cmd_gen_data)
    sub.add_parser("train-codec", help="train the causal video autoencoder").set_defaults(fn=cmd_train_codec)
    sub.add_parser("adapt", help="stage 1: diffusion adaptation").set_defaults(fn=cmd_adapt)
    sub.add_parser("distill", help="stage 2: consistency distillation").set_defaults(fn=cmd_distill)
    padv = sub.add_parser("advtrain", help="stage 3: adversarial post-training")
    padv.add_argument("--mode", choices=("student", "teacher", "long"), default="student")
    padv.set_defaults(fn=cmd_advtrain)

    pgen = sub.add_parser("generate", help="stream-generate a video")
    pgen.add_argument("--frames", type=int, default=17)
    pgen.add_argument("--world-seed", type=int, default=901)
    pgen.add_argument("--profile", default="roam", choices=sorted(world.MOTION_PROFILES))
    pgen.add_argument("--checkpoint", default=None)
    pgen.set_defaults(fn=cmd_generate)

    pbench = sub.add_parser("bench", help="latency/memory benchmark")
    pbench.add_argument("--frames", type=int, default=None)
    pbench.add_argument("--checkpoint", default=None)
    pbench.set_defaults(fn=cmd_bench)

    pev = sub.add_parser("eval", help="evaluation report or ablation pair")
    pev.add_argument("--ablation", choices=("no_recycle", "teacher_forcing", "short_training"), default=None)
    pev.add_argument("--checkpoint", default=None)
    pev.set_defaults(fn=cmd_eval)

    psrv = sub.add_parser("serve", help="interactive streaming service")
    psrv.add_argument("--port", type=int, default=None)
    psrv.add_argument("--fps", type=float, default=None)
    psrv.add_argument("--checkpoint", default=None)
    psrv.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
