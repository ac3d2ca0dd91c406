"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

The trained-pipeline criteria share a cached working directory (default
runs/acceptance under the repo root, override with AAPT_ACCEPT_DIR): the
first run trains the desk pipeline and the ablation pairs, later runs load
checkpoints and cached ablation results. Property criteria run on random
weights and are always fast.
"""

import asyncio
import json
import os
import time

import numpy as np
import pytest

from aapt import engine, evalharness as ev, pipeline as pl
from aapt import stage_adversarial as adv, stage_consistency as cd, stage_diffusion as sd
from aapt import tensor as T, world
from aapt.backbone import Backbone, BackboneConfig, FrameInput
from aapt.codec import Codec, CodecConfig
from aapt.config import RunConfig
from aapt.dataset import prepare_clips
from aapt.tensor import Tensor, backward, grad_check
from aapt.world import ScaleStats

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
ACCEPT_DIR = os.environ.get("AAPT_ACCEPT_DIR", os.path.join(REPO, "runs", "acceptance"))


def report(criterion: str, ok: bool, detail: str):
    print(f"\n[{criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"{criterion}: {detail}"


TINY = BackboneConfig(
    model_dim=16, layers=2, heads=2, prompt_tokens=2, num_prompt_classes=2,
    latent_channels=2, latent_h=2, latent_w=2, window_N=2,
)
TINY_CODEC = CodecConfig(temporal_factor=2, spatial_factor=4, latent_channels=4,
                         decoder_channels=[8, 12, 16, 16], residual_blocks_per_scale=1)
UNIT_STATS = ScaleStats(std=np.ones(4, dtype=np.float32))


def _rand_fis(cfg, B, n, seed, t=1.0):
    rng = np.random.default_rng(seed)
    return [
        FrameInput(
            noisy=rng.standard_normal((B, cfg.latent_channels, cfg.latent_h, cfg.latent_w)).astype(np.float32),
            recycled=rng.standard_normal((B, cfg.latent_channels, cfg.latent_h, cfg.latent_w)).astype(np.float32),
            control=rng.standard_normal((B, 4)).astype(np.float32) * 0.3,
            timestep=np.full(B, t, dtype=np.float32),
        )
        for _ in range(n)
    ]


# -- trained-pipeline fixtures -----------------------------------------------------


@pytest.fixture(scope="session")
def desk():
    cfg = RunConfig()
    art = pl.Artifacts(ACCEPT_DIR)
    pl.write_resolved_config(cfg, art)
    train, val, stats = pl.ensure_corpus(cfg, art)
    codec = pl.ensure_codec(cfg, art, train)
    train_lat = prepare_clips(train, codec, stats)
    val_lat = prepare_clips(val, codec, stats)
    s1 = pl.ensure_stage1(cfg, art, codec, train_lat, val_lat, stats)
    s2 = pl.ensure_stage2(cfg, art, stats, train_lat)
    s3 = pl.ensure_stage3(cfg, art, stats, train_lat, mode="student")
    return {
        "cfg": cfg, "art": art, "stats": stats, "codec": codec,
        "train": train, "val": val, "train_lat": train_lat, "val_lat": val_lat,
        "s1": s1, "s2": s2, "s3": s3,
    }


# -- criterion: causality ------------------------------------------------------------


def test_causality_suite():
    t0 = time.time()
    bb = Backbone(TINY, seed=0)
    fis = _rand_fis(TINY, 2, 5, seed=1, t=0.8)
    with T.no_grad():
        base, _ = bb.forward_parallel(fis, np.array([0, 1]))
    worst = 0.0
    for j in (2, 3, 4):
        tampered = list(fis)
        tampered[j] = FrameInput(
            np.asarray(fis[j].noisy) + 1.0, np.asarray(fis[j].recycled) - 1.0,
            fis[j].control + 2.0, fis[j].timestep,
        )
        with T.no_grad():
            out, _ = bb.forward_parallel(tampered, np.array([0, 1]))
        worst = max(worst, float(np.abs(out.data[:, :j] - base.data[:, :j]).max()))

    disc = adv.Discriminator(TINY, seed=1)
    rng = np.random.default_rng(2)
    frames = rng.standard_normal((1, 5, 2, 2, 2)).astype(np.float32)
    first = rng.standard_normal((1, 2, 2, 2)).astype(np.float32)
    ctrl = rng.standard_normal((1, 5, 4)).astype(np.float32)
    with T.no_grad():
        dbase = adv.disc_forward(disc, Tensor(frames), Tensor(first), ctrl, 0.4).per_frame_logits.data
    tampered = frames.copy()
    tampered[:, 3] += 1.0
    with T.no_grad():
        dout = adv.disc_forward(disc, Tensor(tampered), Tensor(first), ctrl, 0.4).per_frame_logits.data
    worst = max(worst, float(np.abs(dout[:, :3] - dbase[:, :3]).max()))

    codec = Codec(TINY_CODEC, seed=0)
    video = np.random.default_rng(3).uniform(0, 1, (7, 3, 16, 16)).astype(np.float32)
    z = codec.encode(video)
    tampered_v = video.copy()
    tampered_v[5:] += 0.5
    z2 = codec.encode(tampered_v)
    worst = max(worst, float(np.abs(z2[:3] - z[:3]).max()))
    dt = time.time() - t0
    report("causality", worst <= 1e-6 and dt < 60, f"max past-output change {worst:.2e}, {dt:.1f}s")


# -- criterion: KV parity --------------------------------------------------------------


def test_kv_parity():
    t0 = time.time()
    from aapt.engine import SessionCache

    cfg = TINY
    bb = Backbone(cfg, seed=3)
    fis = _rand_fis(cfg, 2, 8, seed=4, t=1.0)
    with T.no_grad():
        par, _ = bb.forward_parallel(fis, np.array([1, 0]))
        tensors = bb.open_cache(np.array([1, 0]), fis[0].timestep)
        cache = SessionCache(tensors, cfg.window_N, cfg.prompt_tokens, cfg.tokens_per_frame)
        cache.pending = 0
        outs = []
        for p, fi in enumerate(fis):
            o, _ = bb.forward_step(tensors, [fi], start_position=p)
            outs.append(o.data[:, 0])
            cache.mark_filled(p)
            cache.pending = p + 1
            cache.evict()
    diff = float(np.abs(par.data - np.stack(outs, axis=1)).max())

    rng = np.random.default_rng(5)
    z0 = rng.standard_normal((1, 2, 2, 2)).astype(np.float32)
    ctrl_raw = (rng.standard_normal((1, 6, 4)) * 0.5).astype(np.float32)
    frames, _ = adv.student_forcing_rollout(bb, z0, np.array([0]), ctrl_raw, UNIT_STATS, seeds=[123])
    s = engine.open_session_latents(z0, np.array([0]), bb, UNIT_STATS, seeds=[123])
    bitexact = True
    for p in range(6):
        ref = engine.step(s, ctrl_raw[:, p])
        bitexact = bitexact and np.array_equal(frames[p].data, ref)
    dt = time.time() - t0
    report("kv_parity", diff < 1e-4 and bitexact and dt < 60,
           f"replay max-abs {diff:.2e}, rollout bit-exact={bitexact}, {dt:.1f}s")


# -- criterion: 1 NFE per frame ----------------------------------------------------------


def test_one_nfe_law():
    bb = Backbone(TINY, seed=6)
    z0 = np.zeros((2, 2, 2), dtype=np.float32)
    s = engine.open_session(z0, 0, bb, None, UNIT_STATS, seed=1)
    engine.generate_clip(s, np.zeros((7, 4), dtype=np.float32))
    ok1 = s.nfe_counter == s.frame_counter == 7

    frames, sess = adv.student_forcing_rollout(
        bb, z0[None], np.array([0]), np.zeros((1, 5, 4), dtype=np.float32), UNIT_STATS, seeds=[2]
    )
    ok2 = sess.nfe_counter == sess.frame_counter == len(frames) == 5
    report("one_nfe_law", ok1 and ok2, f"engine 7/7, rollout 5/5 forwards per frame")


# -- criterion: cost model ----------------------------------------------------------------


def test_cost_model():
    model = engine.cost_model("recycle", 10, 64)
    df = engine.cost_model("diffusion_forcing", 10, 64)
    ratio_ideal = model["total"] / df["total"]

    bb = Backbone(BackboneConfig(
        model_dim=64, layers=3, heads=4, prompt_tokens=4, num_prompt_classes=2,
        latent_channels=4, latent_h=4, latent_w=4, window_N=8,
    ), seed=7)
    tok1, tok2, fl1, fl2 = engine.measured_step_cost(bb, None, UNIT_STATS, warm_frames=9)
    token_ratio = tok1 / tok2  # new-frame tokens computed; prompt excluded by construction
    flop_ratio = fl1 / fl2
    ok = abs(token_ratio - 0.5) <= 0.025 and abs(flop_ratio - 0.5) <= 0.05 and ratio_ideal == 0.5
    report("cost_model", ok,
           f"token ratio {token_ratio:.3f} (0.5 +- 5%), FLOP proxy {flop_ratio:.3f} (within 10%)")


# -- criterion: constant streaming cost -----------------------------------------------------


def test_constant_streaming_cost():
    cfg = BackboneConfig(
        model_dim=64, layers=3, heads=4, prompt_tokens=4, num_prompt_classes=2,
        latent_channels=4, latent_h=4, latent_w=4, window_N=4,
    )
    bb = Backbone(cfg, seed=8)
    N = cfg.window_N
    best = None
    for attempt in range(3):
        s = engine.open_session(np.zeros((4, 4, 4), dtype=np.float32), 0, bb, None, UNIT_STATS, seed=attempt)
        lat, mem = [], []
        for _ in range(10 * N):
            t0 = time.perf_counter()
            engine.generate_next(s, np.zeros(4, dtype=np.float32))
            lat.append((time.perf_counter() - t0) * 1e3)
            mem.append(s.cache.logical_bytes())
        early = float(np.mean(lat[2 * N : 3 * N]))
        late = float(np.mean(lat[9 * N :]))
        ratio = max(early, late) / min(early, late)
        mem_ok = mem[2 * N] == mem[-1]
        best = (ratio, mem_ok, early, late) if best is None or ratio < best[0] else best
        if ratio < 1.2 and mem_ok:
            break
    ratio, mem_ok, early, late = best
    report("constant_streaming_cost", ratio < 1.2 and mem_ok,
           f"latency 2N..3N {early:.1f}ms vs 9N..10N {late:.1f}ms (x{ratio:.2f}), cache bytes constant={mem_ok}")


# -- criterion: formula suite ------------------------------------------------------------------


def test_formula_suite():
    checks = []
    checks.append(abs(sd.shift_timestep(0.0, 24.0) - 0.0) <= 1e-6)
    checks.append(abs(sd.shift_timestep(1.0, 24.0) - 1.0) <= 1e-6)
    ts = np.linspace(0, 1, 257)
    checks.append(bool(np.all(np.diff(sd.shift_timestep(ts, 24.0)) > 0)))

    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((3, 4)).astype(np.float32)
    eps = rng.standard_normal((3, 4)).astype(np.float32)
    checks.append(float(np.abs(sd.make_noisy(x0, eps, 0.25) - (0.75 * x0 + 0.25 * eps)).max()) <= 1e-6)
    checks.append(float(np.abs(sd.velocity_target(x0, eps) - (eps - x0)).max()) <= 1e-6)

    zero = Tensor(np.zeros((1, 1), dtype=np.float32))
    one = Tensor(np.ones((1, 1), dtype=np.float32))
    checks.append(abs(float(adv.rpgan_loss(zero, zero, "generator").data) + np.log(2)) <= 1e-6)
    checks.append(abs(float(adv.rpgan_loss(one, zero, "discriminator").data) + np.log1p(np.e)) <= 1e-5)
    big = Tensor(np.full((1, 1), 40.0, dtype=np.float32))
    checks.append(abs(float(adv.rpgan_loss(big, zero, "generator").data)) <= 1e-6)
    fake = rng.standard_normal((2, 4)).astype(np.float32)
    real = rng.standard_normal((2, 4)).astype(np.float32)
    for side in ("generator", "discriminator"):
        a = adv.rpgan_loss(Tensor(fake), Tensor(real), side).data
        b = adv.rpgan_loss(Tensor(fake + 5.5), Tensor(real + 5.5), side).data
        checks.append(float(np.abs(a - b)) <= 1e-6)

    w = np.array([0.4, -0.8, 1.1], dtype=np.float32)

    def disc_fn(x):
        xt = x if isinstance(x, Tensor) else Tensor(x)
        return T.matmul(xt, Tensor(w)).reshape((1, 1))

    n = np.random.default_rng([0, 42]).standard_normal((1, 3)).astype(np.float32)
    got = float(adv.approx_r1(disc_fn, np.zeros((1, 3), dtype=np.float32), 0.1, 1000.0, np.random.default_rng([0, 42])).data)
    want = 1000.0 * 0.01 * float(w @ n[0]) ** 2
    checks.append(abs(got - want) / max(1.0, abs(want)) <= 1e-5)

    feats = np.random.default_rng(1).standard_normal((64, 5))
    d = np.array([0.3, -0.7, 0.1, 0.9, -0.2])
    checks.append(abs(ev.gaussian_frechet(feats, feats + d) - float((d**2).sum())) <= 1e-6 * max(1, (d**2).sum()))
    x = np.random.default_rng(2).standard_normal(400)
    x = (x - x.mean()) / x.std(ddof=1)
    checks.append(abs(ev.gaussian_frechet(x.reshape(-1, 1), (2 * x).reshape(-1, 1)) - 1.0) <= 1e-6)
    checks.append(ev.gaussian_frechet(feats, feats) <= 1e-8)

    report("formula_suite", all(checks), f"{sum(checks)}/{len(checks)} identities at 1e-6")


# -- criterion: gradient suite -------------------------------------------------------------------


def test_gradient_suite():
    t0 = time.time()
    errs = {}
    x = Tensor.param(np.array([0.7, -1.2, 0.4], dtype=np.float32))
    errs["elementwise"] = grad_check(lambda t: (T.silu(t) * T.exp(t * 0.3) + T.softplus(t)).sum(), x)
    errs["softmax_matmul"] = grad_check(
        lambda t: T.softmax(T.matmul(t.reshape((1, 3)), Tensor(np.eye(3, dtype=np.float32) * 1.5)), axis=-1)[0, 1], x
    )

    cfg = BackboneConfig(
        model_dim=8, layers=1, heads=2, prompt_tokens=1, num_prompt_classes=1,
        latent_channels=1, latent_h=1, latent_w=2, window_N=2,
    )
    bb = Backbone(cfg, seed=9)
    rng = np.random.default_rng(10)
    for blk in bb.blocks:
        blk.mod.w.data = rng.standard_normal(blk.mod.w.shape).astype(np.float32) * 0.3
    fis = _rand_fis(cfg, 1, 2, seed=11, t=0.6)
    target = rng.standard_normal((1, 2, 1, 1, 2)).astype(np.float32)

    def gen_loss(t):
        old = bb.blocks[0].qkv.w
        bb.blocks[0].qkv.w = t
        try:
            out, _ = bb.forward_parallel(fis, np.array([0]))
            d = out - target
            return (d * d).mean()
        finally:
            bb.blocks[0].qkv.w = old

    errs["generator_loss"] = grad_check(gen_loss, Tensor(bb.blocks[0].qkv.w.data.copy(), requires_grad=True))

    z0 = rng.standard_normal((1, 1, 1, 2)).astype(np.float32)
    ctrl = np.zeros((1, 3, 4), dtype=np.float32)

    def rollout_loss(t):
        old = bb.head.w
        bb.head.w = t
        try:
            frames, _ = adv.student_forcing_rollout(
                bb, z0, np.array([0]), ctrl, UNIT_STATS, seeds=[13], detach_recycled=False
            )
            total = frames[0].sum()
            for f in frames[1:]:
                total = total + f.sum()
            return total * 0.1
        finally:
            bb.head.w = old

    errs["rollout_3_frames"] = grad_check(rollout_loss, Tensor(bb.head.w.data.copy(), requires_grad=True))

    # exact zero probes: recycled detach and segment boundary
    frames, sess = adv.student_forcing_rollout(bb, z0, np.array([0]), ctrl, UNIT_STATS, seeds=[13], detach_recycled=True)
    backward(frames[2].sum() + frames[1].sum())
    zero_recycled = frames[0].grad is None
    for p in bb.params().values():
        p.zero_grad()
    seg1, sess = adv.student_forcing_rollout(bb, z0, np.array([0]), ctrl[:, :2], UNIT_STATS, seeds=[14])
    sess.cache.detach()
    sess.last_frame = sess.last_frame.detach()
    seg2, _ = adv.student_forcing_rollout(bb, None, np.array([0]), ctrl[:, :2], UNIT_STATS, seeds=[14], session=sess)
    backward(seg2[-1].sum())
    zero_boundary = all(f.grad is None for f in seg1)

    worst = max(errs.values())
    ok = worst < 1e-3 and zero_recycled and zero_boundary
    dt = time.time() - t0
    report("gradient_suite", ok,
           f"max rel err {worst:.2e} ({max(errs, key=errs.get)}), detach probes zero={zero_recycled and zero_boundary}, {dt:.0f}s")


# -- criterion: pipeline efficacy --------------------------------------------------------------------


def test_pipeline_efficacy(desk):
    cfg, art = desk["cfg"], desk["art"]
    hist = pl.stage1_val_history(art)
    hs = sorted(hist.items())
    ratio = hs[-1][1] / hist[100]
    stage1_ok = ratio < 0.5

    grid = cd.build_step_grid(cfg.cd_grid_k, cfg.shift_s)
    m1s, m2s = [], []
    for clip in desk["val_lat"][:6]:
        z, ctrl, ids = clip.latents[None], clip.controls[None], np.array([clip.prompt_id])
        eps = np.random.default_rng([17, clip.seed]).standard_normal((1,) + clip.latents[1:].shape).astype(np.float32)
        ref = cd.sample_multi_step(desk["s1"], z, ctrl, ids, eps, grid)
        m1s.append(float(np.mean((cd.sample_one_step(desk["s1"], z, ctrl, ids, eps) - ref) ** 2)))
        m2s.append(float(np.mean((cd.sample_one_step(desk["s2"], z, ctrl, ids, eps) - ref) ** 2)))
    stage2_ok = float(np.mean(m2s)) < float(np.mean(m1s))

    losses = [line.split(",") for line in open(art.path("losses_stage3.csv")).read().splitlines()]
    finite = all(np.isfinite([float(v) for v in row[1:]]).all() for row in losses)
    rounds_ok = int(losses[-1][0]) == cfg.s3_rounds - 1 and finite

    ok = stage1_ok and stage2_ok and rounds_ok
    report(
        "pipeline_efficacy", ok,
        f"stage1 val {hist[100]:.3f}->{hs[-1][1]:.3f} (x{ratio:.2f} < 0.5), "
        f"stage2 one-step->teacher {np.mean(m2s):.4f} < stage1 {np.mean(m1s):.4f}, "
        f"stage3 {cfg.s3_rounds} rounds finite={finite}",
    )


# -- criterion: ablation directions ---------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["teacher_forcing", "short_training", "no_recycle"])
def test_ablation_direction(kind):
    results = []
    for seed in (0, 1, 2):
        cfg = pl.ablation_config(RunConfig())
        cfg.seed = seed
        res = pl.run_ablation(kind, cfg, workdir=os.path.join(ACCEPT_DIR, f"ablation-{kind}-s{seed}"))
        results.append(res)
    holds = [r["direction_holds"] for r in results]
    detail = "; ".join(f"seed{i}: base {r['baseline']:.4f} vs variant {r['variant']:.4f}" for i, r in enumerate(results))
    report(f"ablation_{kind}", all(holds), f"{sum(holds)}/3 seeds hold ({results[0]['metric']}): {detail}")


# -- criterion: codec ----------------------------------------------------------------------------------


def test_codec_stream_batch_and_psnr(desk):
    codec = Codec(TINY_CODEC, seed=4)
    video = np.random.default_rng(20).uniform(0, 1, (9, 3, 16, 16)).astype(np.float32)
    z = codec.encode(video)
    st = codec.open_decoder()
    chunks = [codec.decode_stream(z[k], st)[0] for k in range(z.shape[0])]
    bit_equal = np.array_equal(np.concatenate(chunks, axis=0), codec.decode(z))

    psnr_corpus = pl.codec_psnr(desk["codec"], desk["train"][:10])
    ok = bit_equal and psnr_corpus > 25.0
    report("codec", ok, f"stream/batch bit-equal={bit_equal}, corpus round-trip PSNR {psnr_corpus:.2f} dB > 25")


# -- criterion: service loopback --------------------------------------------------------------------------


def test_service_loopback(desk):
    import websockets

    from aapt import service

    cfg = desk["cfg"]
    ctx = service.ServiceContext(
        backbone=desk["s3"], codec=desk["codec"], stats=desk["stats"],
        frame_h=cfg.frame_h, frame_w=cfg.frame_w,
        temporal_factor=cfg.temporal_factor, target_fps=2.0,
    )
    dx = 2.0  # commanded pan, px per pixel frame
    want_steps = 6

    async def scenario():
        import socket

        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        ready = asyncio.Event()
        server = asyncio.create_task(service.run_service(ctx, port, ready=ready))
        await asyncio.wait_for(ready.wait(), 10)
        frames = []
        try:
            async with websockets.connect(f"ws://127.0.0.1:{port}", max_size=16 * 1024 * 1024) as ws:
                await ws.send(json.dumps({"type": "start_session", "seed": 901, "prompt_id": world.scene_class(901)}))

                async def pump():
                    while True:
                        await ws.send(json.dumps({"type": "control", "dx": dx}))
                        await asyncio.sleep(0.1)

                pump_task = asyncio.create_task(pump())
                try:
                    while len(frames) < 1 + want_steps * cfg.temporal_factor:
                        msg = await asyncio.wait_for(ws.recv(), 60)
                        if isinstance(msg, bytes):
                            idx, w, h, px = service.parse_frame(msg)
                            frames.append(px.astype(np.float32).transpose(2, 0, 1) / 255.0)
                finally:
                    pump_task.cancel()
                await ws.send(json.dumps({"type": "end_session"}))
        finally:
            server.cancel()
            try:
                await server
            except asyncio.CancelledError:
                pass
        return np.stack(frames)

    stream = asyncio.run(scenario())
    commanded = np.zeros((stream.shape[0] - 1, 4), dtype=np.float32)
    commanded[:, 0] = dx
    err = ev.control_error(stream, commanded)
    rel = err["trans"] / dx

    # controls affect the very next frame: deterministic engine check at the
    # same seed, same noise, opposite control on one step
    s_a = engine.open_session(
        world.quantize_pixels(world.render_world(901, world.Trajectory(world.WorldState(901), []), 1, cfg.frame_h, cfg.frame_w)[0]),
        world.scene_class(901), desk["s3"], desk["codec"], desk["stats"], seed=5,
    )
    s_b = engine.open_session(
        world.quantize_pixels(world.render_world(901, world.Trajectory(world.WorldState(901), []), 1, cfg.frame_h, cfg.frame_w)[0]),
        world.scene_class(901), desk["s3"], desk["codec"], desk["stats"], seed=5,
    )
    f_a = engine.generate_next(s_a, np.array([8.0, 0, 0, 0], dtype=np.float32))
    f_b = engine.generate_next(s_b, np.array([-8.0, 0, 0, 0], dtype=np.float32))
    immediate = float(np.abs(f_a - f_b).max()) > 1e-4

    ok = rel < 0.30 and immediate
    report("service_loopback", ok,
           f"pan-right trans error {err['trans']:.3f}px = {100*rel:.0f}% of commanded {dx}px (<30%), "
           f"control affects next frame={immediate}")
