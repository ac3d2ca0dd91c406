import numpy as np
import pytest

from aapt import tensor as T
from aapt.backbone import (
    Backbone,
    BackboneConfig,
    FrameInput,
    build_layout,
    build_mask,
    rope_angles,
    rope_phases_layout,
)
from aapt.engine import SessionCache
from aapt.tensor import Tensor, backward, grad_check

TINY = BackboneConfig(
    model_dim=16,
    layers=2,
    heads=2,
    prompt_tokens=2,
    num_prompt_classes=2,
    latent_channels=2,
    latent_h=2,
    latent_w=2,
    window_N=2,
)


def _mask_oracle(n_frames, prompt_tokens, tokens_per_frame, N):
    """Independent enumeration of the three attention rules."""
    S = prompt_tokens + n_frames * tokens_per_frame

    def owner(tok):
        if tok < prompt_tokens:
            return ("prompt", -1)
        return ("frame", (tok - prompt_tokens) // tokens_per_frame)

    m = np.zeros((S, S), dtype=bool)
    for q in range(S):
        for k in range(S):
            qk, qi = owner(q)
            kk, ki = owner(k)
            if qk == "prompt":
                m[q, k] = kk == "prompt"  # text attends only to itself
            else:
                if kk == "prompt":
                    m[q, k] = True  # always attend text
                elif ki == 0:
                    m[q, k] = True  # first frame pinned
                else:
                    m[q, k] = max(1, qi - N + 1) <= ki <= qi  # window, no future
    return m


@pytest.mark.parametrize("n_frames,N", [(3, 1), (3, 2), (5, 2), (4, 10)])
def test_mask_matches_rule_enumeration(n_frames, N):
    cfg = BackboneConfig(prompt_tokens=2, latent_h=1, latent_w=2, window_N=N)
    layout = build_layout(cfg, n_frames)
    got = build_mask(layout, N)
    want = _mask_oracle(n_frames, 2, 2, N)
    np.testing.assert_array_equal(got, want)


def test_mask_window_one_spec_case():
    # 2 prompt tokens, 3 frames x 2 tokens, N=1:
    # frame 2 attends {prompt, frame0, frame2}; frame 1 attends {prompt, frame0, frame1}
    cfg = BackboneConfig(prompt_tokens=2, latent_h=1, latent_w=2, window_N=1)
    layout = build_layout(cfg, 3)
    m = build_mask(layout, 1)
    f2_row = m[6]  # first token of frame 2
    assert f2_row[:2].all()  # prompt
    assert f2_row[2:4].all()  # frame 0
    assert not f2_row[4:6].any()  # frame 1 outside window
    assert f2_row[6:8].all()  # itself
    f1_row = m[4]
    assert f1_row[:2].all() and f1_row[2:4].all() and f1_row[4:6].all() and not f1_row[6:8].any()


def test_mask_large_window_is_plain_block_causal():
    cfg = BackboneConfig(prompt_tokens=1, latent_h=1, latent_w=2, window_N=99)
    layout = build_layout(cfg, 4)
    m = build_mask(layout, 99)
    for q in layout.spans[1:]:
        for k in layout.spans[1:]:
            expect = k.frame_index <= q.frame_index
            assert m[q.start : q.stop, k.start : k.stop].all() == expect


def test_mask_prompt_rows_see_no_frames():
    layout = build_layout(TINY, 3)
    m = build_mask(layout, TINY.window_N)
    assert not m[: TINY.prompt_tokens, TINY.prompt_tokens :].any()


def test_mask_deterministic_pure():
    layout = build_layout(TINY, 4)
    np.testing.assert_array_equal(build_mask(layout, 2), build_mask(layout, 2))


def test_rope_temporal_fixed_interval():
    cfg = BackboneConfig(temporal_rope_interval=0.5)
    a0 = rope_angles(cfg, 0, (0, 0))
    assert np.allclose(a0, 0.0)  # t=0, spatial origin
    pairs = cfg.head_dim // 2
    tp = pairs // 2
    for k in (1, 3, 9):
        d1 = rope_angles(cfg, k + 1, (1, 1)) - rope_angles(cfg, k, (1, 1))
        d0 = rope_angles(cfg, 1, (1, 1)) - rope_angles(cfg, 0, (1, 1))
        np.testing.assert_allclose(d1[:tp], d0[:tp], atol=1e-12)  # constant temporal step
        np.testing.assert_allclose(d1[tp:], 0.0, atol=1e-12)  # spatial part time-free


def test_rope_phases_length_free():
    # growing the sequence leaves existing frames' phases unchanged, unlike a
    # normalized-position oracle
    short = rope_phases_layout(TINY, build_layout(TINY, 3))
    long = rope_phases_layout(TINY, build_layout(TINY, 6))
    np.testing.assert_array_equal(long[: short.shape[0]], short)

    def stretched_oracle(n_frames):  # the behavior we must NOT have
        return np.arange(n_frames) / n_frames

    assert not np.allclose(stretched_oracle(3), stretched_oracle(6)[:3])


def _rand_inputs(cfg, B, n, seed, t=0.7):
    rng = np.random.default_rng(seed)
    fis = []
    for _ in range(n):
        fis.append(
            FrameInput(
                noisy=rng.standard_normal((B, cfg.latent_channels, cfg.latent_h, cfg.latent_w)).astype(np.float32),
                recycled=rng.standard_normal((B, cfg.latent_channels, cfg.latent_h, cfg.latent_w)).astype(np.float32),
                control=rng.standard_normal((B, cfg.control_dim)).astype(np.float32) * 0.5,
                timestep=np.full(B, t, dtype=np.float32),
            )
        )
    return fis


def test_forward_parallel_causality_exact():
    bb = Backbone(TINY, seed=0)
    fis = _rand_inputs(TINY, 2, 4, seed=1)
    with T.no_grad():
        out, _ = bb.forward_parallel(fis, np.array([0, 1]))
    for j in (2, 3):
        tampered = [FrameInput(f.noisy, f.recycled, f.control, f.timestep) for f in fis]
        tampered[j] = FrameInput(
            np.asarray(tampered[j].noisy) + 1.0,
            np.asarray(tampered[j].recycled) - 2.0,
            tampered[j].control + 3.0,
            tampered[j].timestep,
        )
        with T.no_grad():
            out2, _ = bb.forward_parallel(tampered, np.array([0, 1]))
        assert np.abs(out2.data[:, :j] - out.data[:, :j]).max() <= 1e-6
        assert np.abs(out2.data[:, j] - out.data[:, j]).max() > 1e-6


def test_forward_parallel_rejects_mixed_timesteps():
    bb = Backbone(TINY, seed=0)
    fis = _rand_inputs(TINY, 1, 2, seed=2)
    fis[1].timestep = np.array([0.123], dtype=np.float32)
    with pytest.raises(ValueError):
        bb.forward_parallel(fis, np.array([0]))


def _replay_with_cache(bb, fis, prompt_ids, window_N):
    cfg = bb.cfg
    with T.no_grad():
        tensors = bb.open_cache(prompt_ids, fis[0].timestep)
        cache = SessionCache(tensors, window_N, cfg.prompt_tokens, cfg.tokens_per_frame)
        cache.pending = 0
        outs = []
        for p, fi in enumerate(fis):
            o, _ = bb.forward_step(tensors, [fi], start_position=p)
            outs.append(o.data[:, 0])
            cache.mark_filled(p)
            cache.pending = p + 1
            cache.evict()
    return np.stack(outs, axis=1)


@pytest.mark.parametrize("n_frames,window", [(3, 8), (8, 8), (8, 2)])
def test_step_replay_matches_parallel(n_frames, window):
    cfg = BackboneConfig(
        model_dim=16, layers=2, heads=2, prompt_tokens=2, num_prompt_classes=2,
        latent_channels=2, latent_h=2, latent_w=2, window_N=window,
    )
    bb = Backbone(cfg, seed=3)
    fis = _rand_inputs(cfg, 2, n_frames, seed=4, t=1.0)
    with T.no_grad():
        par, _ = bb.forward_parallel(fis, np.array([1, 0]), window_N=window)
    seq = _replay_with_cache(bb, fis, np.array([1, 0]), window)
    assert np.abs(par.data - seq).max() < 1e-4


def test_single_frame_step_equals_parallel():
    bb = Backbone(TINY, seed=5)
    fis = _rand_inputs(TINY, 1, 1, seed=6, t=1.0)
    with T.no_grad():
        par, _ = bb.forward_parallel(fis, np.array([0]))
    seq = _replay_with_cache(bb, fis, np.array([0]), TINY.window_N)
    assert np.abs(par.data - seq).max() < 1e-5


def test_forward_step_counts_one_nfe():
    bb = Backbone(TINY, seed=0)
    fis = _rand_inputs(TINY, 1, 1, seed=7, t=1.0)
    with T.no_grad():
        tensors = bb.open_cache(np.array([0]), fis[0].timestep)
    before = bb.step_count
    with T.no_grad():
        out, _ = bb.forward_step(tensors, fis, start_position=0)
    assert bb.step_count == before + 1
    assert np.isfinite(out.data).all()


def test_parallel_gradcheck_tiny():
    cfg = BackboneConfig(
        model_dim=8, layers=1, heads=2, prompt_tokens=1, num_prompt_classes=1,
        latent_channels=1, latent_h=1, latent_w=2, window_N=2,
    )
    bb = Backbone(cfg, seed=8)
    # non-zero modulation/gates so every path carries gradient
    rng = np.random.default_rng(9)
    for blk in bb.blocks:
        blk.mod.w.data = rng.standard_normal(blk.mod.w.shape).astype(np.float32) * 0.3
    bb.final_mod.w.data = rng.standard_normal(bb.final_mod.w.shape).astype(np.float32) * 0.3
    fis = _rand_inputs(cfg, 1, 2, seed=10)
    target = rng.standard_normal((1, 2, 1, 1, 2)).astype(np.float32)

    checked = {
        "qkv": (bb.blocks[0].qkv, "w"),
        "in_proj": (bb.in_proj, "w"),
        "head": (bb.head, "w"),
        "prompt": (bb, "prompt_table"),
        "mod": (bb.blocks[0].mod, "w"),
    }
    for name, (holder, attr) in checked.items():
        orig = getattr(holder, attr)

        def loss_fn(t, holder=holder, attr=attr, orig=orig):
            setattr(holder, attr, t)
            try:
                out, _ = bb.forward_parallel(fis, np.array([0]))
                diff = out - target
                return (diff * diff).mean()
            finally:
                setattr(holder, attr, orig)

        err = grad_check(loss_fn, Tensor(orig.data.copy(), requires_grad=True), h=1e-3)
        assert err < 1e-3, f"gradcheck failed for {name}: {err}"
