import numpy as np
import pytest

from aapt.backbone import Backbone, BackboneConfig


def _bb(control_dim=6, std=(2.0, 2.0, 0.05, 0.05)):
    cfg = BackboneConfig(
        model_dim=16, layers=1, heads=2, prompt_tokens=1, num_prompt_classes=1,
        latent_channels=2, latent_h=4, latent_w=4, window_N=2,
        control_dim=control_dim, patch_px=4, control_std=std,
    )
    return Backbone(cfg, seed=0)


def test_plane_broadcast_channels():
    bb = _bb(control_dim=4)
    ctrl = np.array([[1.0, -0.5, 0.2, 0.1]], dtype=np.float32)
    plane = bb.control_plane(ctrl)
    assert plane.shape == (1, 4, 4, 4)
    for c in range(4):
        assert (plane[0, c] == ctrl[0, c]).all()


def test_plane_translation_uniform_displacement():
    bb = _bb()
    ctrl = np.array([[1.0, 0.0, 0.0, 0.0]], dtype=np.float32)  # 1 normalized = 2 px
    plane = bb.control_plane(ctrl)
    assert plane.shape == (1, 6, 4, 4)
    np.testing.assert_allclose(plane[0, 4], -2.0 / 4.0, rtol=1e-6)  # -dx/patch cells
    np.testing.assert_allclose(plane[0, 5], 0.0, atol=1e-7)


def test_plane_rotation_antisymmetric_zero_center():
    bb = _bb()
    ctrl = np.array([[0.0, 0.0, 0.0, 1.0]], dtype=np.float32)  # 0.05 rad
    plane = bb.control_plane(ctrl)
    dx, dy = plane[0, 4], plane[0, 5]
    # displacement is odd under point reflection about the grid center
    np.testing.assert_allclose(dx, -dx[::-1, ::-1], atol=1e-6)
    np.testing.assert_allclose(dy, -dy[::-1, ::-1], atol=1e-6)
    assert np.abs(dx).max() > 0


def test_plane_zoom_radial():
    bb = _bb()
    ctrl = np.array([[0.0, 0.0, 1.0, 0.0]], dtype=np.float32)  # dzoom=0.05
    plane = bb.control_plane(ctrl)
    dx = plane[0, 4]
    # zooming in pushes content outward: sign follows the x offset
    assert dx[0, 0] < 0 and dx[0, -1] > 0
    np.testing.assert_allclose(dx[:, 1], -dx[:, 2], atol=1e-6)  # symmetric about center


def test_plane_rejects_bad_dim():
    bb = _bb()
    bb.cfg.control_dim = 5
    with pytest.raises(ValueError):
        bb.control_plane(np.zeros((1, 4), dtype=np.float32))
