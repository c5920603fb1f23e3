import numpy as np
import pytest

from monosf import camera as cg
from monosf import lie
from monosf.camera import BehindCameraError, PinholeCamera
from monosf.motion_field import SE3Field, field_from_constant


@pytest.fixture
def cam():
    return PinholeCamera(100.0, 100.0, 15.5, 11.5, 0.54)


def test_project_backproject(cam, rng):
    np.testing.assert_allclose(cg.backproject(cam, (cam.cx, cam.cy), 7.0), [0, 0, 7.0])
    assert cg.project(cam, [1.0, 0.0, 10.0])[0] - cam.cx == pytest.approx(10.0)
    px = rng.uniform(0, 30, size=(50, 2))
    d = rng.uniform(1, 50, size=50)
    np.testing.assert_allclose(cg.project(cam, cg.backproject(cam, px, d)), px, atol=1e-9)
    with pytest.raises(BehindCameraError):
        cg.project(cam, [0, 0, 0])


def test_disparity_conversion():
    cam = PinholeCamera(721.0, 721.0, 0, 0, 0.54)
    assert cg.disparity_from_depth(cam, 38.934) == pytest.approx(10.0, abs=1e-4)
    z = np.array([3.0, 12.5])
    np.testing.assert_allclose(cg.depth_from_disparity(cam, cg.disparity_from_depth(cam, z)), z, rtol=1e-12)
    with pytest.raises(ValueError):
        cg.depth_from_disparity(cam, 0.0)


def test_identity_field_gives_zero_flow(cam):
    D = np.full((24, 32), 10.0)
    sf = cg.synthesize_scene_flow(D, SE3Field(np.zeros((24, 32, 6))), cam)
    for part in (sf.u, sf.v, sf.delta_d):
        np.testing.assert_allclose(part, 0.0, atol=1e-12)


def test_lateral_and_forward_translation(cam):
    D = np.full((24, 32), 10.0)
    sf = cg.synthesize_scene_flow(D, field_from_constant(lie.exp([0.1, 0, 0, 0, 0, 0]), 24, 32), cam)
    np.testing.assert_allclose(sf.u, 1.0, atol=1e-12)
    np.testing.assert_allclose(sf.v, 0.0, atol=1e-12)
    np.testing.assert_allclose(sf.delta_d, 0.0, atol=1e-12)
    sf = cg.synthesize_scene_flow(D, field_from_constant(lie.exp([0, 0, 1, 0, 0, 0]), 24, 32), cam)
    np.testing.assert_allclose(sf.delta_d, 1.0, atol=1e-12)


def test_scene_flow_3d(cam):
    D = np.full((24, 32), 5.0)
    S, _ = cg.scene_flow_3d(D, field_from_constant(lie.exp([0.2, -0.1, 0.3, 0, 0, 0]), 24, 32), cam)
    np.testing.assert_allclose(S[0], np.broadcast_to([0.2, -0.1, 0.3], S[0].shape), atol=1e-12)
    # rotation about the optical axis fixes the principal ray
    cam2 = PinholeCamera(100.0, 100.0, 16.0, 12.0)
    S, _ = cg.scene_flow_3d(D, field_from_constant(lie.exp([0, 0, 0, 0, 0, 0.3]), 24, 32), cam2)
    np.testing.assert_allclose(S[12, 16], 0.0, atol=1e-12)


def test_rigid_flow_matches_constant_field(cam, rng):
    D = rng.uniform(4, 20, size=(24, 32))
    T = lie.exp([0.1, 0.02, 0.3, 0.01, -0.02, 0.005])
    flow, valid = cg.rigid_flow(D, T, cam)
    sf = cg.synthesize_scene_flow(D, field_from_constant(T, 24, 32), cam)
    np.testing.assert_array_equal(flow, sf.flow)
    np.testing.assert_array_equal(valid, sf.valid)


def test_depth_change_matches_transformed_z(cam, rng):
    D = rng.uniform(4, 20, size=(24, 32))
    twists = rng.normal(scale=0.05, size=(24, 32, 6))
    field = SE3Field(twists)
    sf = cg.synthesize_scene_flow(D, field, cam)
    xs, ys = cg.pixel_grid(24, 32)
    P = cg.backproject(cam, np.stack([xs, ys], -1), D)
    z = lie.exp(twists[3, 5]).act(P[3, 5])[2]
    assert D[3, 5] + sf.delta_d[3, 5] == pytest.approx(z, abs=1e-9)


def test_projective_scale_ambiguity(cam, rng):
    D = rng.uniform(4, 20, size=(24, 32))
    xi = np.array([0.1, 0.02, 0.3, 0.01, -0.02, 0.005])
    s = 2.5
    a = cg.synthesize_scene_flow(D, field_from_constant(lie.exp(xi), 24, 32), cam)
    xi_s = xi.copy()
    xi_s[:3] *= s
    b = cg.synthesize_scene_flow(s * D, field_from_constant(lie.exp(xi_s), 24, 32), cam)
    np.testing.assert_allclose(b.flow, a.flow, atol=1e-9)
    np.testing.assert_allclose(b.delta_d, s * a.delta_d, atol=1e-9)


def test_behind_camera_invalidates(cam):
    D = np.full((4, 4), 1.0)
    sf = cg.synthesize_scene_flow(D, field_from_constant(lie.exp([0, 0, -2, 0, 0, 0]), 4, 4), cam)
    assert not sf.valid.any()
    D[0, 0] = np.nan
    sf = cg.synthesize_scene_flow(D, SE3Field(np.zeros((4, 4, 6))), cam)
    assert not sf.valid[0, 0] and sf.valid[1, 1]
