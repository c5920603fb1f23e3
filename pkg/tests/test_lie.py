import numpy as np
import pytest

from monosf import lie
from monosf.lie import NearSingularRotation, RigidTransform, SE3Error


def random_twists(rng, n, max_angle=3.0):
    v = rng.uniform(-2, 2, size=(n, 3))
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    w = axis * rng.uniform(0, max_angle, size=(n, 1))
    return np.concatenate([v, w], axis=1)


def test_exp_zero_is_identity():
    assert lie.exp(np.zeros(6)).allclose(RigidTransform.identity(), atol=0)


def test_exp_pure_translation():
    T = lie.exp([1, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(T.translation, [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(T.rotation_matrix, np.eye(3), atol=1e-15)


def test_quarter_turn():
    T = lie.exp([0, 0, 0, 0, 0, np.pi / 2])
    np.testing.assert_allclose(T.act([1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_log_examples():
    np.testing.assert_array_equal(lie.log(RigidTransform.identity()), np.zeros(6))
    xi = np.array([0.3, -0.1, 0.2, 0.1, 0.05, -0.2])
    np.testing.assert_allclose(lie.log(lie.exp(xi)), xi, atol=1e-9)
    np.testing.assert_allclose(lie.log(RigidTransform.from_translation([2, 0, 0])), [2, 0, 0, 0, 0, 0], atol=1e-15)


def test_round_trip_near_pi_and_small(rng):
    for xi in random_twists(rng, 200, np.pi - 1e-3):
        np.testing.assert_allclose(lie.log(lie.exp(xi)), xi, atol=1e-9)
    for xi in random_twists(rng, 50, 1e-7):
        np.testing.assert_allclose(lie.log(lie.exp(xi)), xi, atol=1e-14)


def test_exact_pi_is_rejected():
    T = lie.exp([0, 0, 0, np.pi, 0, 0])
    with pytest.raises(NearSingularRotation):
        lie.log(T)


def test_non_finite_rejected():
    with pytest.raises(SE3Error):
        lie.exp([np.nan, 0, 0, 0, 0, 0])


def test_group_structure(rng):
    A, B, C = (lie.exp(x) for x in random_twists(rng, 3))
    p = rng.normal(size=3)
    np.testing.assert_allclose((A @ B).act(p), A.act(B.act(p)), atol=1e-9)
    assert ((A @ B) @ C).allclose(A @ (B @ C))
    assert (A @ A.inverse()).allclose(RigidTransform.identity())
    assert (RigidTransform.identity() @ A).allclose(A, atol=0)
    np.testing.assert_allclose(RigidTransform.from_translation([1, 2, 3]).act(np.zeros(3)), [1, 2, 3])


def test_inverse_is_negated_twist(rng):
    for xi in random_twists(rng, 20, 0.5) * 0.2:
        assert lie.exp(xi).inverse().allclose(lie.exp(-xi))


def test_long_composition_stays_orthonormal(rng):
    T = RigidTransform.identity()
    for xi in random_twists(rng, 1000, 0.3) * 0.1:
        T = T @ lie.exp(xi)
    R = T.rotation_matrix
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_matrix_round_trip(rng):
    T = lie.exp(random_twists(rng, 1)[0])
    assert RigidTransform.from_matrix(T.matrix()).allclose(T, atol=1e-12)
