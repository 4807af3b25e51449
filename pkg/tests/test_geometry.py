import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from headpose.geometry import (
    IDENTITY,
    axis_angle,
    canonical,
    covariance_from_features,
    exp_map,
    from_euler,
    geodesic_error,
    log_map,
    mean_quaternion,
    quat_from_features,
    quat_inverse,
    quat_mul,
    quat_to_matrix,
    random_quaternions,
    rotate,
    smoothclip,
    smoothclip_grad,
    to_euler,
    tril_from_features,
)

finite = st.floats(-50, 50, allow_nan=False)


def matrix_angle(a, b):
    """Rotation angle between two quaternions via the trace of R_a^T R_b."""
    ra, rb = quat_to_matrix(a), quat_to_matrix(b)
    tr = np.trace(np.swapaxes(ra, -1, -2) @ rb, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1) / 2, -1, 1))


# --- smoothclip ---------------------------------------------------------------


def test_smoothclip_examples():
    np.testing.assert_allclose(smoothclip(np.array([0.0, 2.0, -20.0])), [1.0, 3.0, np.exp(-20.0)], rtol=1e-15)


def test_smoothclip_positive_monotone_and_c1(rng):
    x = rng.normal(scale=3, size=100)
    h = 1e-6
    fd = (smoothclip(x + h) - smoothclip(x - h)) / (2 * h)
    np.testing.assert_allclose(smoothclip_grad(x), fd, atol=1e-6)
    xs = np.sort(rng.normal(scale=5, size=1000))
    assert np.all(smoothclip(xs) > 0)
    assert np.all(np.diff(smoothclip(xs)) >= 0)
    np.testing.assert_allclose(smoothclip_grad(np.array([0.0])), [1.0])


# --- feature mapping ----------------------------------------------------------


def test_quat_from_features_examples():
    np.testing.assert_allclose(quat_from_features([0, 0, 0, 0]), IDENTITY)
    np.testing.assert_allclose(quat_from_features([0, 0, 0, 10]), IDENTITY)
    np.testing.assert_allclose(quat_from_features([1, 0, 0, 0]), [np.sqrt(0.5), 0, 0, np.sqrt(0.5)])


@given(st.lists(finite, min_size=4, max_size=4))
def test_quat_from_features_unit_and_positive_w(z):
    q = quat_from_features(np.array(z))
    assert abs(np.linalg.norm(q) - 1) < 1e-9
    assert q[3] > 0


# --- algebra against a rotation-matrix oracle --------------------------------


def test_mul_inverse_identity(rng):
    q = random_quaternions(rng, 50)
    np.testing.assert_allclose(quat_mul(q, IDENTITY), q, atol=1e-15)
    np.testing.assert_allclose(canonical(quat_mul(q, quat_inverse(q))), np.tile(IDENTITY, (50, 1)), atol=1e-15)


def test_mul_matches_matrix_product_and_is_associative(rng):
    a, b, c = (random_quaternions(rng, 200) for _ in range(3))
    np.testing.assert_allclose(quat_to_matrix(quat_mul(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)
    np.testing.assert_allclose(
        canonical(quat_mul(quat_mul(a, b), c)), canonical(quat_mul(a, quat_mul(b, c))), atol=1e-12
    )
    np.testing.assert_allclose(np.linalg.norm(quat_mul(a, b), axis=-1), 1.0, atol=1e-12)


def test_matrix_agrees_with_scipy(rng):
    q = random_quaternions(rng, 100)
    np.testing.assert_allclose(quat_to_matrix(q), Rotation.from_quat(q).as_matrix(), atol=1e-12)
    v = rng.normal(size=(100, 3))
    np.testing.assert_allclose(rotate(q, v), Rotation.from_quat(q).apply(v), atol=1e-12)


# --- log / exp -----------------------------------------------------------------


def test_log_exp_examples():
    np.testing.assert_allclose(log_map(IDENTITY), [0, 0, 0])
    q90 = [0, 0, np.sin(np.pi / 4), np.cos(np.pi / 4)]
    np.testing.assert_allclose(log_map(q90), [0, 0, np.pi / 2], atol=1e-15)
    np.testing.assert_allclose(exp_map([0, 0, 0]), IDENTITY)
    np.testing.assert_allclose(exp_map([0, 0, np.pi]), [0, 0, 1, 0], atol=1e-15)


def test_log_matches_scipy_rotvec(rng):
    q = random_quaternions(rng, 500)
    np.testing.assert_allclose(log_map(q), Rotation.from_quat(q).as_rotvec(), atol=1e-12)
    assert np.all(np.linalg.norm(log_map(q), axis=-1) <= np.pi + 1e-12)


def test_log_is_sign_invariant(rng):
    q = random_quaternions(rng, 500)
    np.testing.assert_array_equal(log_map(q), log_map(-q))


def test_small_angle_series_is_accurate(rng):
    axis = rng.normal(size=(100, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    for theta in (1e-12, 1e-8, 5e-5, 9.9e-5, 1.01e-4):
        v = theta * axis
        q = exp_map(v)
        np.testing.assert_allclose(q, Rotation.from_rotvec(v).as_quat(), atol=1e-16, rtol=1e-14)
        np.testing.assert_allclose(log_map(q), v, rtol=1e-12, atol=1e-20)


# --- geodesic --------------------------------------------------------------------


def test_geodesic_examples(rng):
    q = random_quaternions(rng, 20)
    np.testing.assert_allclose(geodesic_error(q, q), 0.0, atol=1e-7)
    np.testing.assert_allclose(geodesic_error(q, -q), 0.0, atol=1e-7)
    for axis in rng.normal(size=(10, 3)):
        np.testing.assert_allclose(geodesic_error(IDENTITY, axis_angle(axis, np.pi / 2)), np.pi / 2, atol=1e-14)


def test_geodesic_matches_matrix_oracle_symmetric_and_triangle(rng):
    a, b, c = (random_quaternions(rng, 1000) for _ in range(3))
    d_ab = geodesic_error(a, b)
    np.testing.assert_allclose(d_ab, matrix_angle(a, b), atol=1e-7)
    np.testing.assert_allclose(d_ab, np.linalg.norm(log_map(quat_mul(quat_inverse(a), b)), axis=-1), atol=1e-12)
    np.testing.assert_allclose(d_ab, geodesic_error(b, a), rtol=0, atol=1e-14)
    np.testing.assert_array_equal(d_ab, geodesic_error(-a, b))
    np.testing.assert_array_equal(d_ab, geodesic_error(a, -b))
    assert np.all(d_ab <= geodesic_error(a, c) + geodesic_error(c, b) + 1e-9)
    assert np.all((d_ab >= 0) & (d_ab <= np.pi))


# --- Euler angles ----------------------------------------------------------------


def test_euler_examples():
    np.testing.assert_allclose(to_euler(IDENTITY), [0, 0, 0], atol=1e-15)
    np.testing.assert_allclose(canonical(from_euler(30, 0, 0)), axis_angle([0, 1, 0], np.deg2rad(30)), atol=1e-15)


def test_euler_matches_scipy_intrinsic_yxz(rng):
    e = rng.uniform([-180, -89, -180], [180, 89, 180], size=(500, 3))
    ref = Rotation.from_euler("YXZ", e, degrees=True).as_quat()
    np.testing.assert_allclose(canonical(from_euler(*e.T)), canonical(ref), atol=1e-12)
    np.testing.assert_allclose(to_euler(from_euler(*e.T)), e, atol=1e-6)


def test_euler_sign_invariant_and_gimbal_lock(rng):
    q = random_quaternions(rng, 200)
    np.testing.assert_allclose(to_euler(q), to_euler(-q), atol=1e-9)
    locked = from_euler(40.0, 90.0, 0.0)
    e = to_euler(locked)
    assert e[2] == 0.0
    assert geodesic_error(from_euler(*e), locked) < 1e-6


# --- covariance ---------------------------------------------------------------


def test_covariance_examples():
    np.testing.assert_allclose(covariance_from_features(np.zeros(6)), 1e-4 * np.eye(3))
    np.testing.assert_allclose(covariance_from_features([1, 0, 1, 0, 0, 1]), (1 + 1e-4) * np.eye(3))
    m = np.arange(1.0, 7.0)
    lower = np.array([[1, 0, 0], [2, 3, 0], [4, 5, 6]], dtype=float)
    np.testing.assert_allclose(covariance_from_features(m, eps=0.5), lower @ lower.T + 0.5 * np.eye(3))
    with pytest.raises(ValueError):
        covariance_from_features(m, eps=0.0)


@settings(max_examples=200)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=6, max_size=6))
def test_covariance_always_pd(m):
    cov = covariance_from_features(np.array(m))
    np.testing.assert_allclose(cov, cov.T, atol=0)
    np.linalg.cholesky(cov)


def test_covariance_floor_for_tiny_and_rank_deficient_factors(rng):
    m = np.concatenate([rng.normal(scale=1e-6, size=(1000, 6)), rng.normal(size=(1000, 6))])
    m[1000:, [2, 5]] = 0.0  # singular lower factor
    cov = covariance_from_features(m)
    # exact spectrum: eps + squared singular values of the factor, never below eps
    exact = 1e-4 + np.linalg.svd(tril_from_features(m), compute_uv=False) ** 2
    assert exact.min() >= 1e-4
    # the eigen-solver oracle agrees up to its own rounding of about |cov| * machine epsilon
    eig = np.linalg.eigvalsh(cov)
    bound = 4 * np.finfo(float).eps * np.linalg.norm(cov, axis=(-2, -1))
    assert np.all(eig.min(axis=1) >= 1e-4 - bound)


# --- mean quaternion ----------------------------------------------------------


def test_mean_quaternion_examples(rng):
    q = random_quaternions(rng, 1)[0]
    np.testing.assert_allclose(mean_quaternion([q]), q, atol=1e-15)
    np.testing.assert_allclose(mean_quaternion([q, q, q]), q, atol=1e-15)
    np.testing.assert_allclose(mean_quaternion([q, -q]), q, atol=1e-15)
    with pytest.raises(ValueError):
        mean_quaternion(np.empty((0, 4)))


def test_mean_quaternion_symmetric_pair(rng):
    q = random_quaternions(rng, 1)[0]
    d = axis_angle([0.3, -1, 0.2], 0.2)
    pair = [quat_mul(q, d), -quat_mul(q, quat_inverse(d))]
    assert geodesic_error(mean_quaternion(pair), q) < 1e-12


def test_mean_of_identical_quaternions_is_exact(rng):
    for q in random_quaternions(rng, 50):
        np.testing.assert_array_equal(mean_quaternion(np.stack([q, -q, q])), q)
