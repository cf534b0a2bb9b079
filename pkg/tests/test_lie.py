import numpy as np
import pytest

from ivins.lie import (Pose, TAU_SMALL, exp_so3, left_jacobian, log_so3,
                       right_jacobian, skew, vee)

RNG = np.random.default_rng(1234)


def random_unit(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def quat_to_matrix(q):
    # independent oracle: unit quaternion (w, x, y, z) -> rotation matrix
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_of_rotvec(y):
    a = np.linalg.norm(y)
    if a < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = y / a
    return np.concatenate([[np.cos(a / 2)], np.sin(a / 2) * axis])


class TestSkew:
    def test_zero(self):
        assert np.array_equal(skew([0, 0, 0]), np.zeros((3, 3)))

    def test_self_cross_is_zero(self):
        v = np.array([1.0, 2.0, 3.0])
        assert np.allclose(skew(v) @ v, 0.0)

    def test_cross_product_oracle(self):
        assert np.allclose(skew([1, 0, 0]) @ [0, 1, 0], [0, 0, 1])
        for _ in range(20):
            a, b = RNG.standard_normal(3), RNG.standard_normal(3)
            assert np.allclose(skew(a) @ b, np.cross(a, b), atol=1e-12)

    def test_antisymmetric_and_vee(self):
        v = RNG.standard_normal(3)
        s = skew(v)
        assert np.allclose(s, -s.T)
        assert np.allclose(vee(s), v)


class TestExpSo3:
    def test_identity(self):
        assert np.allclose(exp_so3([0, 0, 0]), np.eye(3))

    def test_pi_about_x_quaternion_oracle(self):
        assert np.allclose(exp_so3([np.pi, 0, 0]), np.diag([1.0, -1.0, -1.0]),
                           atol=1e-12)

    def test_matches_quaternion_oracle(self):
        for _ in range(50):
            y = RNG.uniform(-np.pi, np.pi) * random_unit(RNG)
            assert np.allclose(exp_so3(y), quat_to_matrix(quat_of_rotvec(y)),
                               atol=1e-12)

    def test_inverse(self):
        for _ in range(20):
            y = RNG.standard_normal(3)
            assert np.allclose(exp_so3(y) @ exp_so3(-y), np.eye(3), atol=1e-12)

    def test_rotation_invariants(self):
        for scale in (1e-9, 1e-4, 1.0, 3.0):
            y = scale * random_unit(RNG)
            R = exp_so3(y)
            assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
            assert abs(np.linalg.det(R) - 1.0) < 1e-12

    def test_branch_agreement_at_tau_small(self):
        y = TAU_SMALL * random_unit(RNG)
        a = np.linalg.norm(y)
        s = skew(y)
        closed = np.eye(3) + np.sin(a) / a * s + (1 - np.cos(a)) / a**2 * (s @ s)
        series = np.eye(3) + (1 - a**2 / 6) * s + (0.5 - a**2 / 24) * (s @ s)
        assert np.abs(closed - series).max() < 1e-10


class TestLogSo3:
    def test_identity(self):
        assert np.allclose(log_so3(np.eye(3)), 0.0)

    def test_roundtrip_simple(self):
        y = np.array([0.3, -0.2, 0.1])
        assert np.allclose(log_so3(exp_so3(y)), y, atol=1e-12)

    def test_pi_about_x_quaternion_oracle(self):
        assert np.allclose(log_so3(np.diag([1.0, -1.0, -1.0])), [np.pi, 0, 0])

    def test_roundtrip_up_to_pi(self):
        for _ in range(200):
            angle = RNG.uniform(0.0, np.pi)
            y = angle * random_unit(RNG)
            assert np.linalg.norm(log_so3(exp_so3(y)) - y) < 1e-9

    def test_near_pi_window(self):
        for gap in (1e-7, 1e-5, 1e-4, 5e-4):
            y = (np.pi - gap) * random_unit(RNG)
            assert np.linalg.norm(log_so3(exp_so3(y)) - y) < 1e-9

    def test_exactly_pi_rotation_level(self):
        u = random_unit(RNG)
        R = exp_so3(np.pi * u)
        assert np.allclose(exp_so3(log_so3(R)), R, atol=1e-9)


class TestRightJacobian:
    def test_zero_is_identity(self):
        assert np.allclose(right_jacobian([0, 0, 0]), np.eye(3))

    def test_finite_difference_oracle(self):
        # exp(y + d) ~= exp(y) exp(J_r(y) d)
        eps = 1e-7
        for _ in range(20):
            y = RNG.uniform(-2, 2, 3)
            J_fd = np.empty((3, 3))
            for i in range(3):
                d = np.zeros(3)
                d[i] = eps
                plus = log_so3(exp_so3(y).T @ exp_so3(y + d))
                minus = log_so3(exp_so3(y).T @ exp_so3(y - d))
                J_fd[:, i] = (plus - minus) / (2 * eps)
            assert np.abs(right_jacobian(y) - J_fd).max() < 1e-6

    def test_transpose_symmetry(self):
        for _ in range(20):
            y = RNG.uniform(-3, 3, 3)
            assert np.allclose(right_jacobian(-y), right_jacobian(y).T,
                               atol=1e-12)

    def test_left_jacobian_relation(self):
        y = RNG.uniform(-2, 2, 3)
        assert np.allclose(left_jacobian(y), right_jacobian(-y))

    def test_branch_agreement_at_tau_small(self):
        y = TAU_SMALL * random_unit(RNG)
        a = np.linalg.norm(y)
        s = skew(y)
        closed = (np.eye(3) - (1 - np.cos(a)) / a**2 * s
                  + (a - np.sin(a)) / a**3 * (s @ s))
        series = (np.eye(3) - (0.5 - a**2 / 24) * s
                  + (1 / 6 - a**2 / 120) * (s @ s))
        assert np.abs(closed - series).max() < 1e-10


class TestPose:
    def test_identity_compose(self):
        b = Pose(exp_so3(RNG.standard_normal(3)), RNG.standard_normal(3))
        out = Pose.identity().compose(b)
        assert np.allclose(out.R, b.R) and np.allclose(out.p, b.p)

    def test_identity_transform_point(self):
        x = RNG.standard_normal(3)
        assert np.allclose(Pose.identity().transform_point(x), x)

    def test_compose_inverse(self):
        a = Pose(exp_so3(RNG.standard_normal(3)), RNG.standard_normal(3))
        out = a.compose(a.inverse())
        assert np.abs(out.R - np.eye(3)).max() < 1e-12
        assert np.abs(out.p).max() < 1e-12

    def test_transform_point_matches_compose(self):
        a = Pose(exp_so3(RNG.standard_normal(3)), RNG.standard_normal(3))
        b = Pose(exp_so3(RNG.standard_normal(3)), RNG.standard_normal(3))
        x = RNG.standard_normal(3)
        assert np.allclose(a.compose(b).transform_point(x),
                           a.transform_point(b.transform_point(x)))
