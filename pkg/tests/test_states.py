import numpy as np
import pytest

from ivins.audit import random_msckf_state, random_transform, random_vins_state
from ivins.filters import CameraModel, vins_measurement
from ivins.lie import Pose, exp_so3, log_so3, skew
from ivins.states import (GRAVITY, GaussianBelief, ImuState, MsckfState,
                          UnobsTransform, VINS_RETRACTIONS, VinsState,
                          anchored_landmark_retract, apply_unobs_transform,
                          conekf_imu_retract, conekf_inverse_retract,
                          conekf_pose_retract, conekf_retract, imu_retract,
                          imu_inverse_retract, msckf_retract,
                          msckf_inverse_retract, msckf_retraction,
                          pose_retract, pose_inverse_retract, riekf_retract,
                          riekf_inverse_retract, transform_equivariance_matrix,
                          transform_error_jacobians, transform_noise_jacobian,
                          unit_gravity)

RNG = np.random.default_rng(77)


def random_state(num_landmarks=3):
    return random_vins_state(RNG, num_landmarks)


class TestConekfRetraction:
    def test_zero_is_identity(self):
        x = random_state()
        out = conekf_retract(x, np.zeros(x.dim))
        assert np.allclose(out.imu.R, x.imu.R)
        assert np.allclose(out.landmarks, x.landmarks)

    def test_position_only(self):
        x = random_state()
        e = np.zeros(x.dim)
        e[6:9] = [1.0, 0.0, 0.0]
        out = conekf_retract(x, e)
        assert np.allclose(out.imu.p, x.imu.p + [1, 0, 0])
        assert np.allclose(out.imu.R, x.imu.R)
        assert np.allclose(out.imu.v, x.imu.v)
        assert np.allclose(out.landmarks, x.landmarks)

    def test_roundtrip(self):
        for _ in range(20):
            x = random_state()
            e = RNG.uniform(-0.5, 0.5, x.dim)
            e2 = conekf_inverse_retract(conekf_retract(x, e), x)
            assert np.abs(e2 - e).max() < 1e-8

    def test_inverse_at_same_state_is_zero(self):
        x = random_state()
        assert np.abs(conekf_inverse_retract(x, x)).max() == 0.0

    def test_translation_only_difference(self):
        x = random_state()
        y = x.copy()
        y.imu.p = x.imu.p + np.array([0.1, -0.2, 0.3])
        e = conekf_inverse_retract(y, x)
        assert np.allclose(e[6:9], [0.1, -0.2, 0.3])
        assert np.abs(np.delete(e, slice(6, 9))).max() == 0.0

    def test_dimension_mismatch(self):
        x = random_state()
        with pytest.raises(ValueError):
            conekf_retract(x, np.zeros(x.dim + 1))

    def test_angle_pi_rejected(self):
        x = random_state()
        y = x.copy()
        y.imu.R = x.imu.R @ exp_so3([np.pi, 0.0, 0.0])
        with pytest.raises(ValueError):
            conekf_inverse_retract(y, x)


class TestRiekfRetraction:
    def test_zero_is_identity(self):
        x = random_state()
        out = riekf_retract(x, np.zeros(x.dim))
        assert np.allclose(out.imu.R, x.imu.R)
        assert np.allclose(out.imu.v, x.imu.v)
        assert np.allclose(out.landmarks, x.landmarks)

    def test_theta_only_rotates_everything(self):
        x = random_state()
        e = np.zeros(x.dim)
        e[0:3] = [0.2, -0.1, 0.3]
        dR = exp_so3(e[0:3])
        out = riekf_retract(x, e)
        assert np.allclose(out.imu.R, dR @ x.imu.R)
        assert np.allclose(out.imu.v, dR @ x.imu.v)
        assert np.allclose(out.imu.p, dR @ x.imu.p)
        assert np.allclose(out.landmarks, x.landmarks @ dR.T)

    def test_roundtrip(self):
        for _ in range(20):
            x = random_state()
            e = RNG.uniform(-0.5, 0.5, x.dim)
            e2 = riekf_inverse_retract(riekf_retract(x, e), x)
            assert np.abs(e2 - e).max() < 1e-8

    def test_pure_yaw_recovers_axis(self):
        x = random_state()
        e = np.zeros(x.dim)
        e[0:3] = [0.0, 0.0, 0.4]
        y = riekf_retract(x, e)
        e2 = riekf_inverse_retract(y, x)
        assert np.allclose(e2[0:3], [0.0, 0.0, 0.4], atol=1e-12)

    def test_inverse_at_same_state_is_zero(self):
        x = random_state()
        assert np.abs(riekf_inverse_retract(x, x)).max() == 0.0


class TestSubRetractions:
    def test_imu_identity_and_consistency(self):
        x = random_state(0)
        e15 = RNG.uniform(-0.4, 0.4, 15)
        via_full = riekf_retract(x, e15)
        via_imu = imu_retract(x.imu, e15)
        assert np.allclose(via_full.imu.R, via_imu.R)
        assert np.allclose(via_full.imu.v, via_imu.v)
        assert np.allclose(via_full.imu.p, via_imu.p)
        out = imu_retract(x.imu, np.zeros(15))
        assert np.allclose(out.R, x.imu.R)

    def test_imu_roundtrip(self):
        x = random_state(0).imu
        e = RNG.uniform(-0.4, 0.4, 15)
        assert np.abs(imu_inverse_retract(imu_retract(x, e), x) - e).max() < 1e-9

    def test_pose_identity_translation_roundtrip(self):
        c = Pose(exp_so3(RNG.standard_normal(3)), RNG.standard_normal(3))
        out = pose_retract(c, np.zeros(6))
        assert np.allclose(out.R, c.R) and np.allclose(out.p, c.p)
        e = np.zeros(6)
        e[3:6] = [0.5, 0.0, -0.2]
        out = pose_retract(c, e)
        assert np.allclose(out.p, c.p + e[3:6]) and np.allclose(out.R, c.R)
        e = RNG.uniform(-0.5, 0.5, 6)
        e2 = pose_inverse_retract(pose_retract(c, e), c)
        assert np.abs(e2 - e).max() < 1e-9

    def test_anchored_landmark_identity(self):
        c = Pose(exp_so3(RNG.standard_normal(3)), RNG.standard_normal(3))
        f = RNG.standard_normal(3)
        pose, f2 = anchored_landmark_retract(c, f, np.zeros(9))
        assert np.allclose(pose.R, c.R) and np.allclose(f2, f)

    def test_anchored_landmark_theta_rotates_jointly(self):
        c = Pose(exp_so3(RNG.standard_normal(3)), RNG.standard_normal(3))
        f = RNG.standard_normal(3)
        e = np.zeros(9)
        e[0:3] = [0.1, 0.2, -0.3]
        dR = exp_so3(e[0:3])
        pose, f2 = anchored_landmark_retract(c, f, e)
        assert np.allclose(pose.R, dR @ c.R)
        assert np.allclose(f2, dR @ f)


class TestMsckfRetraction:
    def test_roundtrip_both_variants(self):
        x = random_msckf_state(RNG, 3)
        for variant in ("riekf", "conekf"):
            e = RNG.uniform(-0.3, 0.3, x.dim)
            y = msckf_retract(x, e, variant)
            e2 = msckf_inverse_retract(y, x, variant)
            assert np.abs(e2 - e).max() < 1e-8

    def test_clone_ordering_preserved(self):
        x = random_msckf_state(RNG, 4)
        y = msckf_retract(x, np.zeros(x.dim), "riekf")
        assert y.clone_times == x.clone_times


class TestGaussianBelief:
    def test_validate_accepts_psd(self):
        x = random_state(1)
        A = RNG.standard_normal((x.dim, x.dim))
        GaussianBelief(x, A @ A.T + 1e-6 * np.eye(x.dim)).validate()

    def test_validate_rejects_asymmetric(self):
        x = random_state(1)
        P = np.eye(x.dim)
        P[0, 1] = 0.5
        with pytest.raises(ValueError):
            GaussianBelief(x, P).validate()


class TestUnobsTransform:
    def test_identity_map(self):
        x = random_state()
        t = UnobsTransform(0.0, np.zeros(3), np.eye(4))
        y = apply_unobs_transform(x, t, eps=np.zeros(4))
        assert np.allclose(y.imu.R, x.imu.R)
        assert np.allclose(y.imu.p, x.imu.p)
        assert np.allclose(y.landmarks, x.landmarks)

    def test_translation_only(self):
        x = random_state()
        t = UnobsTransform(0.0, np.array([1.0, 2.0, 3.0]))
        y = apply_unobs_transform(x, t)
        assert np.allclose(y.imu.p, x.imu.p + [1, 2, 3])
        assert np.allclose(y.landmarks, x.landmarks + [1, 2, 3])
        assert np.allclose(y.imu.R, x.imu.R)
        assert np.allclose(y.imu.v, x.imu.v)
        assert np.allclose(y.imu.bg, x.imu.bg)

    def test_rotation_about_gravity_direction(self):
        x = random_state()
        t = UnobsTransform(0.7, np.zeros(3))
        y = apply_unobs_transform(x, t)
        dR = exp_so3(unit_gravity(GRAVITY) * 0.7)
        assert np.allclose(y.imu.R, dR @ x.imu.R)
        assert np.allclose(y.imu.v, dR @ x.imu.v)

    def test_measurement_equality(self):
        # h(T_D(x)) == h(x) for any landmark visible in both
        cam = CameraModel.default()
        for _ in range(10):
            x = random_vins_state(RNG, 2)
            t = random_transform(RNG)
            y = apply_unobs_transform(x, t)
            for i in range(2):
                assert np.allclose(vins_measurement(y, cam, i),
                                   vins_measurement(x, cam, i), atol=1e-10)

    def test_msckf_state_transforms_clones(self):
        x = random_msckf_state(RNG, 2)
        t = random_transform(RNG)
        y = apply_unobs_transform(x, t)
        dR = exp_so3(unit_gravity(GRAVITY) * t.theta1)
        for cx, cy in zip(x.clones, y.clones):
            assert np.allclose(cy.R, dR @ cx.R)
            assert np.allclose(cy.p, dR @ cx.p + t.theta2)


class TestTransformJacobians:
    def test_riekf_equivariance_exact(self):
        # T_D(x + e) == T_D(x) + W e with the closed-form W
        for _ in range(10):
            x = random_state()
            t = random_transform(RNG)
            W = transform_equivariance_matrix(x, t, "riekf")
            e = RNG.uniform(-0.4, 0.4, x.dim)
            lhs = apply_unobs_transform(riekf_retract(x, e), t)
            rhs = riekf_retract(apply_unobs_transform(x, t), W @ e)
            gap = riekf_inverse_retract(lhs, rhs)
            assert np.abs(gap).max() < 1e-9

    def test_conekf_state_independent_w(self):
        t = random_transform(RNG)
        ret = VINS_RETRACTIONS["conekf"]
        m1, _ = transform_error_jacobians(random_state(), t, ret)
        m2, _ = transform_error_jacobians(random_state(), t, ret)
        assert np.abs(m1 - m2).max() < 1e-8

    def test_riekf_w_matches_closed_form(self):
        x = random_state()
        t = random_transform(RNG)
        M, _ = transform_error_jacobians(x, t, VINS_RETRACTIONS["riekf"])
        W = transform_equivariance_matrix(x, t, "riekf")
        assert np.abs(M - W).max() < 1e-8
        # block structure: delta R on the diagonal, theta2 coupling into p/f
        dR = exp_so3(unit_gravity(GRAVITY) * t.theta1)
        assert np.allclose(W[0:3, 0:3], dR)
        assert np.allclose(W[6:9, 0:3], skew(t.theta2) @ dR)
        assert np.allclose(W[9:15, 9:15], np.eye(6))

    def test_riekf_n_layout_stochastic_identity(self):
        # first column carries the unit gravity direction in the theta
        # block; translation columns hit p- and f-blocks with the identity
        x = random_state(2)
        t = UnobsTransform(0.0, np.zeros(3), np.eye(4))
        N = transform_noise_jacobian(x, t, "riekf")
        g_unit = unit_gravity(GRAVITY)
        assert np.allclose(N[0:3, 0], g_unit)
        assert np.allclose(N[3:6], 0.0)
        assert np.allclose(N[6:9, 1:4], np.eye(3))
        assert np.allclose(N[9:15], 0.0)
        for i in range(2):
            r = 15 + 3 * i
            assert np.allclose(N[r:r + 3, 0], 0.0)
            assert np.allclose(N[r:r + 3, 1:4], np.eye(3))

    def test_fd_agrees_with_analytic(self):
        for variant in ("riekf", "conekf"):
            x = random_state()
            t = random_transform(RNG)
            M, N = transform_error_jacobians(x, t, VINS_RETRACTIONS[variant])
            W = transform_equivariance_matrix(x, t, variant)
            Na = transform_noise_jacobian(x, t, variant)
            assert np.abs(M - W).max() < 1e-6
            assert np.abs(N - Na).max() < 1e-6

    def test_msckf_variants_fd(self):
        x = random_msckf_state(RNG, 3)
        t = random_transform(RNG)
        for variant in ("riekf", "conekf"):
            M, N = transform_error_jacobians(x, t, msckf_retraction(variant))
            assert np.abs(M - transform_equivariance_matrix(x, t, variant)).max() < 1e-6
            assert np.abs(N - transform_noise_jacobian(x, t, variant)).max() < 1e-6
