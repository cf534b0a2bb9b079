import numpy as np
import pytest
from scipy.linalg import expm

from ivins.ekf import (ImuSample, Measurement, NoiseConfig, discrete_noise,
                       ekf_update, propagate_mean, transition_matrix)
from ivins.filters import riekf_F, riekf_G
from ivins.lie import exp_so3, log_so3
from ivins.states import (GRAVITY, GaussianBelief, ImuState, Retraction,
                          VinsState)

RNG = np.random.default_rng(5)


def make_samples(ts, w_of, a_of):
    return [ImuSample(t, w_of(t), a_of(t)) for t in ts]


def vector_retraction():
    return Retraction("vector", lambda x, e: x + e, lambda x, xhat: x - xhat)


class TestPropagateMean:
    def test_constant_velocity(self):
        x = VinsState(ImuState(np.eye(3), np.array([1.0, 2.0, 0.5]),
                               np.zeros(3), np.zeros(3), np.zeros(3)),
                      np.zeros((0, 3)))
        ts = np.arange(0.0, 0.2001, 0.005)
        samples = make_samples(ts, lambda t: np.zeros(3), lambda t: np.zeros(3))
        out = propagate_mean(x, samples, gravity=np.zeros(3))
        assert np.allclose(out.imu.p, x.imu.v * 0.2, atol=1e-12)
        assert np.allclose(out.imu.v, x.imu.v)
        assert np.allclose(out.imu.R, np.eye(3))

    def test_pure_yaw_analytic(self):
        # body rate about z with accel canceling gravity: attitude spins,
        # velocity and position stay put
        R0 = exp_so3(RNG.uniform(-0.5, 0.5, 3))
        w = np.array([0.0, 0.0, 1.0])

        def R_of(t):
            return R0 @ exp_so3(w * t)

        x = VinsState(ImuState(R0, np.zeros(3), np.zeros(3), np.zeros(3),
                               np.zeros(3)), np.zeros((0, 3)))
        ts = np.arange(0.0, 1.0001, 0.005)
        samples = make_samples(ts, lambda t: w,
                               lambda t: -(R_of(t).T @ GRAVITY))
        out = propagate_mean(x, samples, gravity=GRAVITY)
        assert np.linalg.norm(log_so3(out.imu.R.T @ R_of(1.0))) < 1e-9
        assert np.abs(out.imu.p).max() < 1e-8
        assert np.abs(out.imu.v).max() < 1e-8

    def test_refinement_oracle(self):
        # a 10x-substepped integration of the same stream agrees closely
        def w_of(t):
            return np.array([0.3 * np.sin(7 * t), -0.2, 0.5 * np.cos(5 * t)])

        def a_of(t):
            return np.array([1.0 + np.sin(3 * t), -0.5, 9.0 + 0.3 * t])

        ts = np.arange(0.0, 0.0251, 0.005)
        samples = make_samples(ts, w_of, a_of)
        x = VinsState(ImuState(exp_so3([0.1, 0.2, 0.3]), np.ones(3),
                               np.zeros(3), np.zeros(3), np.zeros(3)),
                      np.zeros((0, 3)))
        coarse = propagate_mean(x, samples, substeps=1)
        fine = propagate_mean(x, samples, substeps=10)
        assert np.abs(coarse.imu.p - fine.imu.p).max() < 1e-8
        assert np.abs(coarse.imu.R - fine.imu.R).max() < 1e-8
        assert np.abs(coarse.imu.v - fine.imu.v).max() < 1e-8

    def test_empty_stream_rejected(self):
        x = VinsState(ImuState.identity(), np.zeros((0, 3)))
        with pytest.raises(ValueError):
            propagate_mean(x, [], gravity=GRAVITY)
        with pytest.raises(ValueError):
            propagate_mean(x, [ImuSample(0.0, np.zeros(3), np.zeros(3))])


class TestTransitionMatrix:
    def test_zero_f_gives_identity(self):
        x = VinsState(ImuState.identity(), np.zeros((0, 3)))
        ts = np.arange(0.0, 0.05001, 0.005)
        samples = make_samples(ts, lambda t: np.zeros(3),
                               lambda t: -GRAVITY)
        Phi = transition_matrix(x, samples, lambda s, u, g: np.zeros((15, 15)))
        assert np.allclose(Phi, np.eye(15), atol=1e-15)

    def test_constant_f_matches_expm(self):
        A = RNG.uniform(-1, 1, (15, 15))
        x = VinsState(ImuState.identity(), np.zeros((0, 3)))
        ts = np.arange(0.0, 0.05001, 0.005)
        samples = make_samples(ts, lambda t: np.zeros(3), lambda t: np.zeros(3))
        Phi = transition_matrix(x, samples, lambda s, u, g: A,
                                gravity=np.zeros(3))
        assert np.abs(Phi - expm(0.05 * A)).max() < 1e-9

    def test_cocycle_property(self):
        def w_of(t):
            return np.array([0.2 * np.sin(3 * t), 0.1, 0.4])

        def a_of(t):
            return np.array([0.5, np.cos(2 * t), 9.8])

        ts = np.arange(0.0, 0.1001, 0.005)
        x = VinsState(ImuState(exp_so3([0.2, -0.1, 0.4]),
                               RNG.uniform(-1, 1, 3), RNG.uniform(-1, 1, 3),
                               np.zeros(3), np.zeros(3)),
                      RNG.uniform(-3, 3, (2, 3)))
        full = make_samples(ts, w_of, a_of)
        Phi_full = transition_matrix(x, full, riekf_F)
        mid = 10
        Phi_a = transition_matrix(x, full[:mid + 1], riekf_F)
        x_mid = propagate_mean(x, full[:mid + 1])
        Phi_b = transition_matrix(x_mid, full[mid:], riekf_F)
        assert np.abs(Phi_b @ Phi_a - Phi_full).max() < 1e-9

    def test_right_invariant_fixed_columns(self):
        # gravity couplings in the first block column; the p and f columns
        # stay exactly canonical
        x = VinsState(ImuState(exp_so3(RNG.uniform(-1, 1, 3)),
                               RNG.uniform(-2, 2, 3), RNG.uniform(-2, 2, 3),
                               RNG.uniform(-0.05, 0.05, 3),
                               RNG.uniform(-0.1, 0.1, 3)),
                      RNG.uniform(-4, 4, (1, 3)))
        dt = 0.05
        ts = np.arange(0.0, dt + 1e-12, 0.005)
        samples = make_samples(
            ts, lambda t: np.array([0.3, -0.2, 0.5]),
            lambda t: np.array([0.5, 0.4, 9.5]))
        Phi = transition_matrix(x, samples, riekf_F)
        from ivins.lie import skew
        assert np.abs(Phi[0:3, 0:3] - np.eye(3)).max() < 1e-12
        assert np.abs(Phi[3:6, 0:3] - dt * skew(GRAVITY)).max() < 1e-9
        assert np.abs(Phi[6:9, 0:3] - 0.5 * dt * dt * skew(GRAVITY)).max() < 1e-9
        assert np.abs(Phi[9:15, 0:3]).max() < 1e-12
        assert np.abs(Phi[15:18, 0:3]).max() < 1e-12
        p_col = np.zeros((18, 3))
        p_col[6:9] = np.eye(3)
        assert np.abs(Phi[:, 6:9] - p_col).max() < 1e-12
        f_col = np.zeros((18, 3))
        f_col[15:18] = np.eye(3)
        assert np.abs(Phi[:, 15:18] - f_col).max() < 1e-12


class TestDiscreteNoise:
    def _state_and_samples(self):
        x = VinsState(ImuState(exp_so3(RNG.uniform(-1, 1, 3)),
                               RNG.uniform(-1, 1, 3), RNG.uniform(-1, 1, 3),
                               np.zeros(3), np.zeros(3)),
                      RNG.uniform(-3, 3, (1, 3)))
        ts = np.arange(0.0, 0.05001, 0.005)
        samples = make_samples(ts, lambda t: np.array([0.1, 0.2, -0.3]),
                               lambda t: np.array([0.0, 0.5, 9.8]))
        return x, samples

    def test_zero_q(self):
        x, samples = self._state_and_samples()
        Qd = discrete_noise(x, samples, riekf_F, riekf_G, np.zeros((12, 12)))
        assert np.abs(Qd).max() == 0.0

    def test_closed_form_with_identity_g(self):
        x, samples = self._state_and_samples()
        Q = np.diag(RNG.uniform(0.1, 1.0, 12))
        G = np.zeros((18, 12))
        G[:12, :12] = np.eye(12)
        Qd = discrete_noise(x, samples, lambda s, u, g: np.zeros((18, 18)),
                            lambda s: G, Q)
        assert np.abs(Qd - 0.05 * G @ Q @ G.T).max() < 1e-12

    def test_psd_and_symmetric(self):
        x, samples = self._state_and_samples()
        Q = NoiseConfig.from_sigmas().Q
        Qd = discrete_noise(x, samples, riekf_F, riekf_G, Q)
        assert np.abs(Qd - Qd.T).max() < 1e-15
        w = np.linalg.eigvalsh(Qd)
        assert w.min() >= -1e-12 * np.trace(Qd)


class TestEkfUpdate:
    def test_zero_h_keeps_belief(self):
        ret = vector_retraction()
        belief = GaussianBelief(np.zeros(4), np.eye(4))
        res = ekf_update(belief, np.zeros((2, 4)), np.ones(2), np.eye(2), ret)
        assert res.accepted
        assert np.allclose(res.belief.mean, 0.0)
        assert np.allclose(res.belief.cov, np.eye(4))

    def test_scalar_kalman(self):
        ret = vector_retraction()
        belief = GaussianBelief(np.zeros(1), np.eye(1))
        res = ekf_update(belief, np.eye(1), np.ones(1), np.eye(1), ret)
        assert np.allclose(res.gain, 0.5)
        assert np.allclose(res.belief.mean, 0.5)
        assert np.allclose(res.belief.cov, 0.5)

    def test_information_gain(self):
        ret = vector_retraction()
        A = RNG.standard_normal((5, 5))
        belief = GaussianBelief(np.zeros(5), A @ A.T + np.eye(5))
        H = RNG.standard_normal((3, 5))
        res = ekf_update(belief, H, RNG.standard_normal(3), np.eye(3), ret)
        assert np.trace(res.belief.cov) <= np.trace(belief.cov) + 1e-12

    def test_singular_innovation_rejected(self):
        ret = vector_retraction()
        belief = GaussianBelief(np.zeros(3), np.diag([1.0, 0.0, 0.0]))
        H = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        res = ekf_update(belief, H, np.ones(2), np.zeros((2, 2)), ret)
        assert not res.accepted
        assert np.allclose(res.belief.cov, belief.cov)

    def test_dimension_check(self):
        ret = vector_retraction()
        belief = GaussianBelief(np.zeros(3), np.eye(3))
        with pytest.raises(ValueError):
            ekf_update(belief, np.zeros((2, 4)), np.ones(2), np.eye(2), ret)


class TestConfigTypes:
    def test_noise_config_shape_check(self):
        with pytest.raises(ValueError):
            NoiseConfig(np.eye(6))
        with pytest.raises(ValueError):
            NoiseConfig(np.eye(12), pixel_sigma=0.0)

    def test_from_sigmas_layout(self):
        nc = NoiseConfig.from_sigmas(gyro=0.008, gyro_walk=0.0004,
                                     accel=0.019, accel_walk=0.05)
        d = np.diag(nc.Q)
        assert np.allclose(d[0:3], 0.008 ** 2)
        assert np.allclose(d[3:6], 0.0004 ** 2)
        assert np.allclose(d[6:9], 0.019 ** 2)
        assert np.allclose(d[9:12], 0.05 ** 2)

    def test_measurement_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Measurement(0.0, 1, np.array([np.nan, 2.0]))
