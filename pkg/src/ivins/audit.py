"""Finite-difference audit of every analytic Jacobian.

Each audit rebuilds the quantity a Jacobian claims to linearize -- error
dynamics, measurement maps, clone augmentation, transform equivariance --
by central differences and reports the worst relative deviation.  The
integrators used here are deliberately independent of the filter engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import filters as filters_mod
from . import msckf as msckf_mod
from . import states as states_mod
from .ekf import ImuSample, propagate_mean
from .filters import CameraModel, pinhole_project, project, project_jacobian
from .lie import Pose, exp_so3, left_jacobian, skew
from .states import (GRAVITY, IMU_DIM, ImuState, MsckfState, UnobsTransform,
                     VINS_RETRACTIONS, VinsState, msckf_retraction,
                     msckf_retract, pose_inverse_retract,
                     conekf_pose_inverse_retract, transform_error_jacobians)

_FD_EPS = 1e-5
_FD_DT = 1e-4


def random_rotation(rng, scale=1.0):
    return exp_so3(rng.uniform(-scale, scale, 3))


def random_vins_state(rng, num_landmarks=2):
    imu = ImuState(random_rotation(rng), rng.uniform(-2, 2, 3),
                   rng.uniform(-4, 4, 3), rng.uniform(-0.05, 0.05, 3),
                   rng.uniform(-0.2, 0.2, 3))
    # landmarks in front of the default camera (body +x), a few meters out
    lms = imu.p + (imu.R @ (rng.uniform([2.0, -2.0, -1.0], [6.0, 2.0, 1.0],
                                        (num_landmarks, 3))).T).T
    return VinsState(imu, lms)


def random_msckf_state(rng, num_clones=4):
    imu = ImuState(random_rotation(rng), rng.uniform(-2, 2, 3),
                   rng.uniform(-4, 4, 3), rng.uniform(-0.05, 0.05, 3),
                   rng.uniform(-0.2, 0.2, 3))
    times = list(np.sort(rng.uniform(0.0, 1.0, num_clones)))
    clones = [Pose(random_rotation(rng), rng.uniform(-4, 4, 3))
              for _ in range(num_clones)]
    return MsckfState(imu, times, clones)


def random_transform(rng, yaw_scale=0.6, trans_scale=2.0):
    return UnobsTransform(rng.uniform(-yaw_scale, yaw_scale),
                          rng.uniform(-trans_scale, trans_scale, 3),
                          np.zeros((4, 4)))


def rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-9)
    return float(np.abs(a - b).max() / scale)


def _linear_samples(w0, a0, w1, a1, dt):
    return [ImuSample(0.0, w0, a0), ImuSample(dt, w0 + dt * w1, a0 + dt * a1)]


def fd_error_dynamics(variant, x, u0, u1, gravity=GRAVITY,
                      dt=_FD_DT, eps=_FD_EPS):
    """F by Richardson-extrapolated differences of the nonlinear error flow."""
    retraction = VINS_RETRACTIONS[variant]
    w0, a0 = u0
    w1, a1 = u1
    dim = x.dim

    base = {h: propagate_mean(x, _linear_samples(w0, a0, w1, a1, h), gravity)
            for h in (0.5 * dt, dt)}

    def err_after(e0, h):
        xp = propagate_mean(retraction.retract(x, e0),
                            _linear_samples(w0, a0, w1, a1, h), gravity)
        return retraction.inverse_retract(xp, base[h])

    F = np.empty((dim, dim))
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = eps
        d_half = (err_after(e, 0.5 * dt) - err_after(-e, 0.5 * dt)) / (0.5 * dt)
        d_full = (err_after(e, dt) - err_after(-e, dt)) / dt
        # subtract the unpropagated offset 2e, then Richardson in dt
        d_half -= 2.0 * e / (0.5 * dt)
        d_full -= 2.0 * e / dt
        F[:, i] = (2.0 * d_half - d_full) / (2.0 * eps)
    return F


def _truth_rates(R, v, bg, ba, w, a, n, g):
    wb = w - bg - n[0:3]
    return (R @ skew(wb), R @ (a - ba - n[6:9]) + g, v, n[3:6], n[9:12])


def noisy_propagate(x: VinsState, n, u0, u1, dt, gravity=GRAVITY, steps=4):
    """True-state RK4 with a constant noise vector entering as in the
    motion model (subtracted from the rates, driving the bias walks)."""
    w0, a0 = u0
    w1, a1 = u1
    imu = x.imu
    R, v, p = imu.R.copy(), imu.v.copy(), imu.p.copy()
    bg, ba = imu.bg.copy(), imu.ba.copy()
    h = dt / steps
    g = np.asarray(gravity, dtype=float)
    for s in range(steps):
        t0 = s * h

        def f(st, tau):
            w = w0 + tau * w1
            a = a0 + tau * a1
            return _truth_rates(st[0], st[1], st[3], st[4], w, a, n, g)

        st = (R, v, p, bg, ba)
        k1 = f(st, t0)
        st2 = tuple(st[j] + 0.5 * h * k1[j] for j in range(5))
        k2 = f(st2, t0 + 0.5 * h)
        st3 = tuple(st[j] + 0.5 * h * k2[j] for j in range(5))
        k3 = f(st3, t0 + 0.5 * h)
        st4 = tuple(st[j] + h * k3[j] for j in range(5))
        k4 = f(st4, t0 + h)
        R, v, p, bg, ba = tuple(
            st[j] + (h / 6.0) * (k1[j] + 2 * k2[j] + 2 * k3[j] + k4[j])
            for j in range(5))
    return VinsState(ImuState(R, v, p, bg, ba), x.landmarks.copy())


def fd_noise_jacobian(variant, x, u0, u1, gravity=GRAVITY,
                      dt=_FD_DT, eps=_FD_EPS):
    """G by differencing noisy against clean true-state propagation."""
    retraction = VINS_RETRACTIONS[variant]
    base = {h: noisy_propagate(x, np.zeros(12), u0, u1, h, gravity)
            for h in (0.5 * dt, dt)}

    def err_after(n, h):
        xp = noisy_propagate(x, n, u0, u1, h, gravity)
        return retraction.inverse_retract(xp, base[h])

    G = np.empty((x.dim, 12))
    for i in range(12):
        n = np.zeros(12)
        n[i] = eps
        d_half = (err_after(n, 0.5 * dt) - err_after(-n, 0.5 * dt)) / (0.5 * dt)
        d_full = (err_after(n, dt) - err_after(-n, dt)) / dt
        G[:, i] = (2.0 * d_half - d_full) / (2.0 * eps)
    return G


def fd_measurement_jacobian(variant, x, cam, landmark_index, eps=1e-6):
    retraction = VINS_RETRACTIONS[variant]

    def h_of(e):
        xe = retraction.retract(x, e)
        imu = xe.imu
        return project(cam, imu.R.T @ (xe.landmarks[landmark_index] - imu.p))

    H = np.empty((2, x.dim))
    for i in range(x.dim):
        e = np.zeros(x.dim)
        e[i] = eps
        H[:, i] = (h_of(e) - h_of(-e)) / (2.0 * eps)
    return H


def fd_projection_jacobian(cam, x_imu, eps=1e-6):
    J = np.empty((2, 3))
    for i in range(3):
        d = np.zeros(3)
        d[i] = eps
        J[:, i] = (project(cam, x_imu + d) - project(cam, x_imu - d)) / (2 * eps)
    return J


def fd_clone_jacobian(variant, state: MsckfState, T_IC: Pose, eps=1e-6):
    """Jacobian of the new clone's error w.r.t. the window error."""
    inv = pose_inverse_retract if variant == "riekf" else conekf_pose_inverse_retract

    def clone_of(s):
        return Pose(s.imu.R @ T_IC.R, s.imu.R @ T_IC.p + s.imu.p)

    base = clone_of(state)
    J = np.empty((6, state.dim))
    for i in range(state.dim):
        e = np.zeros(state.dim)
        e[i] = eps
        plus = clone_of(msckf_retract(state, e, variant))
        minus = clone_of(msckf_retract(state, -e, variant))
        J[:, i] = (inv(plus, base) - inv(minus, base)) / (2.0 * eps)
    return J


def fd_track_jacobian(variant, state: MsckfState, fhat, anchor, k, cam,
                      eps=1e-6):
    """[H_x | H_f] of one observation through the anchored landmark error."""
    dim = state.dim

    def h_of(e_full):
        e_win, e_f = e_full[:dim], e_full[dim:]
        s = msckf_retract(state, e_win, variant)
        if variant == "riekf":
            eth = e_win[IMU_DIM + 6 * anchor: IMU_DIM + 6 * anchor + 3]
            f = exp_so3(eth) @ fhat + left_jacobian(eth) @ e_f
        else:
            f = fhat + e_f
        pose = s.clones[k]
        return pinhole_project(cam, pose.R.T @ (f - pose.p))

    H = np.empty((2, dim + 3))
    for i in range(dim + 3):
        e = np.zeros(dim + 3)
        e[i] = eps
        H[:, i] = (h_of(e) - h_of(-e)) / (2.0 * eps)
    return H


# ---------------------------------------------------------------------------
# Audit driver
# ---------------------------------------------------------------------------

@dataclass
class AuditResult:
    name: str
    max_rel_err: float
    samples: int

    def ok(self, tol):
        return self.max_rel_err <= tol


def _random_input(rng):
    return ((rng.uniform(-0.8, 0.8, 3), rng.uniform(-3, 3, 3) - GRAVITY),
            (rng.uniform(-0.5, 0.5, 3), rng.uniform(-0.5, 0.5, 3)))


def _visible_state(rng, cam, num_landmarks=2):
    # rejection-sample states whose landmarks project inside the frustum
    for _ in range(200):
        x = random_vins_state(rng, num_landmarks)
        try:
            for i in range(num_landmarks):
                imu = x.imu
                project(cam, imu.R.T @ (x.landmarks[i] - imu.p))
        except filters_mod.BehindCameraError:
            continue
        return x
    raise RuntimeError("could not sample a state with visible landmarks")


def _msckf_track_setup(rng, variant, cam, num_clones=4):
    for _ in range(200):
        state = random_msckf_state(rng, num_clones)
        anchor = 0
        k = int(rng.integers(0, num_clones))
        f = state.clones[k].transform_point(
            rng.uniform([-1.0, -1.0, 2.0], [1.0, 1.0, 6.0]))
        depths = [(c.R.T @ (f - c.p))[2] for c in (state.clones[anchor],
                                                   state.clones[k])]
        if min(depths) > 0.1:
            return state, f, anchor, k
    raise RuntimeError("could not sample a visible track geometry")


def audit_all(samples=20, seed=0, num_landmarks=2):
    """Run the full audit; returns a list of AuditResult."""
    if samples <= 0:
        raise ValueError("samples must be positive")
    rng = np.random.default_rng(seed)
    cam = CameraModel.default()
    results = []

    def run(name, fn):
        worst = 0.0
        for _ in range(samples):
            worst = max(worst, fn(rng))
        results.append(AuditResult(name, worst, samples))

    for variant in ("riekf", "conekf"):
        F_of = getattr(filters_mod, f"{variant}_F")
        G_of = getattr(filters_mod, f"{variant}_G")
        H_of = getattr(filters_mod, f"{variant}_H")

        def check_F(rng, F_of=F_of, variant=variant):
            x = random_vins_state(rng, num_landmarks)
            u0, u1 = _random_input(rng)
            return rel_err(F_of(x, u0, GRAVITY),
                           fd_error_dynamics(variant, x, u0, u1))

        def check_G(rng, G_of=G_of, variant=variant):
            x = random_vins_state(rng, num_landmarks)
            u0, u1 = _random_input(rng)
            Q = np.diag(rng.uniform(0.2, 1.0, 12))
            G = G_of(x)
            G_fd = fd_noise_jacobian(variant, x, u0, u1)
            return rel_err(G @ Q @ G.T, G_fd @ Q @ G_fd.T)

        def check_H(rng, H_of=H_of, variant=variant):
            x = _visible_state(rng, cam, num_landmarks)
            i = int(rng.integers(0, num_landmarks))
            return rel_err(H_of(x, cam, i),
                           fd_measurement_jacobian(variant, x, cam, i))

        def check_W(rng, variant=variant):
            x = random_vins_state(rng, num_landmarks)
            t = random_transform(rng)
            M, _ = transform_error_jacobians(x, t, VINS_RETRACTIONS[variant])
            W = states_mod.transform_equivariance_matrix(x, t, variant)
            return rel_err(W, M)

        def check_N(rng, variant=variant):
            x = random_vins_state(rng, num_landmarks)
            t = random_transform(rng)
            _, N_fd = transform_error_jacobians(x, t, VINS_RETRACTIONS[variant])
            N = states_mod.transform_noise_jacobian(x, t, variant)
            return rel_err(N, N_fd)

        run(f"{variant}_F", check_F)
        run(f"{variant}_GQG", check_G)
        run(f"{variant}_H", check_H)
        run(f"{variant}_W", check_W)
        run(f"{variant}_N", check_N)

    def check_projection(rng):
        x = _visible_state(rng, cam, 1)
        pt = x.imu.R.T @ (x.landmarks[0] - x.imu.p)
        return rel_err(project_jacobian(cam, pt), fd_projection_jacobian(cam, pt))

    run("projection", check_projection)

    T_IC = cam.T_CI.inverse()
    for variant, label in (("riekf", "ri-msckf"), ("conekf", "msckf")):

        def check_J(rng, variant=variant):
            state = random_msckf_state(rng)
            d = state.dim
            J = np.zeros((6, d))
            if variant == "riekf":
                J[0:3, 0:3] = np.eye(3)
                J[3:6, 6:9] = np.eye(3)
            else:
                J[0:3, 0:3] = T_IC.R.T
                J[3:6, 0:3] = -state.imu.R @ skew(T_IC.p)
                J[3:6, 6:9] = np.eye(3)
            return rel_err(J, fd_clone_jacobian(variant, state, T_IC))

        def check_track(rng, variant=variant):
            state, f, anchor, k = _msckf_track_setup(rng, variant, cam)
            track = msckf_mod.FeatureTrack(0, [(state.clone_times[anchor],
                                                np.zeros(2)),
                                               (state.clone_times[k],
                                                np.zeros(2))])
            # analytic rows for the single observation at clone k
            obs_track = msckf_mod.FeatureTrack(
                0, [(state.clone_times[anchor], np.zeros(2))] if k == anchor
                else [(state.clone_times[anchor], np.zeros(2)),
                      (state.clone_times[k], np.zeros(2))])
            Hx, Hf, _ = msckf_mod.track_jacobians(obs_track, state, f, cam,
                                                  variant)
            row = Hx.shape[0] - 2
            analytic = np.hstack([Hx[row:row + 2], Hf[row:row + 2]])
            fd = fd_track_jacobian(variant, state, f, anchor, k, cam)
            return rel_err(analytic, fd)

        def check_W_win(rng, variant=variant):
            state = random_msckf_state(rng)
            t = random_transform(rng)
            M, _ = transform_error_jacobians(state, t, msckf_retraction(variant))
            W = states_mod.transform_equivariance_matrix(state, t, variant)
            return rel_err(W, M)

        def check_N_win(rng, variant=variant):
            state = random_msckf_state(rng)
            t = random_transform(rng)
            _, N_fd = transform_error_jacobians(state, t, msckf_retraction(variant))
            N = states_mod.transform_noise_jacobian(state, t, variant)
            return rel_err(N, N_fd)

        run(f"{label}_clone_J", check_J)
        run(f"{label}_track", check_track)
        run(f"{label}_W", check_W_win)
        run(f"{label}_N", check_N_win)

    return results
