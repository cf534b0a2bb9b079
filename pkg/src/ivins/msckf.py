"""Sliding-window filters: baseline MSCKF and its right-invariant variant.

The two variants share window management, triangulation and the null-space
update; they differ in the IMU/clone retraction, the 15x15 propagation
Jacobians, the clone-augmentation Jacobian and the per-track measurement
Jacobians (which, for the right-invariant variant, couple the landmark to
the anchor clone).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ekf import ekf_update, _integrate
from .filters import FilterTrace, conekf_F, conekf_G, riekf_F, riekf_G
from .lie import Pose, skew
from .states import (GRAVITY, IMU_DIM, GaussianBelief, MsckfState, VinsState,
                     msckf_retraction)

MIN_BASELINE = 0.02  # m; triangulation is rejected below this ray separation
GN_MAX_ITERS = 10
GN_STEP_TOL = 1e-8


@dataclass
class FeatureTrack:
    """Observations of one landmark across window clones."""

    landmark_id: int
    observations: list  # list[(timestamp, uv)]


@dataclass
class WindowConfig:
    max_clones: int = 10
    min_track_len: int = 5
    chi2_gate: float = None  # e.g. 0.95; None disables gating

    def __post_init__(self):
        if self.max_clones < 2:
            raise ValueError("max_clones must be at least 2")


def triangulate(track: FeatureTrack, clone_poses, cam):
    """Gauss-Newton landmark triangulation from window observations.

    ``clone_poses`` maps timestamp -> camera Pose.  Returns the landmark or
    None when the geometry is degenerate or the solve fails.
    """
    if len(track.observations) < 2:
        return None
    poses = [clone_poses[t] for t, _ in track.observations]
    Rs = np.array([c.R for c in poses])
    ps = np.array([c.p for c in poses])
    uvs = np.array([uv for _, uv in track.observations], dtype=float)

    if np.linalg.norm(ps[-1] - ps[0]) < MIN_BASELINE:
        return None
    f = _midpoint_init(poses[0], uvs[0], poses[-1], uvs[-1], cam)
    if f is None:
        return None

    fxy = np.array([cam.fx, cam.fy])
    converged = False
    for _ in range(GN_MAX_ITERS):
        x_cam = np.einsum("mji,mj->mi", Rs, f - ps)
        z = x_cam[:, 2]
        if np.any(z <= cam.z_min):
            return None
        pred = fxy * x_cam[:, :2] / z[:, None] + np.array([cam.cx, cam.cy])
        r = uvs - pred
        # rows of J: d(pixel)/d(f) = pinhole jacobian @ R^T
        PJ = np.zeros((len(z), 2, 3))
        PJ[:, 0, 0] = cam.fx / z
        PJ[:, 1, 1] = cam.fy / z
        PJ[:, 0, 2] = -cam.fx * x_cam[:, 0] / (z * z)
        PJ[:, 1, 2] = -cam.fy * x_cam[:, 1] / (z * z)
        J = np.einsum("mab,mcb->mac", PJ, Rs)
        JtJ = np.einsum("mai,maj->ij", J, J)
        Jtr = np.einsum("mai,ma->i", J, r)
        step = _solve3(JtJ, Jtr)
        if step is None:
            return None
        f = f + step
        if np.linalg.norm(step) < GN_STEP_TOL:
            converged = True
            break
    if not converged:
        return None

    depths = np.einsum("mj,mj->m", Rs[:, :, 2], f - ps)
    if np.any(depths <= cam.z_min):
        return None
    return f


def _solve3(A, b):
    """Cramer solve for the 3x3 normal equations; None when singular."""
    det = (A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
           - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
           + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))
    if abs(det) < 1e-300:
        return None
    x = np.empty(3)
    for i in range(3):
        M = A.copy()
        M[:, i] = b
        x[i] = (M[0, 0] * (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
                - M[0, 1] * (M[1, 0] * M[2, 2] - M[1, 2] * M[2, 0])
                + M[0, 2] * (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0])) / det
    return x


def _ray(pose: Pose, uv, cam):
    d = np.array([(uv[0] - cam.cx) / cam.fx, (uv[1] - cam.cy) / cam.fy, 1.0])
    d = pose.R @ d
    return d / np.linalg.norm(d)


def _midpoint_init(pose_a, uv_a, pose_b, uv_b, cam):
    da, db = _ray(pose_a, uv_a, cam), _ray(pose_b, uv_b, cam)
    oa, ob = pose_a.p, pose_b.p
    a11 = da @ da
    a12 = -(da @ db)
    a22 = db @ db
    det = a11 * a22 - a12 * a12
    if abs(det) < 1e-12:
        return None  # parallel rays
    rhs = ob - oa
    s = (a22 * (rhs @ da) + a12 * (rhs @ db)) / det
    t = -(a12 * (rhs @ da) + a11 * (rhs @ db)) / det
    return 0.5 * (oa + s * da + ob + t * db)


def track_jacobians(track: FeatureTrack, state: MsckfState, fhat, cam,
                    variant: str):
    """Stacked (H_x, H_f, residuals) for one triangulated track.

    The landmark error is anchored at the earliest observing clone for the
    right-invariant variant; behind-camera observations are dropped from
    the stack.
    """
    if variant not in ("riekf", "conekf"):
        raise ValueError(f"unknown variant {variant!r}")
    time_index = {t: i for i, t in enumerate(state.clone_times)}
    anchor = time_index[track.observations[0][0]]
    dim = state.dim

    idx = np.array([time_index[t] for t, _ in track.observations])
    Rs = np.array([state.clones[k].R for k in idx])
    ps = np.array([state.clones[k].p for k in idx])
    uvs = np.array([uv for _, uv in track.observations], dtype=float)

    x_cam = np.einsum("mji,mj->mi", Rs, fhat - ps)
    ok = x_cam[:, 2] > cam.z_min
    if not np.any(ok):
        return None
    idx, Rs, ps, uvs, x_cam = idx[ok], Rs[ok], ps[ok], uvs[ok], x_cam[ok]
    m = idx.size

    z = x_cam[:, 2]
    dpi = np.zeros((m, 2, 3))
    dpi[:, 0, 0] = cam.fx / z
    dpi[:, 1, 1] = cam.fy / z
    dpi[:, 0, 2] = -cam.fx * x_cam[:, 0] / (z * z)
    dpi[:, 1, 2] = -cam.fy * x_cam[:, 1] / (z * z)
    Rt = np.swapaxes(Rs, 1, 2)
    dpi_Rt = np.einsum("mab,mbc->mac", dpi, Rt)

    pred = (np.array([cam.fx, cam.fy]) * x_cam[:, :2] / z[:, None]
            + np.array([cam.cx, cam.cy]))
    r = (uvs - pred).ravel()
    Hf = dpi_Rt.reshape(2 * m, 3)

    Hx = np.zeros((2 * m, dim))
    if variant == "riekf":
        dpi_RtS = np.einsum("mab,bc->mac", dpi_Rt, skew(fhat))
        col_j = IMU_DIM + 6 * anchor
        for i, k in enumerate(idx):
            col_k = IMU_DIM + 6 * k
            rows = slice(2 * i, 2 * i + 2)
            Hx[rows, col_j:col_j + 3] += -dpi_RtS[i]
            Hx[rows, col_k:col_k + 3] += dpi_RtS[i]
            Hx[rows, col_k + 3:col_k + 6] = -dpi_Rt[i]
    else:
        for i, k in enumerate(idx):
            col_k = IMU_DIM + 6 * k
            rows = slice(2 * i, 2 * i + 2)
            Hx[rows, col_k:col_k + 3] = dpi[i] @ skew(x_cam[i])
            Hx[rows, col_k + 3:col_k + 6] = -dpi_Rt[i]
    return Hx, Hf, r


def nullspace_project(Hx, Hf, r):
    """Project the track system onto the left null space of H_f.

    The orthonormal basis keeps the measurement noise isotropic.  Returns
    None when there are no null directions (2M - 3 <= 0).
    """
    m = Hf.shape[0]
    if m - 3 <= 0:
        return None
    Qfull, _ = np.linalg.qr(Hf, mode="complete")
    basis = Qfull[:, 3:]
    return basis.T @ Hx, basis.T @ r


class MsckfFilter:
    """Sliding-window visual-inertial filter."""

    def __init__(self, variant, camera, noise, belief: GaussianBelief,
                 window: WindowConfig = None, gravity=GRAVITY, trace=False):
        if variant not in ("riekf", "conekf"):
            raise ValueError(f"unknown retraction variant {variant!r}")
        self.variant = variant
        self.camera = camera
        self.noise = noise
        self.window = window if window is not None else WindowConfig()
        self.gravity = np.asarray(gravity, dtype=float)
        self.retraction = msckf_retraction(variant)
        if variant == "riekf":
            self._F, self._G = riekf_F, riekf_G
        else:
            self._F, self._G = conekf_F, conekf_G
        mean = belief.mean
        if not isinstance(mean, MsckfState):
            mean = MsckfState(mean.copy(), [], [])
            P = np.asarray(belief.cov, dtype=float)
            belief = GaussianBelief(mean, P.copy())
        self.belief = belief
        self.tracks = {}  # landmark_id -> list[(t, uv)]
        self.trace = FilterTrace() if trace else None
        self._chi2_cache = {}

    # -- propagation --------------------------------------------------------

    def propagate(self, samples):
        """Propagate the IMU block; clone blocks see the identity."""
        state = self.belief.mean
        imu_as_vins = VinsState(state.imu, np.zeros((0, 3)))
        new_imu, Phi, Qd = _integrate(imu_as_vins, samples, self.gravity,
                                      F_of=self._F, G_of=self._G,
                                      Q=self.noise.Q)
        P = self.belief.cov.copy()
        P[:IMU_DIM, :IMU_DIM] = Phi @ P[:IMU_DIM, :IMU_DIM] @ Phi.T + Qd
        P[:IMU_DIM, IMU_DIM:] = Phi @ P[:IMU_DIM, IMU_DIM:]
        P[IMU_DIM:, :IMU_DIM] = P[:IMU_DIM, IMU_DIM:].T
        P = 0.5 * (P + P.T)
        self.belief = GaussianBelief(
            MsckfState(new_imu.imu, list(state.clone_times),
                       [Pose(c.R.copy(), c.p.copy()) for c in state.clones]), P)
        if self.trace is not None:
            self.trace.phis.append(Phi)
        return Phi

    # -- clone management ----------------------------------------------------

    def augment_clone(self, t):
        """Append the current camera pose and expand the covariance."""
        state = self.belief.mean
        if state.num_clones >= self.window.max_clones:
            raise ValueError("window full; prune before augmenting")
        T_IC = self.camera.T_CI.inverse()
        imu = state.imu
        clone = Pose(imu.R @ T_IC.R, imu.R @ T_IC.p + imu.p)

        d = state.dim
        J = np.zeros((6, d))
        if self.variant == "riekf":
            J[0:3, 0:3] = np.eye(3)
            J[3:6, 6:9] = np.eye(3)
        else:
            J[0:3, 0:3] = T_IC.R.T
            J[3:6, 0:3] = -imu.R @ skew(T_IC.p)
            J[3:6, 6:9] = np.eye(3)

        P = self.belief.cov
        PJt = P @ J.T
        P_new = np.block([[P, PJt], [PJt.T, J @ PJt]])
        P_new = 0.5 * (P_new + P_new.T)
        mean = MsckfState(imu.copy(), list(state.clone_times) + [t],
                          [Pose(c.R.copy(), c.p.copy()) for c in state.clones]
                          + [clone])
        self.belief = GaussianBelief(mean, P_new)

    def prune_oldest(self):
        """Marginalize the oldest clone (drop its rows and columns)."""
        state = self.belief.mean
        if state.num_clones == 0:
            raise ValueError("no clones to prune")
        keep = np.r_[np.arange(IMU_DIM),
                     np.arange(IMU_DIM + 6, state.dim)]
        P = self.belief.cov[np.ix_(keep, keep)]
        mean = MsckfState(state.imu.copy(), list(state.clone_times[1:]),
                          [Pose(c.R.copy(), c.p.copy()) for c in state.clones[1:]])
        self.belief = GaussianBelief(mean, P)

    # -- update --------------------------------------------------------------

    def _chi2_threshold(self, dof):
        thr = self._chi2_cache.get(dof)
        if thr is None:
            from scipy.stats import chi2
            thr = chi2.ppf(self.window.chi2_gate, dof)
            self._chi2_cache[dof] = thr
        return thr

    def update_tracks(self, tracks):
        """Triangulate, project out landmark errors, and apply one stacked
        EKF update over all usable tracks."""
        state = self.belief.mean
        clone_poses = dict(zip(state.clone_times, state.clones))
        rows_H, rows_r = [], []
        for track in tracks:
            if len(track.observations) < 2:
                continue
            fhat = triangulate(track, clone_poses, self.camera)
            if fhat is None:
                continue
            system = track_jacobians(track, state, fhat, self.camera,
                                     self.variant)
            if system is None:
                continue
            Hx, Hf, r = system
            projected = nullspace_project(Hx, Hf, r)
            if projected is None:
                continue
            Hp, rp = projected
            if self.window.chi2_gate is not None:
                S = Hp @ self.belief.cov @ Hp.T \
                    + self.noise.pixel_sigma ** 2 * np.eye(rp.size)
                gamma = rp @ np.linalg.solve(S, rp)
                if gamma > self._chi2_threshold(rp.size):
                    continue
            rows_H.append(Hp)
            rows_r.append(rp)
        if not rows_H:
            return None
        H = np.vstack(rows_H)
        r = np.concatenate(rows_r)
        V = self.noise.pixel_sigma ** 2 * np.eye(r.size)
        result = ekf_update(self.belief, H, r, V, self.retraction)
        self.belief = result.belief
        if self.trace is not None:
            self.trace.hs.append(H)
            if result.accepted:
                self.trace.gains.append(result.gain)
            else:
                self.trace.rejected += 1
        return result

    # -- frame loop ----------------------------------------------------------

    def process_frame(self, t, samples, measurements):
        """One camera frame: propagate, consume finished tracks, manage the
        window, then start/extend tracks with the new measurements."""
        if samples is not None:
            self.propagate(samples)

        seen = {m.landmark_id for m in measurements}
        consumable = []
        for lid in [k for k in self.tracks if k not in seen]:
            obs = self.tracks.pop(lid)
            if len(obs) >= self.window.min_track_len:
                consumable.append(FeatureTrack(lid, obs))

        state = self.belief.mean
        window_full = state.num_clones >= self.window.max_clones
        if window_full:
            t_old = state.clone_times[0]
            for lid in list(self.tracks):
                obs = self.tracks[lid]
                if obs and obs[0][0] == t_old:
                    if len(obs) >= self.window.min_track_len:
                        consumable.append(FeatureTrack(lid, self.tracks.pop(lid)))
                    else:
                        obs.pop(0)
                        if not obs:
                            self.tracks.pop(lid)

        result = self.update_tracks(consumable) if consumable else None
        if window_full:
            self.prune_oldest()
        self.augment_clone(t)
        for m in measurements:
            self.tracks.setdefault(m.landmark_id, []).append((t, m.uv))
        return result

    @property
    def imu_estimate(self):
        return self.belief.mean.imu
