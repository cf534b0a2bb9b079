"""Full-state VINS filters: analytic F/G/H providers and the pinhole camera.

Two filter variants share one EKF engine and differ only in their
retraction and Jacobians:

- ``conekf``: conventional global-error linearization; F depends on the
  IMU reading and H has a nonzero orientation column.
- ``riekf``: right-invariant error; F is input-independent and H touches
  only the position and landmark columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ekf import GaussianBelief, ekf_update, propagate_belief
from .lie import Pose, skew
from .states import (GRAVITY, IMU_DIM, VINS_RETRACTIONS, VinsState)


class BehindCameraError(ValueError):
    """Raised when a point falls behind (or too close to) the camera."""


@dataclass
class CameraModel:
    """Pinhole camera with extrinsics mapping IMU-frame points to the
    camera frame."""

    T_CI: Pose
    fx: float = 460.0
    fy: float = 460.0
    cx: float = 376.0
    cy: float = 240.0
    width: int = 752
    height: int = 480
    z_min: float = 0.01
    fov_check: bool = True  # 90-degree visibility cone used by the simulator

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @classmethod
    def default(cls):
        # forward-looking camera: optical axis along body +x, image x to the
        # right (-body y), image y down (-body z)
        R_CI = np.array([[0.0, -1.0, 0.0],
                         [0.0, 0.0, -1.0],
                         [1.0, 0.0, 0.0]])
        center_imu = np.array([0.05, 0.0, 0.02])
        return cls(T_CI=Pose(R_CI, -R_CI @ center_imu))


def pinhole_project(cam: CameraModel, x_cam):
    """Project a camera-frame point to pixels."""
    x, y, z = np.asarray(x_cam, dtype=float)
    if z <= cam.z_min:
        raise BehindCameraError(f"point depth {z:.4f} m is behind the camera")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def pinhole_jacobian(cam: CameraModel, x_cam):
    """2x3 Jacobian of the pinhole projection at a camera-frame point."""
    x, y, z = np.asarray(x_cam, dtype=float)
    if z <= cam.z_min:
        raise BehindCameraError(f"point depth {z:.4f} m is behind the camera")
    return np.array([[cam.fx / z, 0.0, -cam.fx * x / (z * z)],
                     [0.0, cam.fy / z, -cam.fy * y / (z * z)]])


def project(cam: CameraModel, x_imu):
    """Measurement function for an IMU-frame point (extrinsics + pinhole)."""
    return pinhole_project(cam, cam.T_CI.transform_point(x_imu))


def project_jacobian(cam: CameraModel, x_imu):
    """2x3 Jacobian of :func:`project` with respect to the IMU-frame point."""
    x_cam = cam.T_CI.transform_point(x_imu)
    return pinhole_jacobian(cam, x_cam) @ cam.T_CI.R


def in_view(cam: CameraModel, x_cam):
    """Frustum / FOV gate used by the simulator for visibility decisions."""
    x, y, z = np.asarray(x_cam, dtype=float)
    if z <= cam.z_min:
        return False
    if cam.fov_check:
        if z / np.sqrt(x * x + y * y + z * z) < np.cos(np.pi / 4.0):
            return False
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    return 0.0 <= u < cam.width and 0.0 <= v < cam.height


def vins_measurement(x: VinsState, cam: CameraModel, landmark_index: int):
    """Predicted pixel of one in-state landmark."""
    imu = x.imu
    f_imu = imu.R.T @ (x.landmarks[landmark_index] - imu.p)
    return project(cam, f_imu)


# ---------------------------------------------------------------------------
# Right-invariant Jacobians
# ---------------------------------------------------------------------------

def riekf_F(x: VinsState, u, gravity=GRAVITY):
    """Input-independent propagation Jacobian of the right-invariant error."""
    imu = x.imu
    L = x.num_landmarks
    F = np.zeros((IMU_DIM + 3 * L, IMU_DIM + 3 * L))
    F[3:6, 0:3] = skew(gravity)
    F[6:9, 3:6] = np.eye(3)
    F[0:3, 9:12] = -imu.R
    F[3:6, 9:12] = -skew(imu.v) @ imu.R
    F[6:9, 9:12] = -skew(imu.p) @ imu.R
    F[3:6, 12:15] = -imu.R
    for i in range(L):
        r = IMU_DIM + 3 * i
        F[r:r + 3, 9:12] = -skew(x.landmarks[i]) @ imu.R
    return F


def riekf_G(x: VinsState):
    """Noise Jacobian of the right-invariant error.

    Columns are ordered (n_g, n_bg, n_a, n_ba).  Signs follow the usual
    printed layout; the filter consumes only G Q G^T, which is sign-free.
    """
    imu = x.imu
    L = x.num_landmarks
    G = np.zeros((IMU_DIM + 3 * L, 12))
    G[0:3, 0:3] = imu.R
    G[3:6, 0:3] = skew(imu.v) @ imu.R
    G[6:9, 0:3] = skew(imu.p) @ imu.R
    G[9:12, 3:6] = np.eye(3)
    G[3:6, 6:9] = imu.R
    G[12:15, 9:12] = np.eye(3)
    for i in range(L):
        r = IMU_DIM + 3 * i
        G[r:r + 3, 0:3] = skew(x.landmarks[i]) @ imu.R
    return G


def riekf_H(x: VinsState, cam: CameraModel, landmark_index: int):
    """Measurement Jacobian of the right-invariant error; the orientation,
    velocity and bias columns are exactly zero."""
    imu = x.imu
    f_imu = imu.R.T @ (x.landmarks[landmark_index] - imu.p)
    dh = project_jacobian(cam, f_imu)
    H = np.zeros((2, x.dim))
    H[:, 6:9] = -dh @ imu.R.T
    r = IMU_DIM + 3 * landmark_index
    H[:, r:r + 3] = dh @ imu.R.T
    return H


# ---------------------------------------------------------------------------
# Conventional Jacobians (validated against finite differences)
# ---------------------------------------------------------------------------

def conekf_F(x: VinsState, u, gravity=GRAVITY):
    """Propagation Jacobian of the conventional error; depends on the IMU
    reading through the bias-corrected rates."""
    imu = x.imu
    w, a = u
    L = x.num_landmarks
    F = np.zeros((IMU_DIM + 3 * L, IMU_DIM + 3 * L))
    F[0:3, 0:3] = -skew(w - imu.bg)
    F[0:3, 9:12] = -np.eye(3)
    F[3:6, 0:3] = -imu.R @ skew(a - imu.ba)
    F[3:6, 12:15] = -imu.R
    F[6:9, 3:6] = np.eye(3)
    return F


def conekf_G(x: VinsState):
    imu = x.imu
    L = x.num_landmarks
    G = np.zeros((IMU_DIM + 3 * L, 12))
    G[0:3, 0:3] = -np.eye(3)
    G[9:12, 3:6] = np.eye(3)
    G[3:6, 6:9] = -imu.R
    G[12:15, 9:12] = np.eye(3)
    return G


def conekf_H(x: VinsState, cam: CameraModel, landmark_index: int):
    imu = x.imu
    f_imu = imu.R.T @ (x.landmarks[landmark_index] - imu.p)
    dh = project_jacobian(cam, f_imu)
    H = np.zeros((2, x.dim))
    H[:, 0:3] = dh @ skew(f_imu)
    H[:, 6:9] = -dh @ imu.R.T
    r = IMU_DIM + 3 * landmark_index
    H[:, r:r + 3] = dh @ imu.R.T
    return H


VARIANT_PROVIDERS = {
    "riekf": (riekf_F, riekf_G, riekf_H),
    "conekf": (conekf_F, conekf_G, conekf_H),
}


# ---------------------------------------------------------------------------
# Full-state filter
# ---------------------------------------------------------------------------

@dataclass
class FilterTrace:
    """Per-step diagnostics recorded when tracing is enabled."""

    phis: list = field(default_factory=list)
    hs: list = field(default_factory=list)
    gains: list = field(default_factory=list)
    rejected: int = 0


class VinsEkf:
    """EKF over the full VINS state with a fixed landmark map in the state.

    ``landmark_ids`` assigns a simulator landmark id to each state slot so
    that measurement streams can be routed to state indices.
    """

    def __init__(self, variant, camera, noise, belief: GaussianBelief,
                 landmark_ids=None, gravity=GRAVITY, trace=False):
        if variant not in VARIANT_PROVIDERS:
            raise ValueError(f"unknown filter variant {variant!r}")
        self.variant = variant
        self.camera = camera
        self.noise = noise
        self.belief = belief
        self.gravity = np.asarray(gravity, dtype=float)
        self.retraction = VINS_RETRACTIONS[variant]
        self.F_of, self.G_of, self.H_of = VARIANT_PROVIDERS[variant]
        n = belief.mean.num_landmarks
        self.landmark_ids = list(range(n)) if landmark_ids is None else list(landmark_ids)
        if len(self.landmark_ids) != n:
            raise ValueError("landmark_ids length must match the state")
        self._index = {lid: i for i, lid in enumerate(self.landmark_ids)}
        self.trace = FilterTrace() if trace else None

    def propagate(self, samples):
        self.belief, Phi, _ = propagate_belief(
            self.belief, samples, self.F_of, self.G_of, self.noise.Q,
            gravity=self.gravity)
        if self.trace is not None:
            self.trace.phis.append(Phi)
        return Phi

    def predict(self, landmark_index):
        return vins_measurement(self.belief.mean, self.camera, landmark_index)

    def update(self, measurements):
        """Stacked update with every measurement matching a state landmark."""
        rows_H, rows_r = [], []
        for m in measurements:
            idx = self._index.get(m.landmark_id)
            if idx is None:
                continue
            try:
                z_hat = self.predict(idx)
                H = self.H_of(self.belief.mean, self.camera, idx)
            except BehindCameraError:
                continue
            rows_H.append(H)
            rows_r.append(m.uv - z_hat)
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

    def process_frame(self, t, samples, measurements):
        """Propagate to the frame time (if samples given) and update."""
        if samples is not None:
            self.propagate(samples)
        return self.update(measurements)

    @property
    def imu_estimate(self):
        return self.belief.mean.imu
