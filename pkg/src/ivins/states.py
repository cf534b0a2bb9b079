"""State tuples, retraction pairs, and the unobservable transformation.

Error-vector block ordering is fixed as [theta, v, p, b_g, b_a, f_1..f_L]
for full VINS states and [imu(15), clone_1(6), ..., clone_m(6)] for window
states.  All retractions satisfy retract(x, 0) == x exactly and round-trip
with their inverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import Pose, exp_so3, left_jacobian, log_so3, skew

GRAVITY = np.array([0.0, 0.0, -9.81])

IMU_DIM = 15
CLONE_DIM = 6


def _vec3(x, name):
    x = np.asarray(x, dtype=float)
    if x.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {x.shape}")
    return x


@dataclass
class ImuState:
    """IMU state: orientation, velocity, position, gyro and accel biases."""

    R: np.ndarray
    v: np.ndarray
    p: np.ndarray
    bg: np.ndarray
    ba: np.ndarray

    def copy(self):
        return ImuState(self.R.copy(), self.v.copy(), self.p.copy(),
                        self.bg.copy(), self.ba.copy())

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))


@dataclass
class VinsState:
    """IMU state plus L landmark positions (error dimension 15 + 3L)."""

    imu: ImuState
    landmarks: np.ndarray  # (L, 3)

    def __post_init__(self):
        self.landmarks = np.atleast_2d(np.asarray(self.landmarks, dtype=float))
        if self.landmarks.size == 0:
            self.landmarks = np.zeros((0, 3))
        if self.landmarks.shape[1] != 3:
            raise ValueError("landmarks must have shape (L, 3)")

    @property
    def num_landmarks(self):
        return self.landmarks.shape[0]

    @property
    def dim(self):
        return IMU_DIM + 3 * self.num_landmarks

    def copy(self):
        return VinsState(self.imu.copy(), self.landmarks.copy())


@dataclass
class MsckfState:
    """IMU state plus an ordered window of cloned camera poses."""

    imu: ImuState
    clone_times: list = field(default_factory=list)
    clones: list = field(default_factory=list)  # list[Pose], same order

    def __post_init__(self):
        if len(self.clone_times) != len(self.clones):
            raise ValueError("clone_times and clones must have equal length")
        if any(t2 <= t1 for t1, t2 in zip(self.clone_times, self.clone_times[1:])):
            raise ValueError("clone timestamps must be strictly increasing")

    @property
    def num_clones(self):
        return len(self.clones)

    @property
    def dim(self):
        return IMU_DIM + CLONE_DIM * self.num_clones

    def copy(self):
        return MsckfState(self.imu.copy(), list(self.clone_times),
                          [Pose(c.R.copy(), c.p.copy()) for c in self.clones])


@dataclass
class GaussianBelief:
    """Mean state and covariance over the retraction's error coordinates."""

    mean: object
    cov: np.ndarray

    def copy(self):
        return GaussianBelief(self.mean.copy(), self.cov.copy())

    def validate(self, rtol=1e-9):
        d = self.mean.dim
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} != ({d}, {d})")
        scale = max(np.abs(self.cov).max(), 1.0)
        if np.abs(self.cov - self.cov.T).max() > rtol * scale:
            raise ValueError("covariance is not symmetric")
        w = np.linalg.eigvalsh(0.5 * (self.cov + self.cov.T))
        if w.min() < -1e-9 * max(np.trace(self.cov), 1.0):
            raise ValueError("covariance is not PSD up to round-off")


@dataclass
class UnobsTransform:
    """Translation plus rotation about the gravity direction, optionally
    with Gaussian parameters eps = [eps1, eps2] of covariance sigma."""

    theta1: float = 0.0
    theta2: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma: np.ndarray = field(default_factory=lambda: np.zeros((4, 4)))

    def __post_init__(self):
        self.theta2 = _vec3(self.theta2, "theta2")
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.sigma.shape != (4, 4):
            raise ValueError("sigma must be 4x4")

    @classmethod
    def identity(cls):
        return cls()


def unit_gravity(gravity=GRAVITY):
    g = np.asarray(gravity, dtype=float)
    return g / np.linalg.norm(g)


# ---------------------------------------------------------------------------
# Full-state retractions
# ---------------------------------------------------------------------------

def _check_dim(e, d):
    e = np.asarray(e, dtype=float)
    if e.shape != (d,):
        raise ValueError(f"error vector has dimension {e.shape}, expected ({d},)")
    return e


def conekf_retract(xhat: VinsState, e) -> VinsState:
    """Conventional retraction: orientation error is right-multiplied,
    every other block is additive."""
    e = _check_dim(e, xhat.dim)
    imu = xhat.imu
    new_imu = ImuState(imu.R @ exp_so3(e[0:3]), imu.v + e[3:6], imu.p + e[6:9],
                       imu.bg + e[9:12], imu.ba + e[12:15])
    lms = xhat.landmarks + e[15:].reshape(-1, 3)
    return VinsState(new_imu, lms)


def conekf_inverse_retract(x: VinsState, xhat: VinsState):
    if x.num_landmarks != xhat.num_landmarks:
        raise ValueError("landmark counts differ")
    e_theta = _relative_log(xhat.imu.R.T @ x.imu.R)
    e = np.empty(x.dim)
    e[0:3] = e_theta
    e[3:6] = x.imu.v - xhat.imu.v
    e[6:9] = x.imu.p - xhat.imu.p
    e[9:12] = x.imu.bg - xhat.imu.bg
    e[12:15] = x.imu.ba - xhat.imu.ba
    e[15:] = (x.landmarks - xhat.landmarks).ravel()
    return e


def _relative_log(R):
    e = log_so3(R)
    if np.linalg.norm(e) >= np.pi - 1e-9:
        raise ValueError("relative rotation angle too close to pi; "
                         "error coordinates are undefined")
    return e


def riekf_retract(xhat: VinsState, e) -> VinsState:
    """Right-invariant retraction: the orientation error left-multiplies and
    couples into velocity, position and landmarks through exp / J_l."""
    e = _check_dim(e, xhat.dim)
    dR = exp_so3(e[0:3])
    Jl = left_jacobian(e[0:3])  # == J_r(-e_theta)
    imu = xhat.imu
    new_imu = ImuState(dR @ imu.R,
                       dR @ imu.v + Jl @ e[3:6],
                       dR @ imu.p + Jl @ e[6:9],
                       imu.bg + e[9:12], imu.ba + e[12:15])
    ef = e[15:].reshape(-1, 3)
    lms = xhat.landmarks @ dR.T + ef @ Jl.T
    return VinsState(new_imu, lms)


def riekf_inverse_retract(x: VinsState, xhat: VinsState):
    if x.num_landmarks != xhat.num_landmarks:
        raise ValueError("landmark counts differ")
    e_theta = _relative_log(x.imu.R @ xhat.imu.R.T)
    dR = exp_so3(e_theta)
    Jl = left_jacobian(e_theta)
    e = np.empty(x.dim)
    e[0:3] = e_theta
    e[3:6] = np.linalg.solve(Jl, x.imu.v - dR @ xhat.imu.v)
    e[6:9] = np.linalg.solve(Jl, x.imu.p - dR @ xhat.imu.p)
    e[9:12] = x.imu.bg - xhat.imu.bg
    e[12:15] = x.imu.ba - xhat.imu.ba
    e[15:] = np.linalg.solve(Jl, (x.landmarks - xhat.landmarks @ dR.T).T).T.ravel()
    return e


# ---------------------------------------------------------------------------
# Sub-retractions for the window filter
# ---------------------------------------------------------------------------

def imu_retract(xbar: ImuState, e) -> ImuState:
    """Right-invariant retraction restricted to the IMU blocks."""
    e = _check_dim(e, IMU_DIM)
    dR = exp_so3(e[0:3])
    Jl = left_jacobian(e[0:3])
    return ImuState(dR @ xbar.R,
                    dR @ xbar.v + Jl @ e[3:6],
                    dR @ xbar.p + Jl @ e[6:9],
                    xbar.bg + e[9:12], xbar.ba + e[12:15])


def imu_inverse_retract(x: ImuState, xhat: ImuState):
    e_theta = _relative_log(x.R @ xhat.R.T)
    dR = exp_so3(e_theta)
    Jl = left_jacobian(e_theta)
    return np.concatenate([
        e_theta,
        np.linalg.solve(Jl, x.v - dR @ xhat.v),
        np.linalg.solve(Jl, x.p - dR @ xhat.p),
        x.bg - xhat.bg,
        x.ba - xhat.ba,
    ])


def conekf_imu_retract(xbar: ImuState, e) -> ImuState:
    e = _check_dim(e, IMU_DIM)
    return ImuState(xbar.R @ exp_so3(e[0:3]), xbar.v + e[3:6], xbar.p + e[6:9],
                    xbar.bg + e[9:12], xbar.ba + e[12:15])


def conekf_imu_inverse_retract(x: ImuState, xhat: ImuState):
    return np.concatenate([
        _relative_log(xhat.R.T @ x.R),
        x.v - xhat.v, x.p - xhat.p, x.bg - xhat.bg, x.ba - xhat.ba,
    ])


def pose_retract(c: Pose, e) -> Pose:
    """Right-invariant pose retraction (exp(e_th) R, exp(e_th) p + J_l e_p)."""
    e = _check_dim(e, CLONE_DIM)
    dR = exp_so3(e[0:3])
    Jl = left_jacobian(e[0:3])
    return Pose(dR @ c.R, dR @ c.p + Jl @ e[3:6])


def pose_inverse_retract(c: Pose, chat: Pose):
    e_theta = _relative_log(c.R @ chat.R.T)
    Jl = left_jacobian(e_theta)
    return np.concatenate([e_theta,
                           np.linalg.solve(Jl, c.p - exp_so3(e_theta) @ chat.p)])


def conekf_pose_retract(c: Pose, e) -> Pose:
    e = _check_dim(e, CLONE_DIM)
    return Pose(c.R @ exp_so3(e[0:3]), c.p + e[3:6])


def conekf_pose_inverse_retract(c: Pose, chat: Pose):
    return np.concatenate([_relative_log(chat.R.T @ c.R), c.p - chat.p])


def anchored_landmark_retract(c: Pose, f, e):
    """Joint retraction of an anchor camera pose and its landmark; the
    landmark shares the anchor's orientation error."""
    e = _check_dim(e, 9)
    new_pose = pose_retract(c, e[0:6])
    dR = exp_so3(e[0:3])
    Jl = left_jacobian(e[0:3])
    return new_pose, dR @ np.asarray(f, dtype=float) + Jl @ e[6:9]


# ---------------------------------------------------------------------------
# Window-state retractions
# ---------------------------------------------------------------------------

def msckf_retract(xhat: MsckfState, e, variant: str) -> MsckfState:
    e = _check_dim(e, xhat.dim)
    if variant == "riekf":
        imu = imu_retract(xhat.imu, e[0:IMU_DIM])
        clone_fn = pose_retract
    elif variant == "conekf":
        imu = conekf_imu_retract(xhat.imu, e[0:IMU_DIM])
        clone_fn = conekf_pose_retract
    else:
        raise ValueError(f"unknown retraction variant {variant!r}")
    clones = [clone_fn(c, e[IMU_DIM + 6 * i: IMU_DIM + 6 * (i + 1)])
              for i, c in enumerate(xhat.clones)]
    return MsckfState(imu, list(xhat.clone_times), clones)


def msckf_inverse_retract(x: MsckfState, xhat: MsckfState, variant: str):
    if x.num_clones != xhat.num_clones:
        raise ValueError("clone counts differ")
    if variant == "riekf":
        imu_fn, clone_fn = imu_inverse_retract, pose_inverse_retract
    elif variant == "conekf":
        imu_fn, clone_fn = conekf_imu_inverse_retract, conekf_pose_inverse_retract
    else:
        raise ValueError(f"unknown retraction variant {variant!r}")
    parts = [imu_fn(x.imu, xhat.imu)]
    parts += [clone_fn(c, chat) for c, chat in zip(x.clones, xhat.clones)]
    return np.concatenate(parts)


@dataclass(frozen=True)
class Retraction:
    """A pluggable (retract, inverse_retract) pair."""

    name: str
    retract: object
    inverse_retract: object


CONEKF_RETRACTION = Retraction("conekf", conekf_retract, conekf_inverse_retract)
RIEKF_RETRACTION = Retraction("riekf", riekf_retract, riekf_inverse_retract)
VINS_RETRACTIONS = {"conekf": CONEKF_RETRACTION, "riekf": RIEKF_RETRACTION}


def msckf_retraction(variant: str) -> Retraction:
    return Retraction(
        f"msckf-{variant}",
        lambda x, e, _v=variant: msckf_retract(x, e, _v),
        lambda x, xhat, _v=variant: msckf_inverse_retract(x, xhat, _v),
    )


# ---------------------------------------------------------------------------
# Unobservable transformation
# ---------------------------------------------------------------------------

def apply_unobs_transform(x, t: UnobsTransform, eps=None, gravity=GRAVITY):
    """Apply the transform to a state; ``eps`` is [eps1, eps2] for the
    stochastic application and None for the deterministic one.

    The rotation axis is the unit gravity direction, so theta1 is in
    radians.
    """
    ang = float(t.theta1)
    shift = t.theta2.copy()
    if eps is not None:
        eps = np.asarray(eps, dtype=float)
        ang += eps[0]
        shift = shift + eps[1:4]
    dR = exp_so3(unit_gravity(gravity) * ang)

    if isinstance(x, VinsState):
        imu = x.imu
        new_imu = ImuState(dR @ imu.R, dR @ imu.v, dR @ imu.p + shift,
                           imu.bg.copy(), imu.ba.copy())
        return VinsState(new_imu, x.landmarks @ dR.T + shift)
    if isinstance(x, MsckfState):
        imu = x.imu
        new_imu = ImuState(dR @ imu.R, dR @ imu.v, dR @ imu.p + shift,
                           imu.bg.copy(), imu.ba.copy())
        clones = [Pose(dR @ c.R, dR @ c.p + shift) for c in x.clones]
        return MsckfState(new_imu, list(x.clone_times), clones)
    if isinstance(x, ImuState):
        return ImuState(dR @ x.R, dR @ x.v, dR @ x.p + shift,
                        x.bg.copy(), x.ba.copy())
    raise TypeError(f"unsupported state type {type(x)!r}")


def transform_error_jacobians(xhat, t: UnobsTransform, retraction: Retraction,
                              gravity=GRAVITY, step=1e-6):
    """Central finite differences of the transform in error coordinates.

    Returns (M, N): M maps pre-transform errors to post-transform errors of
    the deterministic transform; N maps the transform's Gaussian parameters
    into error coordinates.
    """
    dim = xhat.dim
    td_x = apply_unobs_transform(xhat, t, None, gravity)
    M = np.empty((dim, dim))
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = step
        plus = apply_unobs_transform(retraction.retract(xhat, e), t, None, gravity)
        minus = apply_unobs_transform(retraction.retract(xhat, -e), t, None, gravity)
        M[:, i] = (retraction.inverse_retract(plus, td_x)
                   - retraction.inverse_retract(minus, td_x)) / (2.0 * step)
    N = np.empty((dim, 4))
    for j in range(4):
        eps = np.zeros(4)
        eps[j] = step
        plus = apply_unobs_transform(xhat, t, eps, gravity)
        minus = apply_unobs_transform(xhat, t, -eps, gravity)
        N[:, j] = (retraction.inverse_retract(plus, td_x)
                   - retraction.inverse_retract(minus, td_x)) / (2.0 * step)
    return M, N


def _equivariance_blocks(t, variant, gravity):
    g_unit = unit_gravity(gravity)
    dR = exp_so3(g_unit * t.theta1)
    if variant == "riekf":
        theta_block, trans_coupling = dR, skew(t.theta2) @ dR
    elif variant == "conekf":
        theta_block, trans_coupling = np.eye(3), np.zeros((3, 3))
    else:
        raise ValueError(f"unknown retraction variant {variant!r}")
    return dR, theta_block, trans_coupling


def transform_equivariance_matrix(xhat, t: UnobsTransform, variant: str,
                                  gravity=GRAVITY):
    """Closed-form state-independent W with T_D(x + e) = T_D(x) + W e."""
    dR, theta_block, coupling = _equivariance_blocks(t, variant, gravity)
    if isinstance(xhat, VinsState):
        L = xhat.num_landmarks
        W = np.zeros((xhat.dim, xhat.dim))
        W[0:3, 0:3] = theta_block
        W[3:6, 3:6] = dR
        W[6:9, 0:3] = coupling
        W[6:9, 6:9] = dR
        W[9:12, 9:12] = np.eye(3)
        W[12:15, 12:15] = np.eye(3)
        for i in range(L):
            r = IMU_DIM + 3 * i
            W[r:r + 3, 0:3] = coupling
            W[r:r + 3, r:r + 3] = dR
        return W
    if isinstance(xhat, MsckfState):
        W = np.zeros((xhat.dim, xhat.dim))
        W[0:3, 0:3] = theta_block
        W[3:6, 3:6] = dR
        W[6:9, 0:3] = coupling
        W[6:9, 6:9] = dR
        W[9:15, 9:15] = np.eye(6)
        for i in range(xhat.num_clones):
            r = IMU_DIM + 6 * i
            W[r:r + 3, r:r + 3] = theta_block
            W[r + 3:r + 6, r:r + 3] = coupling
            W[r + 3:r + 6, r + 3:r + 6] = dR
        return W
    raise TypeError(f"unsupported state type {type(xhat)!r}")


def transform_noise_jacobian(xhat, t: UnobsTransform, variant: str,
                             gravity=GRAVITY):
    """Closed-form N = d[T_S(x) - T_D(x)]/d(eps) in error coordinates.

    For the right-invariant retraction the yaw column carries the unit
    gravity direction in the orientation block plus a theta2 coupling in the
    translation blocks (which vanishes for stochastic identity transforms);
    translation columns hit the p- and f-blocks with the identity.
    """
    g_unit = unit_gravity(gravity)
    dR = exp_so3(g_unit * t.theta1)
    if isinstance(xhat, VinsState):
        L = xhat.num_landmarks
        N = np.zeros((xhat.dim, 4))
        if variant == "riekf":
            N[0:3, 0] = g_unit
            N[6:9, 0] = skew(t.theta2) @ g_unit
            N[6:9, 1:4] = np.eye(3)
            for i in range(L):
                r = IMU_DIM + 3 * i
                N[r:r + 3, 0] = skew(t.theta2) @ g_unit
                N[r:r + 3, 1:4] = np.eye(3)
        elif variant == "conekf":
            imu = xhat.imu
            N[0:3, 0] = imu.R.T @ g_unit
            N[3:6, 0] = -skew(dR @ imu.v) @ g_unit
            N[6:9, 0] = -skew(dR @ imu.p) @ g_unit
            N[6:9, 1:4] = np.eye(3)
            for i in range(L):
                r = IMU_DIM + 3 * i
                N[r:r + 3, 0] = -skew(dR @ xhat.landmarks[i]) @ g_unit
                N[r:r + 3, 1:4] = np.eye(3)
        else:
            raise ValueError(f"unknown retraction variant {variant!r}")
        return N
    if isinstance(xhat, MsckfState):
        N = np.zeros((xhat.dim, 4))
        if variant == "riekf":
            N[0:3, 0] = g_unit
            N[6:9, 0] = skew(t.theta2) @ g_unit
            N[6:9, 1:4] = np.eye(3)
            for i in range(xhat.num_clones):
                r = IMU_DIM + 6 * i
                N[r:r + 3, 0] = g_unit
                N[r + 3:r + 6, 0] = skew(t.theta2) @ g_unit
                N[r + 3:r + 6, 1:4] = np.eye(3)
        elif variant == "conekf":
            imu = xhat.imu
            N[0:3, 0] = imu.R.T @ g_unit
            N[3:6, 0] = -skew(dR @ imu.v) @ g_unit
            N[6:9, 0] = -skew(dR @ imu.p) @ g_unit
            N[6:9, 1:4] = np.eye(3)
            for i, c in enumerate(xhat.clones):
                r = IMU_DIM + 6 * i
                N[r:r + 3, 0] = c.R.T @ g_unit
                N[r + 3:r + 6, 0] = -skew(dR @ c.p) @ g_unit
                N[r + 3:r + 6, 1:4] = np.eye(3)
        else:
            raise ValueError(f"unknown retraction variant {variant!r}")
        return N
    raise TypeError(f"unsupported state type {type(xhat)!r}")
