"""RMS and NEES evaluation in each filter's native error coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lie import exp_so3, left_jacobian, log_so3

# error-vector indices of the (theta, p) blocks used for the pose NEES
_POSE_IDX = np.array([0, 1, 2, 6, 7, 8])


@dataclass
class RunMetrics:
    """Per-timestep error traces for one filter on one run."""

    t: np.ndarray
    err_ori: np.ndarray
    err_pos: np.ndarray
    nees_ori: np.ndarray
    nees_pose: np.ndarray


def nees(e, P):
    """Normalized estimation error squared e^T P^{-1} e."""
    e = np.asarray(e, dtype=float)
    return float(e @ np.linalg.solve(P, e))


def pose_error(R_true, p_true, imu_est, variant):
    """(e_theta, e_p) in the filter's own error convention."""
    if variant == "riekf":
        e_theta = log_so3(R_true @ imu_est.R.T)
        e_p = np.linalg.solve(left_jacobian(e_theta),
                              p_true - exp_so3(e_theta) @ imu_est.p)
    elif variant == "conekf":
        e_theta = log_so3(imu_est.R.T @ R_true)
        e_p = p_true - imu_est.p
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return e_theta, e_p


def imu_errors(R_true, p_true, imu_est, P, variant):
    """(err_ori, err_pos, nees_ori, nees_pose) against the truth pose.

    RMS errors use the rotation angle and the plain position difference;
    NEES uses the filter's inverse retraction so it measures the filter's
    own self-consistency.
    """
    e_theta, e_p = pose_error(R_true, p_true, imu_est, variant)
    err_ori = float(np.linalg.norm(e_theta))
    err_pos = float(np.linalg.norm(p_true - imu_est.p))
    nees_ori = nees(e_theta, P[0:3, 0:3])
    e6 = np.concatenate([e_theta, e_p])
    nees_pose = nees(e6, P[np.ix_(_POSE_IDX, _POSE_IDX)])
    return err_ori, err_pos, nees_ori, nees_pose
