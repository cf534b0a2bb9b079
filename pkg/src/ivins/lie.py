"""Rotation-group and rigid-body primitives.

Rotations are plain 3x3 numpy arrays, rotation vectors are length-3 arrays in
radians.  Everything in this module is a pure function of its arguments and
safe to call from any thread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this rotation angle (radians) the closed-form Rodrigues / Jacobian
# coefficients switch to their series expansions.  Truncation error of the
# 2nd-order series at 1e-6 rad is ~1e-25, far below double round-off.
TAU_SMALL = 1e-6

# Near pi the sin(angle) denominator of the standard log formula amplifies
# round-off by 1/sin^2; inside this window we extract the axis from the
# symmetric part of R instead, keeping round trips below 1e-9 everywhere.
_PI_WINDOW = 1e-3


def skew(v):
    """Skew-symmetric matrix S with S @ y == cross(v, y)."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m):
    """Inverse of :func:`skew` for an antisymmetric matrix."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def exp_so3(y):
    """Rotation matrix for the rotation vector ``y`` (Rodrigues form)."""
    y = np.asarray(y, dtype=float)
    a = np.linalg.norm(y)
    s = skew(y)
    if a < TAU_SMALL:
        c1 = 1.0 - a * a / 6.0
        c2 = 0.5 - a * a / 24.0
    else:
        c1 = np.sin(a) / a
        c2 = (1.0 - np.cos(a)) / (a * a)
    return np.eye(3) + c1 * s + c2 * (s @ s)


def log_so3(R):
    """Rotation vector of ``R`` with angle in [0, pi].

    Near angle pi the axis is recovered from the symmetric part of R; the
    sign is taken from the antisymmetric part when it is resolvable and
    otherwise fixed by making the first nonzero component positive.
    """
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(c)
    w = vee(R - R.T) * 0.5  # == sin(angle) * axis

    if angle < TAU_SMALL:
        return (1.0 + angle * angle / 6.0) * w

    if np.pi - angle < _PI_WINDOW:
        # the symmetric part (R + R^T)/2 = I + (1-cos) S(u)^2 is free of the
        # sin-scaled term, so uu^T extracted from it is accurate through pi
        B = (0.5 * (R + R.T) - c * np.eye(3)) / (1.0 - c)
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis = axis / np.linalg.norm(axis)
        s = np.linalg.norm(w)
        if s > 1e-8:
            if np.dot(axis, w) < 0.0:
                axis = -axis
        else:
            # exactly pi: deterministic sign, first nonzero component positive
            for comp in axis:
                if abs(comp) > 1e-12:
                    if comp < 0.0:
                        axis = -axis
                    break
        angle = np.pi - np.arcsin(np.clip(s, 0.0, 1.0))
        return angle * axis

    return (angle / np.sin(angle)) * w


def right_jacobian(y):
    """Right Jacobian J_r of SO(3): exp(y + d) ~= exp(y) exp(J_r(y) d)."""
    y = np.asarray(y, dtype=float)
    a = np.linalg.norm(y)
    s = skew(y)
    if a < TAU_SMALL:
        c2 = 0.5 - a * a / 24.0
        c3 = 1.0 / 6.0 - a * a / 120.0
    else:
        c2 = (1.0 - np.cos(a)) / (a * a)
        c3 = (a - np.sin(a)) / (a * a * a)
    return np.eye(3) - c2 * s + c3 * (s @ s)


def left_jacobian(y):
    """Left Jacobian of SO(3); equals J_r(-y)."""
    return right_jacobian(-np.asarray(y, dtype=float))


@dataclass(frozen=True)
class Pose:
    """Rigid transform (rotation, translation)."""

    R: np.ndarray
    p: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.p + self.p)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -(self.R.T @ self.p))

    def transform_point(self, x):
        return self.R @ np.asarray(x, dtype=float) + self.p
