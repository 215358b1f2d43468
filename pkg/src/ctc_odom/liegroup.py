"""SE(3)/se(3) math: exponential and logarithm maps, composition, chain logs.

Conventions:
    - A pose increment is a 6-vector xi = (v, w): translational part v in
      meters first, rotational part w (axis-angle, radians) last.
    - Rotations are stored as 3x3 matrices; quaternions exist only at the
      file-format boundary (see tum module).
    - Perturbations compose on the left: exp(delta) * T.
    - The log map returns the canonical branch with ||w|| <= pi.

Numerical policy:
    - Below SMALL_ANGLE the exp/log coefficients switch to second-order
      Taylor expansions; above it, closed forms are used with 1 - cos(t)
      evaluated as 2*sin(t/2)**2 to avoid cancellation. Both branches are
      accurate to ~1e-15 at the threshold, so the switch is seamless.
    - The logarithm refuses rotations within NEAR_PI_MARGIN of pi, where
      the axis is not recoverable from R - R^T.
    - Jacobians of chained transforms are defined by central finite
      differences with step FD_STEP; this is the gradient contract that
      all loss derivatives are tested against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, NearSingularityError

# Rotation angle below which exp/log use 2nd-order Taylor coefficients.
SMALL_ANGLE = 1e-6
# log_map refuses rotation angles within this margin of pi.
NEAR_PI_MARGIN = 1e-6
# Central-difference step for chain_log_jacobian.
FD_STEP = 1e-5
# Orthonormality drift beyond which compose re-projects the rotation.
DRIFT_TOLERANCE = 1e-12
# Long running compositions re-project every this many steps.
REPROJECT_EVERY = 1000

_I3 = np.eye(3)


def as_xi(xi) -> np.ndarray:
    """Validate and return xi as a float64 array of shape (6,)."""
    arr = np.asarray(xi, dtype=float)
    if arr.shape != (6,):
        raise InvalidArgumentError(f"expected 6-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("xi has non-finite entries")
    return arr


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def _project_rotation(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (polar factor)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class SE3Pose:
    """A rigid-body transform: rotation matrix R and translation t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        t = np.array(self.t, dtype=float).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidArgumentError(
                f"pose needs 3x3 R and 3-vector t, got {R.shape} and {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("pose has non-finite entries")
        if np.max(np.abs(R.T @ R - _I3)) > 1e-9:
            raise InvalidArgumentError("R is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidArgumentError("det(R) != 1 within 1e-9")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "SE3Pose":
        M = np.asarray(M, dtype=float)
        if M.shape != (4, 4):
            raise InvalidArgumentError(f"expected 4x4 matrix, got {M.shape}")
        if np.max(np.abs(M[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-9:
            raise InvalidArgumentError("last row is not (0,0,0,1)")
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M


def _exp_rt(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Core exponential map on raw arrays; returns (R, t)."""
    v, w = xi[:3], xi[3:]
    theta = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    W = _skew(w)
    W2 = W @ W
    if theta < SMALL_ANGLE:
        R = _I3 + W + 0.5 * W2
        V = _I3 + 0.5 * W + W2 / 6.0
    else:
        half = 0.5 * theta
        # 1 - cos(theta) as 2 sin^2(theta/2): no cancellation at small angles
        b = 2.0 * math.sin(half) ** 2 / (theta * theta)
        a = math.sin(theta) / theta
        d = (theta - math.sin(theta)) / (theta * theta * theta)
        R = _I3 + a * W + b * W2
        V = _I3 + b * W + d * W2
    return R, V @ v


def _log_rt(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Core logarithm map on raw arrays; returns xi = (v, w)."""
    # sin(theta) * axis, from the skew-symmetric part
    ws = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = math.sqrt(ws[0] * ws[0] + ws[1] * ws[1] + ws[2] * ws[2])
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    theta = math.atan2(s, c)
    if theta >= math.pi - NEAR_PI_MARGIN:
        raise NearSingularityError(
            f"rotation angle {theta:.9f} is within {NEAR_PI_MARGIN} of pi")
    if theta < SMALL_ANGLE:
        w = ws * (1.0 + theta * theta / 6.0)
        B = 1.0 / 12.0
    else:
        w = ws * (theta / s)
        half = 0.5 * theta
        # (1 - (theta/2) cot(theta/2)) / theta^2; contribution is O(theta^2)
        # so the cancellation in the numerator is harmless in absolute terms
        B = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    W = _skew(w)
    Vinv = _I3 - 0.5 * W + B * (W @ W)
    return np.concatenate([Vinv @ t, w])


def exp_map(xi) -> SE3Pose:
    """Map exponential coordinates xi = (v, w) to a rigid-body transform."""
    xi = as_xi(xi)
    R, t = _exp_rt(xi)
    return SE3Pose(R, t)


def log_map(T: SE3Pose) -> np.ndarray:
    """Invert exp_map; returns the canonical xi with ||w|| <= pi."""
    return _log_rt(T.R, T.t)


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Group product a * b, re-projecting R if orthonormality drifts."""
    R = a.R @ b.R
    t = a.R @ b.t + a.t
    if np.max(np.abs(R.T @ R - _I3)) > DRIFT_TOLERANCE:
        R = _project_rotation(R)
    return SE3Pose(R, t)


def inverse(T: SE3Pose) -> SE3Pose:
    """Group inverse: (R, t) -> (R^T, -R^T t)."""
    Rt = T.R.T
    return SE3Pose(Rt, -(Rt @ T.t))


def relative_xi(a: SE3Pose, b: SE3Pose) -> np.ndarray:
    """Exponential coordinates of the transform taking frame a to frame b."""
    return log_map(compose(inverse(a), b))


def _exp4(xi: np.ndarray) -> np.ndarray:
    R, t = _exp_rt(xi)
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


def chain_log(xis: Sequence) -> np.ndarray:
    """log of the left-to-right product of exp(xi_k) over the sequence."""
    if len(xis) == 0:
        raise InvalidArgumentError("chain_log needs at least one element")
    M = _exp4(as_xi(xis[0]))
    for x in xis[1:]:
        M = M @ _exp4(as_xi(x))
    return _log_rt(M[:3, :3], M[:3, 3])


def chain_log_jacobian(xis: Sequence, k: int) -> np.ndarray:
    """d chain_log / d xi_k as a 6x6 matrix, by central differences.

    Column j holds the derivative with respect to component j of xi_k.
    """
    xis = [as_xi(x) for x in xis]
    if not 0 <= k < len(xis):
        raise InvalidArgumentError(f"index {k} outside chain of length {len(xis)}")
    A = np.eye(4)
    for x in xis[:k]:
        A = A @ _exp4(x)
    B = np.eye(4)
    for x in xis[k + 1:]:
        B = B @ _exp4(x)
    J = np.empty((6, 6))
    base = xis[k]
    for j in range(6):
        dp = base.copy()
        dm = base.copy()
        dp[j] += FD_STEP
        dm[j] -= FD_STEP
        Mp = A @ _exp4(dp) @ B
        Mm = A @ _exp4(dm) @ B
        J[:, j] = (_log_rt(Mp[:3, :3], Mp[:3, 3])
                   - _log_rt(Mm[:3, :3], Mm[:3, 3])) / (2.0 * FD_STEP)
    return J


# ---------------------------------------------------------------------------
# Batched variants on raw arrays, used by the loss/gradient inner loops.
# Same formulas and branch threshold as the scalar paths.
# ---------------------------------------------------------------------------

def exp_many(xis: np.ndarray) -> np.ndarray:
    """Batched exponential map: (..., 6) -> (..., 4, 4) homogeneous matrices."""
    xis = np.asarray(xis, dtype=float)
    v, w = xis[..., :3], xis[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)  # safe denominator

    half = 0.5 * th
    a = np.where(small, 1.0, np.sin(th) / th)
    b = np.where(small, 0.5, 2.0 * np.sin(half) ** 2 / (th * th))
    d = np.where(small, 1.0 / 6.0, (th - np.sin(th)) / (th ** 3))

    W = np.zeros(xis.shape[:-1] + (3, 3))
    W[..., 0, 1] = -w[..., 2]
    W[..., 0, 2] = w[..., 1]
    W[..., 1, 0] = w[..., 2]
    W[..., 1, 2] = -w[..., 0]
    W[..., 2, 0] = -w[..., 1]
    W[..., 2, 1] = w[..., 0]
    W2 = W @ W

    R = _I3 + a[..., None, None] * W + b[..., None, None] * W2
    V = _I3 + b[..., None, None] * W + d[..., None, None] * W2

    M = np.zeros(xis.shape[:-1] + (4, 4))
    M[..., :3, :3] = R
    M[..., :3, 3] = np.einsum("...ij,...j->...i", V, v)
    M[..., 3, 3] = 1.0
    return M


def log_many(Ts: np.ndarray) -> np.ndarray:
    """Batched logarithm map: (..., 4, 4) -> (..., 6)."""
    Ts = np.asarray(Ts, dtype=float)
    R = Ts[..., :3, :3]
    t = Ts[..., :3, 3]
    ws = 0.5 * np.stack([
        R[..., 2, 1] - R[..., 1, 2],
        R[..., 0, 2] - R[..., 2, 0],
        R[..., 1, 0] - R[..., 0, 1],
    ], axis=-1)
    s = np.linalg.norm(ws, axis=-1)
    c = 0.5 * (R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2] - 1.0)
    theta = np.arctan2(s, c)
    if np.any(theta >= math.pi - NEAR_PI_MARGIN):
        raise NearSingularityError("a rotation angle in the batch is too close to pi")
    small = theta < SMALL_ANGLE
    s_safe = np.where(small, 1.0, s)
    th = np.where(small, 1.0, theta)

    factor = np.where(small, 1.0 + theta * theta / 6.0, th / s_safe)
    w = ws * factor[..., None]

    half = 0.5 * th
    B = np.where(small, 1.0 / 12.0,
                 (1.0 - half * np.cos(half) / np.sin(half)) / (th * th))

    W = np.zeros(Ts.shape[:-2] + (3, 3))
    W[..., 0, 1] = -w[..., 2]
    W[..., 0, 2] = w[..., 1]
    W[..., 1, 0] = w[..., 2]
    W[..., 1, 2] = -w[..., 0]
    W[..., 2, 0] = -w[..., 1]
    W[..., 2, 1] = w[..., 0]
    Vinv = _I3 - 0.5 * W + B[..., None, None] * (W @ W)
    v = np.einsum("...ij,...j->...i", Vinv, t)
    return np.concatenate([v, w], axis=-1)
