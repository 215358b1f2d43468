"""TUM trajectory files: `timestamp tx ty tz qx qy qz qw`, one pose per line.

Quaternions are stored scalar-last and normalized on read (rejected when
further than 1e-6 from unit length). Written lines use %.6f timestamps and
%.17g pose components so a write/read cycle is lossless to 1e-9.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .evaluation import Trajectory
from .liegroup import SE3Pose


@dataclass(frozen=True)
class QuatPose:
    """Translation plus unit quaternion (x, y, z, w ordering)."""

    tx: float
    ty: float
    tz: float
    qx: float
    qy: float
    qz: float
    qw: float

    def __post_init__(self):
        n = math.sqrt(self.qx ** 2 + self.qy ** 2 + self.qz ** 2 + self.qw ** 2)
        if abs(n - 1.0) > 1e-9:
            raise InvalidArgumentError(f"quaternion norm {n} is not 1 within 1e-9")

    @classmethod
    def from_pose(cls, pose: SE3Pose) -> "QuatPose":
        q = rotmat_to_quat(pose.R)
        return cls(pose.t[0], pose.t[1], pose.t[2], q[0], q[1], q[2], q[3])

    def to_pose(self) -> SE3Pose:
        R = quat_to_rotmat(np.array([self.qx, self.qy, self.qz, self.qw]))
        return SE3Pose(R, np.array([self.tx, self.ty, self.tz]))


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> quaternion (x, y, z, w), w >= 0 (Shepperd)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Quaternion (x, y, z, w) -> rotation matrix; input need not be unit."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape != (4,):
        raise InvalidArgumentError(f"expected 4-element quaternion, got {q.shape}")
    x, y, z, w = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_tum(path, trajectory: Trajectory) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, pose in zip(trajectory.timestamps, trajectory.poses):
        q = rotmat_to_quat(pose.R)
        fields = [f"{ts:.6f}"] + [_fmt(v) for v in (*pose.t, *q)]
        lines.append(" ".join(fields))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_tum(path) -> Trajectory:
    timestamps = []
    poses = []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(f"{path}: line {lineno}: expected 8 fields, "
                                 f"got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
            q = np.array(vals[4:8])
            norm = np.linalg.norm(q)
            if abs(norm - 1.0) > 1e-6:
                raise ParseError(f"{path}: line {lineno}: quaternion norm "
                                 f"{norm:.9f} is not 1 within 1e-6")
            timestamps.append(vals[0])
            poses.append(SE3Pose(quat_to_rotmat(q), np.array(vals[1:4])))
    if len(poses) < 2:
        raise ParseError(f"{path}: needs at least 2 poses, got {len(poses)}")
    ts = np.array(timestamps)
    if np.any(np.diff(ts) <= 0):
        raise ParseError(f"{path}: timestamps are not strictly increasing")
    return Trajectory(timestamps=ts, poses=poses)
