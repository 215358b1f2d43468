"""Trajectory integration, error metrics, and sample-based covariance.

ATE is the per-frame Euclidean distance between estimated and ground-truth
positions after alignment; the reported std is the per-frame population
std. The relative-pose metric is the mean unsquared L2 distance between
exponential-coordinate vectors (the squared form appears only inside the
training losses).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError
from .liegroup import (
    REPROJECT_EVERY,
    SE3Pose,
    _project_rotation,
    as_xi,
    compose,
    exp_map,
)

PairKey = Tuple[int, int]

ALIGNMENTS = ("none", "first_pose", "rigid")

# Timestamps parsed from files carry 6 decimals; match within this.
TIMESTAMP_ATOL = 5e-6


@dataclass
class Trajectory:
    """Timestamped absolute poses (world-from-camera)."""

    timestamps: np.ndarray
    poses: List[SE3Pose]

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(ts) != len(self.poses) or len(ts) < 2:
            raise InvalidArgumentError(
                "trajectory needs >= 2 poses with one timestamp each")
        if np.any(np.diff(ts) <= 0):
            raise InvalidArgumentError("timestamps must be strictly increasing")
        self.timestamps = ts

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.stack([p.t for p in self.poses])


@dataclass
class MetricsReport:
    ate_mean: float
    ate_std: float
    se3_err_mean: float
    n_frames: int
    alignment: str = "first_pose"

    def as_dict(self) -> dict:
        return {
            "ate_mean": self.ate_mean,
            "ate_std": self.ate_std,
            "se3_err_mean": self.se3_err_mean,
            "n_frames": self.n_frames,
            "alignment": self.alignment,
        }


@dataclass
class CovarianceReport:
    pair: PairKey
    mean: np.ndarray
    cov: np.ndarray
    score: float
    outlier: Optional[bool] = None

    @classmethod
    def from_samples(cls, pair: PairKey, samples) -> "CovarianceReport":
        mean, cov = recover_covariance(samples)
        return cls(pair=pair, mean=mean, cov=cov, score=float(np.trace(cov)))


def integrate(initial: SE3Pose,
              relatives: Mapping[PairKey, np.ndarray],
              timestamps=None) -> Trajectory:
    """Accumulate consecutive relative transforms into absolute poses.

    `relatives` must be keyed (k, k+1) for a contiguous run of frames;
    values may be raw 6-vectors or FramePairEstimate objects.
    """
    keys = sorted(relatives)
    if not keys:
        raise InvalidArgumentError("no relative estimates to integrate")
    k0 = keys[0][0]
    for n, key in enumerate(keys):
        if key != (k0 + n, k0 + n + 1):
            raise ConfigurationError(
                f"consecutive pair {(k0 + n, k0 + n + 1)} missing (found {key})")
    poses = [initial]
    for n, key in enumerate(keys):
        step = exp_map(as_xi(getattr(relatives[key], "xi", relatives[key])))
        nxt = compose(poses[-1], step)
        if (n + 1) % REPROJECT_EVERY == 0:
            nxt = SE3Pose(_project_rotation(nxt.R), nxt.t)
        poses.append(nxt)
    if timestamps is None:
        timestamps = np.arange(len(poses), dtype=float)
    return Trajectory(timestamps=timestamps, poses=poses)


def _rigid_align(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares rotation+translation mapping src points onto dst."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = cd - R @ cs
    return src @ R.T + t


def ate(est: Trajectory, gt: Trajectory,
        align: str = "first_pose") -> Tuple[float, float]:
    """Absolute translation error (mean, per-frame std) after alignment."""
    if align not in ALIGNMENTS:
        raise InvalidArgumentError(f"alignment must be one of {ALIGNMENTS}")
    if len(est) != len(gt):
        raise InvalidArgumentError(
            f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if not np.allclose(est.timestamps, gt.timestamps, rtol=0.0, atol=TIMESTAMP_ATOL):
        raise InvalidArgumentError("trajectory timestamps do not match")
    p_est = est.positions()
    p_gt = gt.positions()
    if align == "first_pose":
        g = compose(gt.poses[0], SE3Pose(est.poses[0].R.T,
                                         -(est.poses[0].R.T @ est.poses[0].t)))
        p_est = p_est @ g.R.T + g.t
    elif align == "rigid":
        p_est = _rigid_align(p_est, p_gt)
    d = np.linalg.norm(p_est - p_gt, axis=1)
    return float(d.mean()), float(d.std())


def se3_error(est_pairs: Mapping[PairKey, np.ndarray],
              gt_pairs: Mapping[PairKey, np.ndarray]) -> float:
    """Mean L2 distance between estimated and true exponential coordinates."""
    if set(est_pairs) != set(gt_pairs):
        raise InvalidArgumentError("estimate and ground-truth key sets differ")
    if not est_pairs:
        raise InvalidArgumentError("empty pair sets")
    total = 0.0
    for k in sorted(est_pairs):
        e = as_xi(getattr(est_pairs[k], "xi", est_pairs[k]))
        g = as_xi(getattr(gt_pairs[k], "xi", gt_pairs[k]))
        total += float(np.linalg.norm(e - g))
    return total / len(est_pairs)


def recover_covariance(samples) -> Tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased covariance of K stacked 6-vector draws."""
    S = np.asarray(samples, dtype=float)
    if S.ndim != 2 or S.shape[1] != 6:
        raise InvalidArgumentError(f"expected (K, 6) samples, got {S.shape}")
    if S.shape[0] < 2:
        raise InvalidArgumentError("covariance needs at least 2 samples")
    if not np.all(np.isfinite(S)):
        raise InvalidArgumentError("samples contain non-finite values")
    mean = S.mean(axis=0)
    centered = S - mean
    cov = centered.T @ centered / (S.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def outlier_threshold(reports: Sequence[CovarianceReport],
                      quantile: float = 0.95,
                      mode: str = "trace") -> float:
    """Score quantile used when no absolute threshold is given."""
    scores = np.array([_score(r, mode) for r in reports])
    return float(np.quantile(scores, quantile))


def _score(report: CovarianceReport, mode: str) -> float:
    if mode == "trace":
        return float(np.trace(report.cov))
    if mode == "max_var":
        return float(np.max(np.diag(report.cov)))
    raise InvalidArgumentError(f"unknown score mode {mode!r}")


def flag_outliers(reports: Sequence[CovarianceReport],
                  threshold: Optional[float] = None,
                  quantile: float = 0.95,
                  mode: str = "trace") -> List[CovarianceReport]:
    """Mark reports whose covariance score exceeds the threshold.

    With no absolute threshold, the cut is the given quantile of the score
    distribution. Scores are the covariance trace by default; mode
    "max_var" uses the largest per-dimension variance instead.
    """
    if threshold is not None and threshold <= 0:
        raise InvalidArgumentError("threshold must be positive")
    if not reports:
        return []
    cut = outlier_threshold(reports, quantile, mode) if threshold is None else threshold
    return [replace(r, score=_score(r, mode), outlier=_score(r, mode) > cut)
            for r in reports]
