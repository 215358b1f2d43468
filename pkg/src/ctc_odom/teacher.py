"""Training-data sources: synthetic trajectories and a noisy pose teacher.

The simulator stands in for an external odometry pipeline. Noise is applied
multiplicatively on the left of each true relative transform (a Gaussian
perturbation in exponential coordinates), which keeps the zero-noise limit
exact and does not distort larger rotations the way additive coordinate
noise would. A configurable fraction of pairs is drawn with inflated sigmas
and recorded in contamination flags so detectors can be scored later.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .constraints import FramePairEstimate, PairKey, Source
from .errors import DuplicateKeyError, InvalidArgumentError, ParseError
from .evaluation import Trajectory
from .liegroup import SE3Pose, as_xi, compose, exp_map, exp_many, log_many

TrajectoryGT = Trajectory

PROFILES = ("smooth_walk", "planar_loop", "handheld_shake")

_SOURCE_BY_NAME = {s.value: s for s in Source}


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian perturbation sigmas plus an inflated-outlier mixture."""

    sigma_t: float = 0.01
    sigma_r: float = 0.0087
    outlier_rate: float = 0.0
    outlier_scale: float = 10.0

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_r < 0:
            raise InvalidArgumentError("noise sigmas must be >= 0")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise InvalidArgumentError("outlier_rate must be in [0, 1]")
        if self.outlier_scale < 1.0:
            raise InvalidArgumentError("outlier_scale must be >= 1")


@dataclass
class TeacherSet:
    """Pairwise estimates keyed (i, j), with contamination labels."""

    estimates: Dict[PairKey, FramePairEstimate]
    outlier_flags: Dict[PairKey, bool] = field(default_factory=dict)

    def __post_init__(self):
        if not self.outlier_flags:
            self.outlier_flags = {k: False for k in self.estimates}

    @property
    def consecutive(self) -> Dict[PairKey, FramePairEstimate]:
        return {k: v for k, v in self.estimates.items() if k[1] - k[0] == 1}

    @property
    def skips(self) -> Dict[PairKey, FramePairEstimate]:
        return {k: v for k, v in self.estimates.items() if k[1] - k[0] >= 2}

    def xi_map(self) -> Dict[PairKey, np.ndarray]:
        return {k: v.xi for k, v in self.estimates.items()}

    def n_frames(self) -> int:
        return max(j for _, j in self.estimates) + 1


def _rot_y(phi: float) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def generate_trajectory(n_frames: int,
                        seed: int,
                        profile: str = "smooth_walk",
                        dt: float = 1.0 / 30.0,
                        max_speed: float = 1.5) -> Trajectory:
    """Deterministic synthetic camera path for a given (seed, profile).

    smooth_walk integrates a low-pass-filtered random twist velocity with
    per-step translation capped at max_speed*dt. planar_loop traces a
    closed rectangle in the XZ plane while the heading winds once about +Y,
    so first and last poses coincide. handheld_shake is a slower walk with
    small high-frequency pose jitter superimposed.
    """
    if n_frames < 2:
        raise InvalidArgumentError("need at least 2 frames")
    if profile not in PROFILES:
        raise InvalidArgumentError(f"profile must be one of {PROFILES}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _profile_tag(profile)]))
    timestamps = np.arange(n_frames) * dt

    if profile == "planar_loop":
        width, depth = 2.0, 1.0
        perim = 2.0 * (width + depth)
        poses = []
        for k in range(n_frames):
            s = (k / (n_frames - 1)) * perim
            s = s % perim
            if s < width:
                pos = np.array([s, 0.0, 0.0])
            elif s < width + depth:
                pos = np.array([width, 0.0, s - width])
            elif s < 2 * width + depth:
                pos = np.array([width - (s - width - depth), 0.0, depth])
            else:
                pos = np.array([0.0, 0.0, depth - (s - 2 * width - depth)])
            phi = 2.0 * np.pi * (k / (n_frames - 1))
            poses.append(SE3Pose(_rot_y(phi), pos))
        return Trajectory(timestamps=timestamps, poses=poses)

    shake = profile == "handheld_shake"
    speed_cap = (0.9 if shake else 1.0) * max_speed * dt
    # driving-noise sigmas scale with the speed cap so the typical step
    # stays a fixed fraction of it
    rho = 0.9
    sigma_v = (8.0 / 3.0) * max_speed * (0.6 if shake else 1.0)
    sigma_w = 2.5 * (0.6 if shake else 1.0)
    eta = rng.standard_normal((n_frames - 1, 6))
    eta[:, :3] *= sigma_v
    eta[:, 3:] *= sigma_w
    if shake:
        jitter = rng.standard_normal((n_frames, 6))
        jitter[:, :3] = np.clip(jitter[:, :3] * 0.0015, -0.02 * max_speed * dt,
                                0.02 * max_speed * dt)
        jitter[:, 3:] = np.clip(jitter[:, 3:] * 0.008, -0.024, 0.024)

    u = np.zeros(6)
    poses = [SE3Pose.identity()]
    for k in range(n_frames - 1):
        u = rho * u + (1.0 - rho) * eta[k]
        step = u * dt
        tn = np.linalg.norm(step[:3])
        if tn > speed_cap:
            step[:3] *= speed_cap / tn
        wn = np.linalg.norm(step[3:])
        if wn > 0.5:
            step[3:] *= 0.5 / wn
        poses.append(compose(poses[-1], exp_map(step)))

    if shake:
        poses = [compose(p, exp_map(jitter[k])) for k, p in enumerate(poses)]
    return Trajectory(timestamps=timestamps, poses=poses)


def _profile_tag(profile: str) -> int:
    return PROFILES.index(profile)


def true_relatives(gt: Trajectory, keys: Sequence[PairKey]) -> np.ndarray:
    """Ground-truth relative transforms log(inv(P_i) P_j), batched."""
    R = np.stack([p.R for p in gt.poses])
    t = np.stack([p.t for p in gt.poses])
    ii = np.array([k[0] for k in keys])
    jj = np.array([k[1] for k in keys])
    Ri_T = np.transpose(R[ii], (0, 2, 1))
    M = np.zeros((len(keys), 4, 4))
    M[:, :3, :3] = Ri_T @ R[jj]
    M[:, :3, 3] = np.einsum("nij,nj->ni", Ri_T, t[jj] - t[ii])
    M[:, 3, 3] = 1.0
    return log_many(M)


def sample_teacher(gt: Trajectory,
                   noise: NoiseModel,
                   skip_min: int = 1,
                   skip_max: int = 5,
                   seed: int = 0) -> TeacherSet:
    """Perturbed relative-pose estimates for all pairs up to skip_max apart.

    Consecutive pairs (k, k+1) are always included; skip pairs cover every
    span in [max(2, skip_min), skip_max] so any constraint the trainer can
    form over those spans finds its direct estimate.
    """
    n = len(gt)
    if not 1 <= skip_min <= skip_max:
        raise InvalidArgumentError("need 1 <= skip_min <= skip_max")
    if skip_max >= n:
        raise InvalidArgumentError("skip_max must be below the frame count")
    spans = [1] + list(range(max(2, skip_min), skip_max + 1))
    keys: List[PairKey] = [(i, i + s) for s in spans for i in range(n - s)]

    xi_gt = true_relatives(gt, keys)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 97]))
    flags = rng.random(len(keys)) < noise.outlier_rate
    delta = rng.standard_normal((len(keys), 6))
    delta[:, :3] *= noise.sigma_t
    delta[:, 3:] *= noise.sigma_r
    delta[flags] *= noise.outlier_scale
    noisy = log_many(exp_many(delta) @ exp_many(xi_gt))

    estimates = {k: FramePairEstimate(k[0], k[1], noisy[n_], source=Source.TEACHER)
                 for n_, k in enumerate(keys)}
    return TeacherSet(estimates=estimates,
                      outlier_flags={k: bool(flags[n_]) for n_, k in enumerate(keys)})


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_estimates(path, estimates) -> None:
    """Write pair estimates as `i,j,v1,v2,v3,w1,w2,w3,source` lines."""
    est_map = estimates.estimates if isinstance(estimates, TeacherSet) else estimates
    lines = ["# i,j,v1,v2,v3,w1,w2,w3,source"]
    for key in sorted(est_map):
        e = est_map[key]
        xi = as_xi(getattr(e, "xi", e))
        source = getattr(e, "source", Source.TEACHER)
        lines.append(",".join([str(key[0]), str(key[1]),
                               *(_fmt(v) for v in xi), source.value]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_estimates(path, fmt: str = "pair_csv") -> TeacherSet:
    """Read externally produced estimates (pair_csv, or a TUM trajectory
    reduced to consecutive relative transforms)."""
    if fmt == "pair_csv":
        return _load_pair_csv(path)
    if fmt == "tum_pair":
        from .tum import read_tum
        traj = read_tum(path)
        keys = [(k, k + 1) for k in range(len(traj) - 1)]
        xis = true_relatives(traj, keys)
        estimates = {k: FramePairEstimate(k[0], k[1], xis[n], source=Source.TEACHER)
                     for n, k in enumerate(keys)}
        return TeacherSet(estimates=estimates)
    raise InvalidArgumentError(f"unknown estimate format {fmt!r}")


def _load_pair_csv(path) -> TeacherSet:
    estimates: Dict[PairKey, FramePairEstimate] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 9:
                raise ParseError(f"{path}: line {lineno}: expected 9 fields, "
                                 f"got {len(parts)}")
            try:
                i, j = int(parts[0]), int(parts[1])
                xi = np.array([float(p) for p in parts[2:8]])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
            if i < 0 or j < 0:
                raise ParseError(f"{path}: line {lineno}: negative frame index")
            if j <= i:
                raise ParseError(f"{path}: line {lineno}: pair ({i},{j}) "
                                 "needs j > i")
            source = _SOURCE_BY_NAME.get(parts[8].strip())
            if source is None:
                raise ParseError(f"{path}: line {lineno}: unknown source "
                                 f"{parts[8].strip()!r}")
            if (i, j) in estimates:
                raise DuplicateKeyError(f"{path}: line {lineno}: duplicate "
                                        f"pair ({i},{j})")
            estimates[(i, j)] = FramePairEstimate(i, j, xi, source=source)
    if not estimates:
        raise ParseError(f"{path}: no estimates found")
    return TeacherSet(estimates=estimates)


def missing_pairs(teacher: TeacherSet, demanded: Sequence[PairKey]) -> List[PairKey]:
    """Demanded pair keys that the teacher set does not cover."""
    have = teacher.estimates.keys()
    return sorted(k for k in set(demanded) if k not in have)
