"""Command-line driver: generate / train / eval / uncertainty.

Every command takes a JSON config (unknown keys rejected) plus optional
--seed/--out overrides, and writes byte-identical artifacts when re-run
with the same inputs. Exit codes: 0 success, 1 computation error, 2
usage or configuration error. Numbers in CSV/TUM files are %.17g; JSON
uses Python's shortest round-trip float form. The CTC_ODOM_THREADS
environment variable caps worker threads (computation is single-threaded,
so 1, the default, is always honored).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .constraints import Source
from .errors import (
    ConfigurationError,
    CtcOdomError,
    InvalidArgumentError,
    ParseError,
)
from .evaluation import (
    CovarianceReport,
    MetricsReport,
    ate,
    flag_outliers,
    integrate,
    outlier_threshold,
    se3_error,
)
from .predictor import (
    FreePoseTable,
    TinyDenoiser,
    TrainSchedule,
    pretrain,
    sample_predictions,
    train_sequential,
)
from .teacher import (
    NoiseModel,
    generate_trajectory,
    load_estimates,
    sample_teacher,
    save_estimates,
    true_relatives,
)
from .tum import read_tum, write_tum

CHECKPOINT_VERSION = 1

MODELS = ("free_table", "tiny_denoiser")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _section(raw: dict, name: str, defaults: dict) -> dict:
    got = raw.get(name, {})
    if not isinstance(got, dict):
        raise ConfigurationError(f"config section {name!r} must be an object")
    unknown = set(got) - set(defaults)
    if unknown:
        raise ConfigurationError(
            f"unknown keys in config section {name!r}: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(got)
    return merged


_TOP_LEVEL = ("seed", "out_dir", "model", "trajectory", "noise", "pairs",
              "schedule", "denoiser", "evaluation", "uncertainty", "paths")


@dataclass
class RunConfig:
    seed: int
    out_dir: str
    model: str
    trajectory: dict
    noise: NoiseModel
    pairs: dict
    schedule: dict
    denoiser: dict
    evaluation: dict
    uncertainty: dict
    paths: Dict[str, str] = field(default_factory=dict)

    def path(self, name: str, default_name: str) -> str:
        p = self.paths.get(name)
        if p is None:
            p = os.path.join(self.out_dir, default_name)
        return p


def load_config(path: str, seed: Optional[int] = None,
                out: Optional[str] = None) -> RunConfig:
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: config root must be an object")
    unknown = set(raw) - set(_TOP_LEVEL)
    if unknown:
        raise ConfigurationError(f"{path}: unknown top-level keys {sorted(unknown)}")

    trajectory = _section(raw, "trajectory", {
        "n_frames": 100, "profile": "smooth_walk",
        "dt": 1.0 / 30.0, "max_speed": 3.0})
    noise_d = _section(raw, "noise", {
        "sigma_t": 0.01, "sigma_r": 0.0087,
        "outlier_rate": 0.0, "outlier_scale": 10.0})
    pairs = _section(raw, "pairs", {"skip_min": 1, "skip_max": 5})
    schedule = _section(raw, "schedule", {
        "pretrain_epochs": 500, "seq_epochs": 40,
        "window_start": 3, "window_end": 18,
        "lr": 1e-4, "lr_decay": 0.5, "decay_every": 5,
        "pretrain_lr": None, "pretrain_decay_every": None,
        "alpha": 1.0, "beta": 3.0, "max_span": 5, "window_stride": None})
    denoiser = _section(raw, "denoiser", {"hidden": 64, "gamma_train": 0.7})
    evaluation = _section(raw, "evaluation", {"alignment": "first_pose"})
    uncertainty = _section(raw, "uncertainty", {
        "k_samples": 10, "gamma": 0.1, "threshold": None,
        "quantile": 0.95, "mode": "trace"})
    paths = raw.get("paths", {})
    if not isinstance(paths, dict):
        raise ConfigurationError("config section 'paths' must be an object")

    model = raw.get("model", "free_table")
    if model not in MODELS:
        raise ConfigurationError(f"model must be one of {MODELS}, got {model!r}")

    cfg = RunConfig(
        seed=int(raw.get("seed", 0)) if seed is None else int(seed),
        out_dir=str(raw.get("out_dir", ".")) if out is None else out,
        model=model,
        trajectory=trajectory,
        noise=NoiseModel(sigma_t=float(noise_d["sigma_t"]),
                         sigma_r=float(noise_d["sigma_r"]),
                         outlier_rate=float(noise_d["outlier_rate"]),
                         outlier_scale=float(noise_d["outlier_scale"])),
        pairs=pairs,
        schedule=schedule,
        denoiser=denoiser,
        evaluation=evaluation,
        uncertainty=uncertainty,
        paths={str(k): str(v) for k, v in paths.items()},
    )
    return cfg


def _schedules(cfg: RunConfig):
    s = cfg.schedule
    common = dict(window_start=int(s["window_start"]),
                  window_end=int(s["window_end"]),
                  lr_decay=float(s["lr_decay"]),
                  alpha=float(s["alpha"]), beta=float(s["beta"]),
                  max_span=int(s["max_span"]),
                  window_stride=(None if s["window_stride"] is None
                                 else int(s["window_stride"])))
    pre = TrainSchedule(
        pretrain_epochs=int(s["pretrain_epochs"]), seq_epochs=0,
        lr=float(s["pretrain_lr"] if s["pretrain_lr"] is not None else s["lr"]),
        decay_every=int(s["pretrain_decay_every"]
                        if s["pretrain_decay_every"] is not None
                        else s["decay_every"]),
        **common)
    seq = TrainSchedule(
        pretrain_epochs=0, seq_epochs=int(s["seq_epochs"]),
        lr=float(s["lr"]), decay_every=int(s["decay_every"]), **common)
    return pre, seq


def _flag_key(key) -> str:
    return f"{key[0]},{key[1]}"


def _write_json(path: str, payload) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_generate(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    t = cfg.trajectory
    gt = generate_trajectory(int(t["n_frames"]), seed=cfg.seed,
                             profile=str(t["profile"]), dt=float(t["dt"]),
                             max_speed=float(t["max_speed"]))
    teacher = sample_teacher(gt, cfg.noise,
                             skip_min=int(cfg.pairs["skip_min"]),
                             skip_max=int(cfg.pairs["skip_max"]),
                             seed=cfg.seed)
    gt_path = cfg.path("ground_truth", "gt.tum")
    teacher_path = cfg.path("teacher", "teacher.csv")
    flags_path = cfg.path("flags", "teacher_flags.json")
    write_tum(gt_path, gt)
    save_estimates(teacher_path, teacher)
    _write_json(flags_path, {_flag_key(k): v
                             for k, v in sorted(teacher.outlier_flags.items())})
    contaminated = sum(teacher.outlier_flags.values())
    print(f"frames: {len(gt)}")
    print(f"pairs: {len(teacher.estimates)}")
    print(f"contaminated: {contaminated}")
    print(f"wrote {gt_path}, {teacher_path}, {flags_path}")
    return 0


def _build_model(cfg: RunConfig, teacher):
    if cfg.model == "free_table":
        return FreePoseTable.zeros(sorted(teacher.estimates))
    return TinyDenoiser.create(hidden=int(cfg.denoiser["hidden"]),
                               gamma=float(cfg.denoiser["gamma_train"]),
                               seed=cfg.seed)


def cmd_train(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    teacher = load_estimates(cfg.path("teacher", "teacher.csv"))
    pre_sched, seq_sched = _schedules(cfg)
    model = _build_model(cfg, teacher)
    hist = pretrain(model, teacher, pre_sched, seed=cfg.seed)
    seq_hist, refined = train_sequential(model, teacher, seq_sched, seed=cfg.seed)
    hist.extend(seq_hist)

    hist_path = cfg.path("history", "history.csv")
    with open(hist_path, "w") as f:
        f.write("epoch,phase,window_len,lr,loss_total,loss_ctc,loss_reg\n")
        for row in hist:
            f.write(",".join([str(row.epoch), row.phase, str(row.window_len),
                              _fmt(row.lr), _fmt(row.loss_total),
                              _fmt(row.loss_ctc), _fmt(row.loss_reg)]) + "\n")

    ckpt_path = cfg.path("checkpoint", "checkpoint.json")
    _write_json(ckpt_path, {"format_version": CHECKPOINT_VERSION,
                            "model": cfg.model,
                            "state": model.to_state()})

    refined_path = cfg.path("refined", "refined.csv")
    refined_est = {k: type(teacher.estimates[k])(k[0], k[1], v, source=Source.MODEL)
                   for k, v in refined.items()}
    save_estimates(refined_path, refined_est)
    print(f"trained {cfg.model} on {len(teacher.estimates)} pairs")
    print(f"final epoch loss_total: {_fmt(hist[-1].loss_total)}")
    print(f"wrote {ckpt_path}, {hist_path}, {refined_path}")
    return 0


def load_checkpoint(path: str):
    with open(path) as f:
        raw = json.load(f)
    version = raw.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"{path}: unsupported checkpoint format_version {version!r}")
    kind = raw.get("model")
    if kind == "free_table":
        return FreePoseTable.from_state(raw["state"])
    if kind == "tiny_denoiser":
        return TinyDenoiser.from_state(raw["state"])
    raise ConfigurationError(f"{path}: unknown model kind {kind!r}")


def cmd_eval(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    est_set = load_estimates(cfg.path("estimates", "refined.csv"))
    gt = read_tum(cfg.path("ground_truth", "gt.tum"))
    n = est_set.n_frames()
    if n != len(gt):
        raise InvalidArgumentError(
            f"estimates cover {n} frames but ground truth has {len(gt)}")
    consecutive = est_set.consecutive
    est_traj = integrate(gt.poses[0], consecutive, timestamps=gt.timestamps)

    alignment = str(cfg.evaluation["alignment"])
    ate_mean, ate_std = ate(est_traj, gt, align=alignment)
    keys = sorted(est_set.estimates)
    gt_xis = true_relatives(gt, keys)
    gt_map = {k: gt_xis[a] for a, k in enumerate(keys)}
    se3_all = se3_error(est_set.xi_map(), gt_map)
    ckeys = sorted(consecutive)
    se3_consec = se3_error({k: consecutive[k].xi for k in ckeys},
                           {k: gt_map[k] for k in ckeys})
    report = MetricsReport(ate_mean=ate_mean, ate_std=ate_std,
                           se3_err_mean=se3_all, n_frames=len(gt),
                           alignment=alignment)

    metrics_path = cfg.path("metrics", "metrics.json")
    payload = report.as_dict()
    payload["se3_err_consecutive"] = se3_consec
    _write_json(metrics_path, payload)

    traj_path = cfg.path("trajectory", "trajectory.tum")
    write_tum(traj_path, est_traj)

    xz_path = cfg.path("xz", "xz.csv")
    with open(xz_path, "w") as f:
        f.write("timestamp,x_est,z_est,x_gt,z_gt\n")
        for ts, pe, pg in zip(gt.timestamps, est_traj.poses, gt.poses):
            f.write(",".join([f"{ts:.6f}", _fmt(pe.t[0]), _fmt(pe.t[2]),
                              _fmt(pg.t[0]), _fmt(pg.t[2])]) + "\n")

    print(f"ate_mean: {_fmt(ate_mean)} ({alignment})")
    print(f"se3_err_mean: {_fmt(se3_all)}")
    print(f"wrote {metrics_path}, {traj_path}, {xz_path}")
    return 0


def cmd_uncertainty(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    model = load_checkpoint(cfg.path("checkpoint", "checkpoint.json"))
    if not getattr(model, "stochastic", False):
        raise ConfigurationError(
            "checkpoint holds a free pose table, which has no dropout "
            "substrate; uncertainty needs a tiny_denoiser checkpoint")
    teacher = load_estimates(cfg.path("teacher", "teacher.csv"))
    u = cfg.uncertainty
    K = int(u["k_samples"])
    gamma = float(u["gamma"])
    if K < 2:
        raise InvalidArgumentError("k_samples must be >= 2")

    reports = []
    for key in sorted(teacher.estimates):
        pair_seed = (cfg.seed * 1000003 + key[0] * 1013 + key[1]) % (2 ** 63)
        samples = sample_predictions(model, teacher.estimates[key].xi,
                                     K=K, gamma=gamma, seed=pair_seed)
        reports.append(CovarianceReport.from_samples(key, samples))

    mode = str(u["mode"])
    threshold = u["threshold"]
    cut = (float(threshold) if threshold is not None
           else outlier_threshold(reports, float(u["quantile"]), mode))
    flagged = flag_outliers(reports, threshold=cut, mode=mode)

    payload = {
        "k_samples": K,
        "gamma": gamma,
        "mode": mode,
        "threshold_used": cut,
        "pairs": [{
            "i": r.pair[0], "j": r.pair[1],
            "mean": r.mean.tolist(),
            "cov": r.cov.tolist(),
            "score": r.score,
            "outlier": r.outlier,
        } for r in flagged],
    }

    flags_path = cfg.paths.get("flags")
    if flags_path:
        with open(flags_path) as f:
            truth = json.load(f)
        tp = sum(1 for r in flagged if r.outlier and truth.get(_flag_key(r.pair)))
        fp = sum(1 for r in flagged if r.outlier and not truth.get(_flag_key(r.pair)))
        fn = sum(1 for r in flagged if not r.outlier and truth.get(_flag_key(r.pair)))
        payload["precision"] = tp / max(1, tp + fp)
        payload["recall"] = tp / max(1, tp + fn)

    cov_path = cfg.path("covariance", "covariance.json")
    _write_json(cov_path, payload)
    n_out = sum(1 for r in flagged if r.outlier)
    print(f"pairs: {len(flagged)}, flagged: {n_out}, threshold: {_fmt(cut)}")
    if "precision" in payload:
        print(f"precision: {_fmt(payload['precision'])}, "
              f"recall: {_fmt(payload['recall'])}")
    print(f"wrote {cov_path}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "uncertainty": cmd_uncertainty,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctc-odom",
        description="Refine noisy pairwise odometry estimates by enforcing "
                    "composite transformation constraints.",
        epilog="Quaternions in TUM files are (qx, qy, qz, qw), scalar last, "
               "normalized on read. CTC_ODOM_THREADS caps worker threads "
               "(default 1 for reproducibility).")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
            ("generate", "write a synthetic ground-truth trajectory and a "
                         "noisy teacher estimate file"),
            ("train", "run two-phase training and write checkpoint, history "
                      "and refined estimates"),
            ("eval", "integrate estimates and report trajectory metrics"),
            ("uncertainty", "dropout-sample a trained denoiser and report "
                            "per-pair covariances")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None,
                       help="override the config output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("CTC_ODOM_THREADS", "1")
    try:
        if int(threads) < 1:
            raise ValueError
    except ValueError:
        print(f"error: CTC_ODOM_THREADS={threads!r} is not a positive integer",
              file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        return COMMANDS[args.command](cfg)
    except (ConfigurationError, ParseError, InvalidArgumentError,
            FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CtcOdomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
