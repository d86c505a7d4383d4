"""Evaluation metrics: depth error/accuracy columns, flow EPE, trajectory ATE.

Depth follows the standard monocular evaluation protocol: optional median
scaling (on by default, since monocular depth is scale-ambiguous), ground
truth capped at 80 m, and the usual error / threshold-accuracy columns.
Flow is mean end-point error over an overall and a non-occluded mask.
Trajectory error scale-aligns each fixed-length snippet to the ground truth
before measuring position residuals, again because monocular scale is free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import RigidMotion, compose, euler_to_matrix
from .validation import EmptySupportError

DEPTH_CSV_HEADER = "abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3"
FLOW_CSV_HEADER = "epe_all,epe_noc"
POSE_CSV_HEADER = "ate_mean,ate_std"


def _csv(values) -> str:
    return ",".join(f"{float(v):.17g}" for v in values)


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float

    def csv_row(self) -> str:
        return _csv((self.abs_rel, self.sq_rel, self.rmse, self.rmse_log,
                     self.a1, self.a2, self.a3))


@dataclass(frozen=True)
class FlowMetrics:
    epe_all: float
    epe_noc: float

    def csv_row(self) -> str:
        return _csv((self.epe_all, self.epe_noc))


@dataclass(frozen=True)
class PoseMetrics:
    ate_mean: float
    ate_std: float

    def csv_row(self) -> str:
        return _csv((self.ate_mean, self.ate_std))


def _paired(pred, gt, name: str):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"{name}: pred shape {pred.shape} != gt shape {gt.shape}")
    return pred, gt


def _bool_mask(mask, shape, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != shape:
        raise ValueError(f"{name}: mask shape {mask.shape} != data shape {shape}")
    return mask.astype(bool)


def depth_metrics(pred, gt, mask=None, *, median_scale: bool = True,
                  cap: float = 80.0) -> DepthMetrics:
    """Depth error and threshold-accuracy columns over the valid support.

    The support is `mask` (all pixels when omitted) intersected with ground
    truth inside (0, cap]. With median scaling, pred is first multiplied by
    median(gt)/median(pred) over that support.
    """
    pred, gt = _paired(pred, gt, "depth_metrics")
    keep = np.ones(gt.shape, dtype=bool) if mask is None else \
        _bool_mask(mask, gt.shape, "depth_metrics")
    keep = keep & (gt > 0.0) & (gt <= cap)
    if not keep.any():
        raise EmptySupportError("no pixels with valid ground-truth depth")
    p, g = pred[keep], gt[keep]
    if median_scale:
        p = p * (np.median(g) / np.median(p))
    ratio = np.maximum(p / g, g / p)
    diff = p - g
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff * diff / g)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean(np.log(p / g) ** 2))),
        a1=float(np.mean(ratio < 1.25)),
        a2=float(np.mean(ratio < 1.25 ** 2)),
        a3=float(np.mean(ratio < 1.25 ** 3)),
    )


def flow_epe(pred, gt, valid=None, noc=None) -> FlowMetrics:
    """Mean end-point error over the valid mask and its non-occluded subset.

    Without a non-occlusion mask epe_noc simply repeats epe_all.
    """
    pred, gt = _paired(pred, gt, "flow_epe")
    if pred.ndim != 3 or pred.shape[-1] != 2:
        raise ValueError(f"flow_epe: expected (H, W, 2) fields, got {pred.shape}")
    epe = np.linalg.norm(pred - gt, axis=-1)
    keep = np.ones(epe.shape, dtype=bool) if valid is None else \
        _bool_mask(valid, epe.shape, "flow_epe")
    if not keep.any():
        raise EmptySupportError("no valid flow pixels")
    epe_all = float(np.mean(epe[keep]))
    if noc is None:
        return FlowMetrics(epe_all=epe_all, epe_noc=epe_all)
    keep_noc = keep & _bool_mask(noc, epe.shape, "flow_epe")
    if not keep_noc.any():
        raise EmptySupportError("no non-occluded flow pixels")
    return FlowMetrics(epe_all=epe_all, epe_noc=float(np.mean(epe[keep_noc])))


def accumulate_motions(motions: Sequence[RigidMotion]) -> tuple:
    """Pairwise frame-to-frame motions -> absolute poses, identity first.

    Element k maps frame-0 camera coordinates to frame-k coordinates.
    """
    acc = RigidMotion(euler=np.zeros(3), translation=np.zeros(3))
    out = [acc]
    for m in motions:
        acc = compose(m, acc)
        out.append(acc)
    return tuple(out)


def trajectory_positions(trajectory: Sequence[RigidMotion]) -> np.ndarray:
    """Camera centers of absolute poses, c = -R^T t, as an (N, 3) array."""
    out = np.empty((len(trajectory), 3))
    for k, m in enumerate(trajectory):
        R = euler_to_matrix(m.euler)
        out[k] = -(R.T @ np.asarray(m.translation, dtype=np.float64))
    return out


def ate(pred_traj: Sequence[RigidMotion], gt_traj: Sequence[RigidMotion],
        *, snippet_length: int = 5) -> PoseMetrics:
    """Absolute trajectory error over scale-aligned fixed-length snippets.

    Every length-`snippet_length` window (the whole sequence when shorter)
    is shifted to start at its first camera position, the predicted window
    is scaled by the least-squares factor onto the ground truth, and the
    per-frame position residual norms of all windows are pooled into one
    mean/std. A window whose prediction never moves is compared unscaled.
    """
    if len(pred_traj) != len(gt_traj):
        raise ValueError(
            f"trajectory lengths differ: {len(pred_traj)} vs {len(gt_traj)}")
    n = len(gt_traj)
    if n < 2:
        raise ValueError(f"need at least 2 poses, got {n}")
    if snippet_length < 2:
        raise ValueError(f"snippet_length must be >= 2, got {snippet_length}")
    p_pred = trajectory_positions(pred_traj)
    p_gt = trajectory_positions(gt_traj)
    if n <= snippet_length:
        starts = [0]
        length = n
    else:
        starts = range(n - snippet_length + 1)
        length = snippet_length
    errors = []
    for lo in starts:
        q_pred = p_pred[lo:lo + length] - p_pred[lo]
        q_gt = p_gt[lo:lo + length] - p_gt[lo]
        denom = float(np.sum(q_pred * q_pred))
        scale = float(np.sum(q_pred * q_gt)) / denom if denom > 0.0 else 1.0
        errors.append(np.linalg.norm(scale * q_pred - q_gt, axis=1))
    pooled = np.concatenate(errors)
    return PoseMetrics(ate_mean=float(np.mean(pooled)),
                       ate_std=float(np.std(pooled)))
