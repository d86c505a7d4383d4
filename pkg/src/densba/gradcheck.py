"""Self-contained gradient audit of the composed loss.

Builds a smooth random multi-frame state, evaluates the total loss once for
its analytic gradients, then probes every variable block with central
differences: each pose and focal block in full, and a random sample of
coordinates for the dense depth and flow blocks. Smooth fields keep the
probes away from abs/min/clamp kinks and image-boundary crossings, where
central differences are meaningless at the probe step; near-zero analytic
coordinates are skipped for the same reason.
"""

from __future__ import annotations

from typing import List

import numpy as np

from .autodiff import GradCheckReport, finite_diff_check
from .geometry import Intrinsics, RigidMotion
from .losses import LossWeights, total_loss
from .state import OutputState


def _smooth_field(rng, h, w, base, amp, waves=3):
    V, U = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.full((h, w), float(base))
    for _ in range(waves):
        fu, fv = rng.uniform(-0.12, 0.12, size=2)
        out += rng.uniform(0.2, 1.0) * amp * np.sin(
            2 * np.pi * (fu * U + fv * V) + rng.uniform(0, 7)
        )
    return out


def _smooth_flow(rng, h, w):
    return np.stack(
        [_smooth_field(rng, h, w, 0.0, 0.45), _smooth_field(rng, h, w, 0.0, 0.45)],
        axis=-1,
    )


def random_probe_state(height: int = 16, width: int = 16, seed: int = 0,
                       n_frames: int = 3):
    """A smooth random state plus frames, suitable for FD probing."""
    if height < 4 or width < 4:
        raise ValueError(f"probe state needs at least 4x4, got {height}x{width}")
    if n_frames < 2:
        raise ValueError(f"need at least 2 frames, got {n_frames}")
    rng = np.random.default_rng(seed)
    frames = [
        np.clip(_smooth_field(rng, height, width, 0.5, 0.11), 0.02, 0.98)
        for _ in range(n_frames)
    ]
    K = Intrinsics(fx=1.25 * width, fy=1.375 * width, width=width, height=height)
    depths = tuple(_smooth_field(rng, height, width, 3.4, 0.3) for _ in range(n_frames))
    motions = tuple(
        RigidMotion(euler=rng.uniform(-0.025, 0.025, 3),
                    translation=rng.uniform(-0.1, 0.1, 3))
        for _ in range(n_frames - 1)
    )
    flows_f = tuple(_smooth_flow(rng, height, width) for _ in range(n_frames - 1))
    flows_b = tuple(_smooth_flow(rng, height, width) for _ in range(n_frames - 1))
    state = OutputState(depths=depths, motions=motions, intrinsics=K,
                        flows_fwd=flows_f, flows_bwd=flows_b)
    return state, frames


def _rebuild(state, **repl):
    kw = dict(depths=state.depths, motions=state.motions,
              intrinsics=state.intrinsics, flows_fwd=state.flows_fwd,
              flows_bwd=state.flows_bwd)
    kw.update(repl)
    return OutputState(**kw)


def _sample_coords(rng, grad, n, floor=1e-6):
    idx = np.flatnonzero(np.abs(np.asarray(grad).ravel()) > floor)
    if idx.size == 0:
        return idx
    return rng.choice(idx, size=min(n, idx.size), replace=False)


def run_gradient_suite(height: int = 16, width: int = 16, seed: int = 0, *,
                       step: float = 1e-6, tolerance: float = 1e-4,
                       coords_per_block: int = 12,
                       weights: LossWeights = None) -> List[GradCheckReport]:
    """FD-probe every gradient block of the total loss; one report per block."""
    weights = LossWeights() if weights is None else weights
    state, frames = random_probe_state(height, width, seed)
    rng = np.random.default_rng(seed + 1)
    n = len(frames)
    g = total_loss(state, frames, weights).gradients

    def value(s):
        return total_loss(s, frames, weights, want_gradients=False).total

    reports = []

    def dense(name, base, grad, rebuild):
        idx = _sample_coords(rng, grad, coords_per_block)
        if idx.size == 0:
            # contracted-zero block (e.g. a weight is off); nothing to probe
            reports.append(GradCheckReport(
                name=name, max_rel_error=0.0, failing=np.empty(0, dtype=np.intp),
                tolerance=tolerance, n_coords=0,
                rel_errors=np.empty(0)))
            return

        def f(xs):
            arr = base.copy()
            arr.ravel()[idx] = xs
            return value(rebuild(arr))

        reports.append(finite_diff_check(
            f, base.ravel()[idx], np.asarray(grad).ravel()[idx],
            step=step, name=name, tolerance=tolerance))

    for k in range(n):
        dense(
            f"depths[{k}]", state.depths[k], g["depths"][k],
            lambda arr, k=k: _rebuild(state, depths=tuple(
                arr if i == k else state.depths[i] for i in range(n))),
        )
    for k in range(n - 1):
        def with_motion(m, k=k):
            return _rebuild(state, motions=tuple(
                m if i == k else state.motions[i] for i in range(n - 1)))

        e0 = np.asarray(state.motions[k].euler, dtype=np.float64)
        t0 = np.asarray(state.motions[k].translation, dtype=np.float64)
        reports.append(finite_diff_check(
            lambda xs, k=k: value(with_motion(RigidMotion(
                euler=xs, translation=state.motions[k].translation), k)),
            e0, g["euler"][k], step=step, name=f"euler[{k}]",
            tolerance=tolerance))
        reports.append(finite_diff_check(
            lambda xs, k=k: value(with_motion(RigidMotion(
                euler=state.motions[k].euler, translation=xs), k)),
            t0, g["translation"][k], step=step, name=f"translation[{k}]",
            tolerance=tolerance))
        dense(
            f"flows_fwd[{k}]", state.flows_fwd[k], g["flows_fwd"][k],
            lambda arr, k=k: _rebuild(state, flows_fwd=tuple(
                arr if i == k else state.flows_fwd[i] for i in range(n - 1))),
        )
        dense(
            f"flows_bwd[{k}]", state.flows_bwd[k], g["flows_bwd"][k],
            lambda arr, k=k: _rebuild(state, flows_bwd=tuple(
                arr if i == k else state.flows_bwd[i] for i in range(n - 1))),
        )

    K = state.intrinsics
    reports.append(finite_diff_check(
        lambda xs: value(_rebuild(state, intrinsics=Intrinsics(
            fx=xs[0], fy=xs[1], width=K.width, height=K.height))),
        np.array([K.fx, K.fy]), g["focal"], step=step, name="focal",
        tolerance=tolerance))
    return reports
