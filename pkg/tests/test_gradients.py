"""Finite-difference verification of every analytic gradient path.

Kernel-level checks run on small images; the block-level suite probes the
composed total loss on a random smooth 16x16 3-frame state, one variable
block at a time. Seeds are frozen: random smooth states keep residuals away
from the abs/min/clamp kinks and image-boundary crossings, where central
differences are meaningless at the probe step.
"""

import numpy as np
import pytest

from densba.autodiff import finite_diff_check
from densba.geometry import Intrinsics, RigidMotion
from densba.losses import (
    Branch,
    LossWeights,
    adaptive_photometric,
    epipolar_loss,
    forward_backward_flow,
    multiview_structure,
    smoothness,
    total_loss,
)
from densba.state import OutputState

STEP = 1e-6
TOL = 1e-4


def _smooth_field(rng, h, w, base, amp, waves=3):
    V, U = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.full((h, w), float(base))
    for _ in range(waves):
        fu, fv = rng.uniform(-0.12, 0.12, size=2)
        out += rng.uniform(0.2, 1.0) * amp * np.sin(
            2 * np.pi * (fu * U + fv * V) + rng.uniform(0, 7)
        )
    return out


def _smooth_image(rng, h, w):
    return np.clip(_smooth_field(rng, h, w, 0.5, 0.11), 0.02, 0.98)


def _check(report):
    assert report.ok, str(report)


def _fd_block(f, x0, analytic, name):
    _check(finite_diff_check(f, x0, analytic, step=STEP, name=name, tolerance=TOL))


def _sample_coords(rng, grad, n, floor=1e-6):
    """Random flat coordinates whose analytic gradient is clearly nonzero.

    Central differences cannot certify near-zero derivatives at rel tol:
    the quadratic truncation term dominates. Magnitude-filtering keeps the
    probe honest; separate tests pin exact zeros where zeros are contracted.
    """
    idx = np.flatnonzero(np.abs(np.asarray(grad).ravel()) > floor)
    assert idx.size >= n, f"only {idx.size} usable coordinates"
    return rng.choice(idx, size=n, replace=False)


# ── kernel-level checks (8x10) ───────────────────────────────────────────────

KH, KW = 8, 10


def _kernel_fixture(seed):
    rng = np.random.default_rng(seed)
    I_s = _smooth_image(rng, KH, KW)
    I_t = _smooth_image(rng, KH, KW)
    D_s = _smooth_field(rng, KH, KW, 3.2, 0.25)
    D_t = _smooth_field(rng, KH, KW, 3.2, 0.25)
    K = Intrinsics(fx=14.0, fy=15.0, width=KW, height=KH)
    m = RigidMotion(euler=rng.uniform(-0.03, 0.03, 3), translation=rng.uniform(-0.1, 0.1, 3))
    F = np.stack(
        [_smooth_field(rng, KH, KW, 0.0, 0.5), _smooth_field(rng, KH, KW, 0.0, 0.5)], axis=-1
    )
    B = np.stack(
        [_smooth_field(rng, KH, KW, 0.0, 0.5), _smooth_field(rng, KH, KW, 0.0, 0.5)], axis=-1
    )
    return I_s, I_t, D_s, D_t, K, m, F, B


class TestPhotometricGradients:
    def test_pose_and_focal(self):
        I_s, I_t, D, _, K, m, F, _ = _kernel_fixture(11)
        res = adaptive_photometric(I_s, I_t, D, K, m, F)
        g = res.gradients

        def value(euler, translation, fx, fy):
            return adaptive_photometric(
                I_s, I_t, D,
                Intrinsics(fx=fx, fy=fy, width=KW, height=KH),
                RigidMotion(euler=euler, translation=translation),
                F, want_gradients=False,
            ).value

        e0, t0 = np.asarray(m.euler, float), np.asarray(m.translation, float)
        _fd_block(lambda x: value(x, t0, K.fx, K.fy), e0, g["euler"], "euler")
        _fd_block(lambda x: value(e0, x, K.fx, K.fy), t0, g["translation"], "translation")
        _fd_block(
            lambda x: value(e0, t0, x[0], x[1]),
            np.array([K.fx, K.fy]), g["focal"], "focal",
        )

    def test_depth_and_flow_coords(self):
        I_s, I_t, D, _, K, m, F, _ = _kernel_fixture(12)
        rng = np.random.default_rng(120)
        res = adaptive_photometric(I_s, I_t, D, K, m, F)
        idx_d = _sample_coords(rng, res.gradients["depth"], 6)
        idx_f = _sample_coords(rng, res.gradients["flow"], 6)

        def depth_value(xs):
            D2 = D.copy()
            D2.ravel()[idx_d] = xs
            return adaptive_photometric(I_s, I_t, D2, K, m, F, want_gradients=False).value

        def flow_value(xs):
            F2 = F.copy()
            F2.ravel()[idx_f] = xs
            return adaptive_photometric(I_s, I_t, D, K, m, F2, want_gradients=False).value

        _fd_block(depth_value, D.ravel()[idx_d], res.gradients["depth"].ravel()[idx_d], "depth")
        _fd_block(flow_value, F.ravel()[idx_f], res.gradients["flow"].ravel()[idx_f], "flow")

    def test_across_branch_min_at_non_tied_pixels(self):
        # derivative of the per-pixel min follows the strictly selected branch
        I_s, I_t, D, _, K, m, F, _ = _kernel_fixture(13)
        res = adaptive_photometric(I_s, I_t, D, K, m, F)
        margin = np.abs(res.per_pixel_flow - res.per_pixel_rigid)
        strict = (res.mask != int(Branch.INVALID)) & (margin > 1e-3)
        rigid_px = np.argwhere(strict & (res.mask == int(Branch.RIGID)))
        flow_px = np.argwhere(strict & (res.mask == int(Branch.FLOW)))
        assert len(rigid_px) > 0 and len(flow_px) > 0

        v, u = rigid_px[0]
        idx = np.array([v * KW + u])

        def depth_value(xs):
            D2 = D.copy()
            D2.ravel()[idx] = xs
            return adaptive_photometric(I_s, I_t, D2, K, m, F, want_gradients=False).value

        _fd_block(depth_value, D.ravel()[idx], res.gradients["depth"].ravel()[idx], "min/rigid")

        v, u = flow_px[0]
        idx = np.array([(v * KW + u) * 2, (v * KW + u) * 2 + 1])

        def flow_value(xs):
            F2 = F.copy()
            F2.ravel()[idx] = xs
            return adaptive_photometric(I_s, I_t, D, K, m, F2, want_gradients=False).value

        _fd_block(flow_value, F.ravel()[idx], res.gradients["flow"].ravel()[idx], "min/flow")

    def test_flow_selected_pixels_have_zero_depth_gradient(self):
        I_s, I_t, D, _, K, m, F, _ = _kernel_fixture(14)
        res = adaptive_photometric(I_s, I_t, D, K, m, F)
        flow_sel = res.mask == int(Branch.FLOW)
        assert flow_sel.any()
        assert np.all(res.gradients["depth"][flow_sel] == 0.0)
        rigid_sel = res.mask == int(Branch.RIGID)
        assert np.all(res.gradients["flow"][rigid_sel] == 0.0)


class TestStructureGradients:
    def test_all_blocks(self):
        _, _, D_s, D_t, K, m, _, _ = _kernel_fixture(15)
        rng = np.random.default_rng(150)
        value, g = multiview_structure(D_s, D_t, K, m)
        assert value > 0

        def loss(euler, translation, fx, fy, ds, dt):
            return multiview_structure(
                ds, dt, Intrinsics(fx=fx, fy=fy, width=KW, height=KH),
                RigidMotion(euler=euler, translation=translation), want_gradients=False,
            )[0]

        e0, t0 = np.asarray(m.euler, float), np.asarray(m.translation, float)
        _fd_block(lambda x: loss(x, t0, K.fx, K.fy, D_s, D_t), e0, g["euler"], "euler")
        _fd_block(lambda x: loss(e0, x, K.fx, K.fy, D_s, D_t), t0, g["translation"], "translation")
        _fd_block(
            lambda x: loss(e0, t0, x[0], x[1], D_s, D_t),
            np.array([K.fx, K.fy]), g["focal"], "focal",
        )

        idx_s = _sample_coords(rng, g["depth_source"], 6)
        idx_t = _sample_coords(rng, g["depth_target"], 6)

        def src_value(xs):
            D2 = D_s.copy()
            D2.ravel()[idx_s] = xs
            return loss(e0, t0, K.fx, K.fy, D2, D_t)

        def tgt_value(xs):
            D2 = D_t.copy()
            D2.ravel()[idx_t] = xs
            return loss(e0, t0, K.fx, K.fy, D_s, D2)

        _fd_block(src_value, D_s.ravel()[idx_s], g["depth_source"].ravel()[idx_s], "depth_source")
        _fd_block(tgt_value, D_t.ravel()[idx_t], g["depth_target"].ravel()[idx_t], "depth_target")


class TestEpipolarGradients:
    def test_all_blocks(self):
        _, _, _, _, K, m, F, _ = _kernel_fixture(16)
        rng = np.random.default_rng(160)
        value, g = epipolar_loss(F, K, m)
        assert value > 0

        def loss(euler, translation, fx, fy, flow):
            return epipolar_loss(
                flow, Intrinsics(fx=fx, fy=fy, width=KW, height=KH),
                RigidMotion(euler=euler, translation=translation), want_gradients=False,
            )[0]

        e0, t0 = np.asarray(m.euler, float), np.asarray(m.translation, float)
        _fd_block(lambda x: loss(x, t0, K.fx, K.fy, F), e0, g["euler"], "euler")
        _fd_block(lambda x: loss(e0, x, K.fx, K.fy, F), t0, g["translation"], "translation")
        _fd_block(
            lambda x: loss(e0, t0, x[0], x[1], F), np.array([K.fx, K.fy]), g["focal"], "focal"
        )
        idx = _sample_coords(rng, g["flow"], 8)

        def flow_value(xs):
            F2 = F.copy()
            F2.ravel()[idx] = xs
            return loss(e0, t0, K.fx, K.fy, F2)

        _fd_block(flow_value, F.ravel()[idx], g["flow"].ravel()[idx], "flow")


class TestFlowConsistencyGradients:
    def test_both_flows(self):
        _, _, _, _, _, _, F, B = _kernel_fixture(17)
        rng = np.random.default_rng(170)
        value, g = forward_backward_flow(F, B)
        assert value > 0
        idx_f = _sample_coords(rng, g["flow_fwd"], 8)
        idx_b = _sample_coords(rng, g["flow_bwd"], 8)

        def fwd_value(xs):
            F2 = F.copy()
            F2.ravel()[idx_f] = xs
            return forward_backward_flow(F2, B, want_gradients=False)[0]

        def bwd_value(xs):
            B2 = B.copy()
            B2.ravel()[idx_b] = xs
            return forward_backward_flow(F, B2, want_gradients=False)[0]

        _fd_block(fwd_value, F.ravel()[idx_f], g["flow_fwd"].ravel()[idx_f], "flow_fwd")
        _fd_block(bwd_value, B.ravel()[idx_b], g["flow_bwd"].ravel()[idx_b], "flow_bwd")


class TestSmoothnessGradients:
    def test_full_block_scalar_field(self):
        rng = np.random.default_rng(18)
        guide = _smooth_image(rng, 6, 7)
        field = rng.normal(0.0, 1.0, size=(6, 7))
        value, g = smoothness(field, guide)
        assert value > 0

        def loss(xs):
            return smoothness(xs.reshape(6, 7), guide, want_gradients=False)[0]

        _fd_block(loss, field.ravel(), g["field"].ravel(), "field")

    def test_full_block_flow_field(self):
        rng = np.random.default_rng(19)
        guide = _smooth_image(rng, 6, 7)
        field = rng.normal(0.0, 1.0, size=(6, 7, 2))
        _, g = smoothness(field, guide)

        def loss(xs):
            return smoothness(xs.reshape(6, 7, 2), guide, want_gradients=False)[0]

        _fd_block(loss, field.ravel(), g["field"].ravel(), "field")


# ── block-level checks on the composed loss (16x16, 3 frames) ────────────────

GH = GW = 16


def _state16(seed):
    rng = np.random.default_rng(seed)
    frames = [_smooth_image(rng, GH, GW) for _ in range(3)]
    K = Intrinsics(fx=20.0, fy=22.0, width=GW, height=GH)
    depths = tuple(_smooth_field(rng, GH, GW, 3.4, 0.3) for _ in range(3))
    motions = tuple(
        RigidMotion(euler=rng.uniform(-0.025, 0.025, 3), translation=rng.uniform(-0.1, 0.1, 3))
        for _ in range(2)
    )
    flows_f = tuple(
        np.stack(
            [_smooth_field(rng, GH, GW, 0.0, 0.45), _smooth_field(rng, GH, GW, 0.0, 0.45)],
            axis=-1,
        )
        for _ in range(2)
    )
    flows_b = tuple(
        np.stack(
            [_smooth_field(rng, GH, GW, 0.0, 0.45), _smooth_field(rng, GH, GW, 0.0, 0.45)],
            axis=-1,
        )
        for _ in range(2)
    )
    state = OutputState(
        depths=depths, motions=motions, intrinsics=K, flows_fwd=flows_f, flows_bwd=flows_b
    )
    return state, frames


def _rebuild(state, **repl):
    kw = dict(
        depths=state.depths,
        motions=state.motions,
        intrinsics=state.intrinsics,
        flows_fwd=state.flows_fwd,
        flows_bwd=state.flows_bwd,
    )
    kw.update(repl)
    return OutputState(**kw)


class TestTotalLossBlocks:
    """Criterion: every gradient block of the composed loss survives FD probing."""

    W = LossWeights()

    def _value(self, state, frames):
        return total_loss(state, frames, self.W, want_gradients=False).total

    def test_depth_blocks(self):
        state, frames = _state16(300)
        rng = np.random.default_rng(301)
        g = total_loss(state, frames, self.W).gradients
        for f in range(3):
            idx = _sample_coords(rng, g["depths"][f], 12)
            base = state.depths[f]

            def loss(xs, f=f, idx=idx, base=base):
                d = base.copy()
                d.ravel()[idx] = xs
                depths = tuple(d if i == f else state.depths[i] for i in range(3))
                return self._value(_rebuild(state, depths=depths), frames)

            _fd_block(loss, base.ravel()[idx], g["depths"][f].ravel()[idx], f"depths[{f}]")

    def test_pose_blocks(self):
        state, frames = _state16(302)
        g = total_loss(state, frames, self.W).gradients
        for k in range(2):
            m = state.motions[k]
            e0 = np.asarray(m.euler, float)
            t0 = np.asarray(m.translation, float)

            def eul(xs, k=k):
                motions = tuple(
                    RigidMotion(euler=xs, translation=state.motions[i].translation)
                    if i == k else state.motions[i]
                    for i in range(2)
                )
                return self._value(_rebuild(state, motions=motions), frames)

            def tra(xs, k=k):
                motions = tuple(
                    RigidMotion(euler=state.motions[i].euler, translation=xs)
                    if i == k else state.motions[i]
                    for i in range(2)
                )
                return self._value(_rebuild(state, motions=motions), frames)

            _fd_block(eul, e0, g["euler"][k], f"euler[{k}]")
            _fd_block(tra, t0, g["translation"][k], f"translation[{k}]")

    def test_focal_block(self):
        state, frames = _state16(303)
        g = total_loss(state, frames, self.W).gradients

        def loss(xs):
            K = Intrinsics(fx=xs[0], fy=xs[1], width=GW, height=GH)
            return self._value(_rebuild(state, intrinsics=K), frames)

        K0 = state.intrinsics
        _fd_block(loss, np.array([K0.fx, K0.fy]), g["focal"], "focal")

    def test_flow_blocks(self):
        state, frames = _state16(304)
        rng = np.random.default_rng(305)
        g = total_loss(state, frames, self.W).gradients
        for k in range(2):
            for name, flows in (("flows_fwd", state.flows_fwd), ("flows_bwd", state.flows_bwd)):
                idx = _sample_coords(rng, g[name][k], 12)
                base = flows[k]

                def loss(xs, k=k, name=name, idx=idx, base=base, flows=flows):
                    fl = base.copy()
                    fl.ravel()[idx] = xs
                    repl = tuple(fl if i == k else flows[i] for i in range(2))
                    return self._value(_rebuild(state, **{name: repl}), frames)

                _fd_block(loss, base.ravel()[idx], g[name][k].ravel()[idx], f"{name}[{k}]")

    def test_gradient_blocks_all_finite_and_nonzero(self):
        state, frames = _state16(306)
        g = total_loss(state, frames, LossWeights()).gradients
        for f in range(3):
            assert np.all(np.isfinite(g["depths"][f]))
            assert np.any(g["depths"][f] != 0)
        for k in range(2):
            for name in ("euler", "translation", "flows_fwd", "flows_bwd"):
                assert np.all(np.isfinite(g[name][k]))
                assert np.any(g[name][k] != 0)
        assert np.all(np.isfinite(g["focal"])) and np.any(g["focal"] != 0)
