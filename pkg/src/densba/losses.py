"""Loss stack over a multi-frame refinement state.

Five kernels (adaptive photometric, multi-view structure, epipolar flow
consistency, edge-aware smoothness, forward/backward flow consistency) plus
their weighted composition over a frame snippet.

Gradient strategy: the warp and sampling pipelines run on vectorized
forward-mode duals (autodiff module) with a small fixed tangent width per
kernel. Scalar variables (euler angles, translation, focal lengths) occupy
dedicated slots whose per-pixel tangents are summed; per-pixel variables
(depth at the source pixel, flow at the source pixel) occupy a slot whose
tangent is read off pixelwise; dense variables that enter through bilinear
sampling of their own grid (target depth, backward flow) get one "probe"
slot whose per-sample derivative is scattered back through the interpolation
corners. Every kernel also runs value-only on plain ndarrays when gradients
are not requested, which is what the finite-difference checks probe.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import Dual, clamp, value_of, where
from .geometry import Intrinsics, RigidMotion, rotation_entries
from .image import (
    DEFAULT_TRADEOFF,
    SSIM_C1,
    SSIM_C2,
    image_gradient,
    scatter_bilinear,
    vec_bilinear,
)
from .state import OutputState
from .validation import (
    EmptySupportError,
    as_float_array,
    check_depth_map,
    check_flow_field,
    check_image,
)

_NINTH = 1.0 / 9.0
_Z_EPS = 1e-9


class Branch(enum.IntEnum):
    """Per-pixel correspondence choice of the adaptive photometric loss."""

    RIGID = 0
    FLOW = 1
    INVALID = 2


@dataclass(frozen=True)
class LossWeights:
    """Non-negative component weights; at least one must be positive."""

    w_apc: float = 1.0
    w_mvs: float = 0.1
    w_e: float = 0.01
    w_smooth_depth: float = 0.1
    w_smooth_flow: float = 0.1
    w_fb: float = 0.01

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")
        if all(getattr(self, name) == 0.0 for name in self.__dataclass_fields__):
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class PhotometricResult:
    """Value, per-pixel maps, branch mask, and gradients of the photometric loss.

    per_pixel_rigid / per_pixel_flow are NaN where that branch is invalid;
    per_pixel is NaN where no branch is valid.
    """

    value: float
    mask: np.ndarray
    per_pixel: np.ndarray
    per_pixel_rigid: np.ndarray
    per_pixel_flow: np.ndarray
    n_valid: int
    gradients: dict | None


@dataclass(frozen=True)
class LossReport:
    """Weighted total, unweighted per-component values, merged gradients."""

    total: float
    per_component: dict
    gradients: dict | None
    photometric: tuple


# ── shared pieces ────────────────────────────────────────────────────────────


def _pixel_grid(h: int, w: int):
    V, U = np.mgrid[0:h, 0:w]
    return U.astype(np.float64), V.astype(np.float64)


def _seed_scalar(v, width: int, slot: int):
    return Dual.seed(float(v), width, slot) if width else float(v)


def _motion_params(motion: RigidMotion, K: Intrinsics, width: int):
    """Euler/translation/focal scalars in slots 0..7, or plain floats."""
    e = [_seed_scalar(motion.euler[i], width, i) for i in range(3)]
    t = [_seed_scalar(motion.translation[i], width, 3 + i) for i in range(3)]
    fx = _seed_scalar(K.fx, width, 6)
    fy = _seed_scalar(K.fy, width, 7)
    return e, t, fx, fy


def _rigid_warp(U, V, depth, K: Intrinsics, e, t, fx, fy):
    """Backproject, transform, and reproject the full pixel grid.

    Returns (u1, v1, x1, y1, z1, front); front marks points that stay in
    front of the camera, and u1/v1 there are the warped pixel coordinates.
    Behind-camera points are projected with a placeholder division so the
    expressions stay finite; callers must mask with `front`.
    """
    x = (U - K.cx) * depth / fx
    y = (V - K.cy) * depth / fy
    R = rotation_entries(e[0], e[1], e[2])
    x1 = R[0][0] * x + R[0][1] * y + R[0][2] * depth + t[0]
    y1 = R[1][0] * x + R[1][1] * y + R[1][2] * depth + t[1]
    z1 = R[2][0] * x + R[2][1] * y + R[2][2] * depth + t[2]
    front = value_of(z1) > _Z_EPS
    z_safe = where(front, z1, 1.0)
    u1 = fx * x1 / z_safe + K.cx
    v1 = fy * y1 / z_safe + K.cy
    return u1, v1, x1, y1, z1, front


def _in_box(u: np.ndarray, v: np.ndarray, w: int, h: int) -> np.ndarray:
    return (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)


def _sample_grid(grid: np.ndarray, u, v, probe_slot: int | None = None):
    """Bilinearly sample a 2-d grid at dual or plain coordinates.

    With dual coordinates the positional tangents chain through the sample;
    probe_slot, if given, additionally receives d(sample)/d(sampled grid
    value) = 1 for scattering back to grid corners via the returned cell.
    """
    smp = vec_bilinear(grid, value_of(u), value_of(v))
    if not isinstance(u, Dual):
        return smp.value, smp
    tan = u.tan * smp.d_du[..., None] + v.tan * smp.d_dv[..., None]
    if probe_slot is not None:
        tan[..., probe_slot] += 1.0
    return Dual(smp.value, tan), smp


def _channel_list(img: np.ndarray):
    if img.ndim == 2:
        return [img]
    return [img[:, :, c] for c in range(img.shape[2])]


def _window_similarity(I_s, I_t, U, V, uq, vq, r: float):
    """Dissimilarity of 3x3 source windows vs target windows centered at (uq, vq).

    Source taps take integer neighbors with replicate padding; target taps
    offset the real center, clamp to the image box, and sample bilinearly.
    SSIM uses population statistics over the 9 taps. The numerator and
    denominator below mirror each other operation by operation: on
    bit-identical windows num == den exactly, so the dissimilarity and its
    whole tangent are exactly zero (ties between branches are then decided
    deterministically, and ground-truth states are true stationary points).
    """
    h, w = value_of(uq).shape
    src_ch = _channel_list(I_s)
    tgt_ch = _channel_list(I_t)
    C = len(src_ch)
    sum_a = [None] * C
    sum_aa = [None] * C
    sum_b = [None] * C
    sum_bb = [None] * C
    sum_ab = [None] * C
    sum_abs = [None] * C

    for dv in (-1, 0, 1):
        sv = np.clip(V + dv, 0, h - 1).astype(np.intp)
        tv = clamp(vq + dv, 0.0, h - 1.0)
        for du in (-1, 0, 1):
            su = np.clip(U + du, 0, w - 1).astype(np.intp)
            tu = clamp(uq + du, 0.0, w - 1.0)
            for c in range(C):
                a = src_ch[c][sv, su]
                b, _ = _sample_grid(tgt_ch[c], tu, tv)
                d = abs(b - a)
                if sum_a[c] is None:
                    sum_a[c] = a
                    sum_aa[c] = a * a
                    sum_b[c] = b
                    sum_bb[c] = b * b
                    sum_ab[c] = b * a
                    sum_abs[c] = d
                else:
                    sum_a[c] = sum_a[c] + a
                    sum_aa[c] = sum_aa[c] + a * a
                    sum_b[c] = sum_b[c] + b
                    sum_bb[c] = sum_bb[c] + b * b
                    sum_ab[c] = sum_ab[c] + b * a
                    sum_abs[c] = sum_abs[c] + d

    total = None
    for c in range(C):
        mu_a = sum_a[c] * _NINTH
        mu_b = sum_b[c] * _NINTH
        var_a = sum_aa[c] * _NINTH - mu_a * mu_a
        var_b = sum_bb[c] * _NINTH - mu_b * mu_b
        cov = sum_ab[c] * _NINTH - mu_b * mu_a
        num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
        ssim_c = num / den
        s_c = (1.0 - ssim_c) * (0.5 * r) + ((1.0 - r) * _NINTH) * sum_abs[c]
        total = s_c if total is None else total + s_c
    if C > 1:
        total = total * (1.0 / C)
    return total


def _pose_block_grads(weight: np.ndarray, tan: np.ndarray) -> np.ndarray:
    """Weighted pixel sums of the first 8 tangent slots (euler, t, focal)."""
    return np.einsum("hw,hwk->k", weight, tan[..., :8])


# ── adaptive photometric loss ────────────────────────────────────────────────


def adaptive_photometric(
    image_source,
    image_target,
    depth,
    intrinsics: Intrinsics,
    motion: RigidMotion,
    flow,
    *,
    tradeoff: float = DEFAULT_TRADEOFF,
    branch: str = "adaptive",
    want_gradients: bool = True,
) -> PhotometricResult:
    """Photometric warp loss with per-pixel rigid-vs-flow branch selection.

    Each source pixel is compared against the target image twice: once at
    its depth+motion reprojection, once at its flow displacement. The branch
    with the lower window dissimilarity wins (exact ties and pixels where
    only the rigid branch is valid go rigid); pixels where neither
    correspondence lands inside the target are excluded from the mean.
    branch="rigid" or "flow" forces one branch for the whole image.
    """
    I_s = check_image(image_source, "image_source")
    I_t = check_image(image_target, "image_target")
    D = check_depth_map(depth)
    F = check_flow_field(flow)
    K = intrinsics
    h, w = I_s.shape[:2]
    if I_t.shape != I_s.shape:
        raise ValueError(f"image shapes differ: {I_s.shape} vs {I_t.shape}")
    if D.shape != (h, w) or F.shape[:2] != (h, w):
        raise ValueError("depth/flow shape does not match the images")
    if (K.height, K.width) != (h, w):
        raise ValueError(f"intrinsics are {K.width}x{K.height}, images are {w}x{h}")
    if not 0.0 <= tradeoff <= 1.0:
        raise ValueError(f"tradeoff must be in [0, 1], got {tradeoff}")
    if branch not in ("adaptive", "rigid", "flow"):
        raise ValueError(f"unknown branch mode {branch!r}")

    U, V = _pixel_grid(h, w)

    rigid_width = 9 if want_gradients else 0
    e, t, fx, fy = _motion_params(motion, K, rigid_width)
    d_var = Dual.seed(D, rigid_width, 8) if rigid_width else D
    u_r, v_r, _, _, _, front = _rigid_warp(U, V, d_var, K, e, t, fx, fy)
    valid_r = front & _in_box(value_of(u_r), value_of(v_r), w, h)

    if want_gradients:
        u_f = U + Dual.seed(F[..., 0], 2, 0)
        v_f = V + Dual.seed(F[..., 1], 2, 1)
    else:
        u_f = U + F[..., 0]
        v_f = V + F[..., 1]
    valid_f = _in_box(value_of(u_f), value_of(v_f), w, h)

    S_r = _window_similarity(I_s, I_t, U, V, u_r, v_r, tradeoff)
    S_f = _window_similarity(I_s, I_t, U, V, u_f, v_f, tradeoff)
    sr = value_of(S_r)
    sf = value_of(S_f)

    if branch == "adaptive":
        rigid_sel = valid_r & (~valid_f | (sr <= sf))
        flow_sel = valid_f & ~rigid_sel
    elif branch == "rigid":
        rigid_sel = valid_r
        flow_sel = np.zeros_like(valid_r)
    else:
        flow_sel = valid_f
        rigid_sel = np.zeros_like(valid_f)

    n_valid = int(rigid_sel.sum()) + int(flow_sel.sum())
    if n_valid == 0:
        raise EmptySupportError("photometric loss: no pixel has a valid correspondence")

    mask = np.full((h, w), int(Branch.INVALID), dtype=np.int8)
    mask[rigid_sel] = int(Branch.RIGID)
    mask[flow_sel] = int(Branch.FLOW)
    chosen = np.where(rigid_sel, sr, np.where(flow_sel, sf, 0.0))
    value = float(chosen[mask != int(Branch.INVALID)].sum() / n_valid)

    grads = None
    if want_gradients:
        wr = np.where(rigid_sel, 1.0 / n_valid, 0.0)
        wf = np.where(flow_sel, 1.0 / n_valid, 0.0)
        pose = _pose_block_grads(wr, S_r.tan)
        grads = {
            "euler": pose[0:3],
            "translation": pose[3:6],
            "focal": pose[6:8],
            "depth": wr * S_r.tan[..., 8],
            "flow": wf[..., None] * S_f.tan,
        }

    return PhotometricResult(
        value=value,
        mask=mask,
        per_pixel=np.where(mask != int(Branch.INVALID), chosen, np.nan),
        per_pixel_rigid=np.where(valid_r, sr, np.nan),
        per_pixel_flow=np.where(valid_f, sf, np.nan),
        n_valid=n_valid,
        gradients=grads,
    )


# ── multi-view structure loss ────────────────────────────────────────────────


def multiview_structure(
    depth_source,
    depth_target,
    intrinsics: Intrinsics,
    motion: RigidMotion,
    *,
    want_gradients: bool = True,
):
    """L1 gap between motion-transformed source points and target backprojections.

    Each source pixel's 3-d point is carried into the target camera; the
    target depth map is sampled at its projection and backprojected there.
    Pixels whose projection leaves the image, lands behind the camera, or
    samples a non-positive depth are excluded; all excluded -> error.
    """
    D_s = check_depth_map(depth_source, "depth_source")
    D_t = check_depth_map(depth_target, "depth_target")
    if D_s.shape != D_t.shape:
        raise ValueError(f"depth shapes differ: {D_s.shape} vs {D_t.shape}")
    K = intrinsics
    h, w = D_s.shape
    if (K.height, K.width) != (h, w):
        raise ValueError(f"intrinsics are {K.width}x{K.height}, depths are {w}x{h}")

    U, V = _pixel_grid(h, w)
    width = 10 if want_gradients else 0
    e, t, fx, fy = _motion_params(motion, K, width)
    d_var = Dual.seed(D_s, width, 8) if width else D_s
    u1, v1, x1, y1, z1, front = _rigid_warp(U, V, d_var, K, e, t, fx, fy)
    inb = front & _in_box(value_of(u1), value_of(v1), w, h)

    d_t, smp = _sample_grid(D_t, u1, v1, probe_slot=9 if width else None)
    valid = inb & (value_of(d_t) > 0.0)
    n = int(valid.sum())
    if n == 0:
        raise EmptySupportError("structure loss: no pixel projects into the target view")

    xp = (u1 - K.cx) * d_t / fx
    yp = (v1 - K.cy) * d_t / fy
    gap = abs(xp - x1) + abs(yp - y1) + abs(d_t - z1)
    gv = value_of(gap)
    value = float(np.where(valid, gv, 0.0).sum() / n)

    grads = None
    if want_gradients:
        wgt = np.where(valid, 1.0 / n, 0.0)
        pose = _pose_block_grads(wgt, gap.tan)
        g_dt = np.zeros_like(D_t)
        scatter_bilinear(g_dt, smp, wgt * gap.tan[..., 9])
        grads = {
            "euler": pose[0:3],
            "translation": pose[3:6],
            "focal": pose[6:8],
            "depth_source": wgt * gap.tan[..., 8],
            "depth_target": g_dt,
        }
    return value, grads


# ── epipolar flow-consistency loss ───────────────────────────────────────────


def epipolar_loss(flow, intrinsics: Intrinsics, motion: RigidMotion, *, want_gradients=True):
    """Mean |epipolar residual| of flow correspondences under the motion.

    The residual contracts the flow correspondence against the essential
    matrix built from the unit-normalized translation. Zero translation
    defines the loss (and its subgradient) as exactly zero: the epipolar
    constraint is vacuous without parallax.
    """
    F = check_flow_field(flow)
    K = intrinsics
    h, w = F.shape[:2]
    if (K.height, K.width) != (h, w):
        raise ValueError(f"intrinsics are {K.width}x{K.height}, flow is {w}x{h}")

    t_raw = np.asarray(motion.translation, dtype=np.float64)
    if float(t_raw @ t_raw) == 0.0:
        grads = None
        if want_gradients:
            grads = {
                "euler": np.zeros(3),
                "translation": np.zeros(3),
                "focal": np.zeros(2),
                "flow": np.zeros((h, w, 2)),
            }
        return 0.0, grads

    U, V = _pixel_grid(h, w)
    width = 10 if want_gradients else 0
    e, t, fx, fy = _motion_params(motion, K, width)
    if width:
        Fu = Dual.seed(F[..., 0], width, 8)
        Fv = Dual.seed(F[..., 1], width, 9)
        t_norm = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt()
    else:
        Fu, Fv = F[..., 0], F[..., 1]
        t_norm = math.sqrt(t[0] * t[0] + t[1] * t[1] + t[2] * t[2])
    th = [t[0] / t_norm, t[1] / t_norm, t[2] / t_norm]

    # normalized rays y = K^-1 p (third component 1), target side primed
    y0 = (U - K.cx) / fx
    y1 = (V - K.cy) / fy
    R = rotation_entries(e[0], e[1], e[2])
    m0 = R[0][0] * y0 + R[0][1] * y1 + R[0][2]
    m1 = R[1][0] * y0 + R[1][1] * y1 + R[1][2]
    m2 = R[2][0] * y0 + R[2][1] * y1 + R[2][2]
    # c = t_hat x (R y)
    c0 = th[1] * m2 - th[2] * m1
    c1 = th[2] * m0 - th[0] * m2
    c2 = th[0] * m1 - th[1] * m0
    yp0 = (U + Fu - K.cx) / fx
    yp1 = (V + Fv - K.cy) / fy
    resid = abs(yp0 * c0 + yp1 * c1 + c2)

    n = h * w
    value = float(value_of(resid).sum() / n)
    grads = None
    if want_gradients:
        flat = resid.tan.sum(axis=(0, 1)) / n
        grads = {
            "euler": flat[0:3],
            "translation": flat[3:6],
            "focal": flat[6:8],
            "flow": resid.tan[..., 8:10] / n,
        }
    return value, grads


# ── edge-aware smoothness ────────────────────────────────────────────────────


def smoothness(field, guide, *, want_gradients: bool = True):
    """Edge-weighted total variation of a scalar or multi-channel field.

    Finite differences (central inside, one-sided at borders) of every field
    channel are L1-penalized with weights exp(-|guide gradient|), channel-
    averaged for color guides. The mean runs over pixels and field channels.
    """
    f = as_float_array(field, "field")
    if f.ndim not in (2, 3):
        raise ValueError(f"field must be 2-d or 3-d, got shape {f.shape}")
    g = check_image(guide, "guide")
    if g.shape[:2] != f.shape[:2]:
        raise ValueError(f"guide shape {g.shape} does not match field {f.shape}")
    f3 = f[..., None] if f.ndim == 2 else f

    gu, gv = image_gradient(g)
    if g.ndim == 3:
        wu = np.exp(-np.mean(np.abs(gu), axis=2))
        wv = np.exp(-np.mean(np.abs(gv), axis=2))
    else:
        wu = np.exp(-np.abs(gu))
        wv = np.exp(-np.abs(gv))

    inv_n = 1.0 / f3.size
    acc = 0.0
    grad = np.zeros_like(f3) if want_gradients else None
    for c in range(f3.shape[2]):
        fu, fv = image_gradient(f3[..., c])
        acc += np.sum(np.abs(fu) * wu + np.abs(fv) * wv)
        if want_gradients:
            ru = np.sign(fu) * wu * inv_n
            rv = np.sign(fv) * wv * inv_n
            gc = grad[..., c]
            # adjoint of the central/one-sided difference stencils
            gc[:, 2:] += ru[:, 1:-1] / 2.0
            gc[:, :-2] -= ru[:, 1:-1] / 2.0
            gc[:, 1] += ru[:, 0]
            gc[:, 0] -= ru[:, 0]
            gc[:, -1] += ru[:, -1]
            gc[:, -2] -= ru[:, -1]
            gc[2:, :] += rv[1:-1, :] / 2.0
            gc[:-2, :] -= rv[1:-1, :] / 2.0
            gc[1, :] += rv[0, :]
            gc[0, :] -= rv[0, :]
            gc[-1, :] += rv[-1, :]
            gc[-2, :] -= rv[-1, :]

    value = float(acc / f3.size)
    grads = None
    if want_gradients:
        grads = {"field": grad[..., 0] if f.ndim == 2 else grad}
    return value, grads


# ── forward/backward flow consistency ────────────────────────────────────────


def forward_backward_flow(flow_fwd, flow_bwd, *, want_gradients: bool = True):
    """Mean L1 cycle error |F(p) + B(p + F(p))| over in-bounds correspondences.

    Pixels whose forward displacement leaves the image are skipped; with no
    surviving pixel the loss is defined as zero (no error is raised: a fully
    out-of-frame flow is a legitimate transient during optimization).
    """
    F = check_flow_field(flow_fwd, "flow_fwd")
    B = check_flow_field(flow_bwd, "flow_bwd")
    if F.shape != B.shape:
        raise ValueError(f"flow shapes differ: {F.shape} vs {B.shape}")
    h, w = F.shape[:2]
    U, V = _pixel_grid(h, w)

    width = 4 if want_gradients else 0
    if width:
        Fu = Dual.seed(F[..., 0], width, 0)
        Fv = Dual.seed(F[..., 1], width, 1)
    else:
        Fu, Fv = F[..., 0], F[..., 1]
    qu = U + Fu
    qv = V + Fv
    valid = _in_box(value_of(qu), value_of(qv), w, h)
    n = int(valid.sum())

    def _zero_grads():
        return {"flow_fwd": np.zeros((h, w, 2)), "flow_bwd": np.zeros((h, w, 2))}

    if n == 0:
        return 0.0, (_zero_grads() if want_gradients else None)

    smp = vec_bilinear(B, value_of(qu), value_of(qv))
    if width:
        tan_u = Fu.tan * smp.d_du[..., 0][..., None] + Fv.tan * smp.d_dv[..., 0][..., None]
        tan_u[..., 2] += 1.0
        Bu = Dual(smp.value[..., 0], tan_u)
        tan_v = Fu.tan * smp.d_du[..., 1][..., None] + Fv.tan * smp.d_dv[..., 1][..., None]
        tan_v[..., 3] += 1.0
        Bv = Dual(smp.value[..., 1], tan_v)
    else:
        Bu, Bv = smp.value[..., 0], smp.value[..., 1]

    per = abs(Fu + Bu) + abs(Fv + Bv)
    value = float(np.where(valid, value_of(per), 0.0).sum() / n)

    grads = None
    if want_gradients:
        wgt = np.where(valid, 1.0 / n, 0.0)
        grads = _zero_grads()
        grads["flow_fwd"][...] = wgt[..., None] * per.tan[..., 0:2]
        scatter_bilinear(grads["flow_bwd"][..., 0], smp, wgt * per.tan[..., 2])
        scatter_bilinear(grads["flow_bwd"][..., 1], smp, wgt * per.tan[..., 3])
    return value, grads


# ── weighted composition over a snippet ──────────────────────────────────────


def total_loss(
    state: OutputState,
    frames,
    weights: LossWeights = LossWeights(),
    *,
    threads: int = 1,
    want_gradients: bool = True,
) -> LossReport:
    """Weighted sum of all loss components over every adjacent frame pair.

    Per pair k: photometric + structure + epipolar on the forward motion and
    flow, cycle consistency in both flow orders, smoothness of both flow
    fields against their own frames. Per frame: smoothness of inverse depth
    against the frame. Components are summed over their instances
    unweighted in per_component; total and gradients carry the weights.

    threads > 1 evaluates pairs concurrently; results are combined in a
    fixed order so the outcome is bit-identical for any thread count.
    """
    if not isinstance(state, OutputState):
        raise TypeError(f"state must be an OutputState, got {type(state).__name__}")
    if not isinstance(weights, LossWeights):
        raise TypeError(f"weights must be LossWeights, got {type(weights).__name__}")
    frames = [check_image(fr, f"frame[{i}]") for i, fr in enumerate(frames)]
    state.check_frames(frames)
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")

    K = state.intrinsics
    n_pairs = state.n_pairs
    n_frames = state.n_frames
    wg = want_gradients

    def pair_task(k: int) -> dict:
        out = {}
        if weights.w_apc > 0.0:
            out["apc"] = adaptive_photometric(
                frames[k], frames[k + 1], state.depths[k], K,
                state.motions[k], state.flows_fwd[k], want_gradients=wg,
            )
        if weights.w_mvs > 0.0:
            out["mvs"] = multiview_structure(
                state.depths[k], state.depths[k + 1], K, state.motions[k], want_gradients=wg
            )
        if weights.w_e > 0.0:
            out["epipolar"] = epipolar_loss(
                state.flows_fwd[k], K, state.motions[k], want_gradients=wg
            )
        if weights.w_fb > 0.0:
            out["fb"] = (
                forward_backward_flow(state.flows_fwd[k], state.flows_bwd[k], want_gradients=wg),
                forward_backward_flow(state.flows_bwd[k], state.flows_fwd[k], want_gradients=wg),
            )
        if weights.w_smooth_flow > 0.0:
            out["smooth_flow"] = (
                smoothness(state.flows_fwd[k], frames[k], want_gradients=wg),
                smoothness(state.flows_bwd[k], frames[k + 1], want_gradients=wg),
            )
        return out

    def depth_task(f: int):
        if weights.w_smooth_depth == 0.0:
            return None
        return smoothness(1.0 / state.depths[f], frames[f], want_gradients=wg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pair_results = list(pool.map(pair_task, range(n_pairs)))
            depth_results = list(pool.map(depth_task, range(n_frames)))
    else:
        pair_results = [pair_task(k) for k in range(n_pairs)]
        depth_results = [depth_task(f) for f in range(n_frames)]

    pc = {"apc": 0.0, "mvs": 0.0, "epipolar": 0.0, "smooth_depth": 0.0,
          "smooth_flow": 0.0, "fb": 0.0}
    grads = None
    if wg:
        hw = (K.height, K.width)
        grads = {
            "depths": [np.zeros(hw) for _ in range(n_frames)],
            "euler": [np.zeros(3) for _ in range(n_pairs)],
            "translation": [np.zeros(3) for _ in range(n_pairs)],
            "focal": np.zeros(2),
            "flows_fwd": [np.zeros(hw + (2,)) for _ in range(n_pairs)],
            "flows_bwd": [np.zeros(hw + (2,)) for _ in range(n_pairs)],
        }

    def add_pose(g: dict, k: int, w: float):
        grads["euler"][k] += w * g["euler"]
        grads["translation"][k] += w * g["translation"]
        grads["focal"] += w * g["focal"]

    photometric = []
    for k, res in enumerate(pair_results):
        if "apc" in res:
            apc = res["apc"]
            photometric.append(apc)
            pc["apc"] += apc.value
            if wg:
                add_pose(apc.gradients, k, weights.w_apc)
                grads["depths"][k] += weights.w_apc * apc.gradients["depth"]
                grads["flows_fwd"][k] += weights.w_apc * apc.gradients["flow"]
        if "mvs" in res:
            value, g = res["mvs"]
            pc["mvs"] += value
            if wg:
                add_pose(g, k, weights.w_mvs)
                grads["depths"][k] += weights.w_mvs * g["depth_source"]
                grads["depths"][k + 1] += weights.w_mvs * g["depth_target"]
        if "epipolar" in res:
            value, g = res["epipolar"]
            pc["epipolar"] += value
            if wg:
                add_pose(g, k, weights.w_e)
                grads["flows_fwd"][k] += weights.w_e * g["flow"]
        if "fb" in res:
            (v_fwd, g_fwd), (v_bwd, g_bwd) = res["fb"]
            pc["fb"] += v_fwd + v_bwd
            if wg:
                grads["flows_fwd"][k] += weights.w_fb * g_fwd["flow_fwd"]
                grads["flows_bwd"][k] += weights.w_fb * g_fwd["flow_bwd"]
                grads["flows_bwd"][k] += weights.w_fb * g_bwd["flow_fwd"]
                grads["flows_fwd"][k] += weights.w_fb * g_bwd["flow_bwd"]
        if "smooth_flow" in res:
            (v_f, g_f), (v_b, g_b) = res["smooth_flow"]
            pc["smooth_flow"] += v_f + v_b
            if wg:
                grads["flows_fwd"][k] += weights.w_smooth_flow * g_f["field"]
                grads["flows_bwd"][k] += weights.w_smooth_flow * g_b["field"]

    for f, res in enumerate(depth_results):
        if res is None:
            continue
        value, g = res
        pc["smooth_depth"] += value
        if wg:
            # chain through u = 1/D: dL/dD = -dL/du / D^2
            D = state.depths[f]
            grads["depths"][f] += weights.w_smooth_depth * (-g["field"] / (D * D))

    total = (
        weights.w_apc * pc["apc"]
        + weights.w_mvs * pc["mvs"]
        + weights.w_e * pc["epipolar"]
        + weights.w_smooth_depth * pc["smooth_depth"]
        + weights.w_smooth_flow * pc["smooth_flow"]
        + weights.w_fb * pc["fb"]
    )
    return LossReport(
        total=float(total),
        per_component=pc,
        gradients=grads,
        photometric=tuple(photometric),
    )
