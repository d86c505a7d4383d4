"""Differentiable bilinear sampling, SSIM, window similarity, image gradients.

Images are float64 arrays shaped (H, W) or (H, W, 3) with intensities in
[0, 1]. Sample coordinates are valid on the closed box
[0, W-1] x [0, H-1]; outside, samples are masked (value and derivatives 0,
valid False) rather than clamped, so invalid pixels can be excluded from
loss sums instead of contributing flat plateaus.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import PixelCoord

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
DEFAULT_TRADEOFF = 0.85


class SampleResult(NamedTuple):
    value: object  # float for grayscale, (C,) array for color
    d_du: object
    d_dv: object
    valid: bool


@dataclass(frozen=True)
class VecSample:
    """Vectorized sampling result plus the cell data needed for adjoints.

    The four interpolation corners of sample i are (iy0, ix0) .. (iy0+1,
    ix0+1) with weights built from the in-cell fractions (fu, fv); ix0/iy0
    are pre-clamped so the +1 neighbors always exist.
    """

    value: np.ndarray
    d_du: np.ndarray
    d_dv: np.ndarray
    valid: np.ndarray
    ix0: np.ndarray
    iy0: np.ndarray
    fu: np.ndarray
    fv: np.ndarray


def vec_bilinear(img: np.ndarray, U, V) -> VecSample:
    """Bilinear interpolation of img at real coordinates (U, V), any shape."""
    img = np.asarray(img, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    H, W = img.shape[:2]
    multi = img.ndim == 3

    valid = (U >= 0.0) & (U <= W - 1.0) & (V >= 0.0) & (V <= H - 1.0)
    Uc = np.clip(U, 0.0, W - 1.0)
    Vc = np.clip(V, 0.0, H - 1.0)
    # clamp the cell so u = W-1 uses the last cell with fraction 1
    ix0 = np.minimum(np.floor(Uc), W - 2.0).astype(np.intp)
    iy0 = np.minimum(np.floor(Vc), H - 2.0).astype(np.intp)
    fu = Uc - ix0
    fv = Vc - iy0

    p00 = img[iy0, ix0]
    p01 = img[iy0, ix0 + 1]
    p10 = img[iy0 + 1, ix0]
    p11 = img[iy0 + 1, ix0 + 1]

    if multi:
        fu_ = fu[..., None]
        fv_ = fv[..., None]
        mask = valid[..., None]
    else:
        fu_, fv_, mask = fu, fv, valid

    top = p00 + fu_ * (p01 - p00)
    bot = p10 + fu_ * (p11 - p10)
    value = top + fv_ * (bot - top)
    d_du = (p01 - p00) + fv_ * ((p11 - p10) - (p01 - p00))
    d_dv = bot - top

    zero = 0.0
    value = np.where(mask, value, zero)
    d_du = np.where(mask, d_du, zero)
    d_dv = np.where(mask, d_dv, zero)
    return VecSample(value=value, d_du=d_du, d_dv=d_dv, valid=valid, ix0=ix0, iy0=iy0, fu=fu, fv=fv)


def scatter_bilinear(out: np.ndarray, sample: VecSample, coeff: np.ndarray) -> None:
    """Accumulate coeff through the interpolation weights into the sampled grid.

    Adjoint of `value = sum_k w_k * grid[corner_k]`: out[corner_k] += w_k * coeff.
    coeff must already be zero at invalid samples.
    """
    fu, fv = sample.fu, sample.fv
    ix0, iy0 = sample.ix0, sample.iy0
    np.add.at(out, (iy0, ix0), (1.0 - fu) * (1.0 - fv) * coeff)
    np.add.at(out, (iy0, ix0 + 1), fu * (1.0 - fv) * coeff)
    np.add.at(out, (iy0 + 1, ix0), (1.0 - fu) * fv * coeff)
    np.add.at(out, (iy0 + 1, ix0 + 1), fu * fv * coeff)


def bilinear_sample(img: np.ndarray, p: PixelCoord) -> SampleResult:
    """Sample one point; see vec_bilinear for the interpolation contract."""
    res = vec_bilinear(img, np.float64(p.u), np.float64(p.v))
    multi = np.asarray(img).ndim == 3
    if multi:
        return SampleResult(res.value, res.d_du, res.d_dv, bool(res.valid))
    return SampleResult(float(res.value), float(res.d_du), float(res.d_dv), bool(res.valid))


def _ssim_2d(a: np.ndarray, b: np.ndarray) -> float:
    mu_a = a.mean()
    mu_b = b.mean()
    var_a = (a * a).mean() - mu_a * mu_a
    var_b = (b * b).mean() - mu_b * mu_b
    cov = (a * b).mean() - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """SSIM of two equally shaped windows; color windows average per channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"window shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([_ssim_2d(a[:, :, c], b[:, :, c]) for c in range(a.shape[2])]))
    return float(_ssim_2d(a, b))


def similarity(a, b, r: float = DEFAULT_TRADEOFF) -> float:
    """Window dissimilarity r*(1 - ssim)/2 + (1-r)*mean|a - b|; 0 iff identical windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"window shapes differ: {a.shape} vs {b.shape}")
    return float(r * (1.0 - ssim(a, b)) / 2.0 + (1.0 - r) * np.mean(np.abs(a - b)))


def image_gradient(img) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (d/du, d/dv): central differences inside, one-sided at borders."""
    img = np.asarray(img, dtype=np.float64)
    gu = np.empty_like(img)
    gu[:, 1:-1] = (img[:, 2:] - img[:, :-2]) / 2.0
    gu[:, 0] = img[:, 1] - img[:, 0]
    gu[:, -1] = img[:, -1] - img[:, -2]
    gv = np.empty_like(img)
    gv[1:-1, :] = (img[2:, :] - img[:-2, :]) / 2.0
    gv[0, :] = img[1, :] - img[0, :]
    gv[-1, :] = img[-1, :] - img[-2, :]
    return gu, gv
