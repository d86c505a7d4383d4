"""Pinhole camera model, rigid motion, and the epipolar residual.

Conventions used throughout the package:
  - A motion maps source-camera coordinates to target-camera coordinates,
    x' = R x + t.
  - Rotations are parameterized by three Euler angles applied intrinsically
    in Z-Y-X order: R = Rz(ez) @ Ry(ey) @ Rx(ex).
  - The principal point is always the image center (width/2, height/2).
  - The translation inside the essential matrix is unit-normalized; raw t is
    used for reprojection.

All functions are pure and operate on immutable value objects, so they are
safe to call from concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .validation import BehindCameraError


class PixelCoord(NamedTuple):
    u: float
    v: float


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics with the principal point fixed at the image center."""

    fx: float
    fy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"image must be at least 2x2, got {self.width}x{self.height}")

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def _frozen_vec3(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RigidMotion:
    """SE(3) motion stored as Euler angles (radians) plus translation (meters)."""

    euler: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "euler", _frozen_vec3(self.euler, "euler"))
        object.__setattr__(self, "translation", _frozen_vec3(self.translation, "translation"))

    @staticmethod
    def identity() -> "RigidMotion":
        return RigidMotion(euler=np.zeros(3), translation=np.zeros(3))

    def rotation(self) -> np.ndarray:
        return euler_to_matrix(self.euler)


def rotation_entries(ex, ey, ez):
    """3x3 rotation as a nested list of scalar expressions, R = Rz @ Ry @ Rx.

    Written against a generic math interface so the same code serves plain
    floats and forward-mode dual numbers.
    """
    if isinstance(ex, (int, float)):
        sx, cx = math.sin(ex), math.cos(ex)
        sy, cy = math.sin(ey), math.cos(ey)
        sz, cz = math.sin(ez), math.cos(ez)
    else:
        sx, cx = ex.sin(), ex.cos()
        sy, cy = ey.sin(), ey.cos()
        sz, cz = ez.sin(), ez.cos()
    return [
        [cz * cy, cz * sy * sx - sz * cx, sz * sx + cz * sy * cx],
        [sz * cy, cz * cx + sz * sy * sx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]


def euler_to_matrix(euler) -> np.ndarray:
    ex, ey, ez = (float(a) for a in np.asarray(euler, dtype=np.float64).reshape(3))
    return np.array(rotation_entries(ex, ey, ez))


def matrix_to_euler(R) -> np.ndarray:
    """Inverse of euler_to_matrix; at the pitch singularity roll is set to 0."""
    R = np.asarray(R, dtype=np.float64)
    sy = -R[2, 0]
    if abs(sy) < 1.0 - 1e-12:
        ey = math.asin(sy)
        ex = math.atan2(R[2, 1], R[2, 2])
        ez = math.atan2(R[1, 0], R[0, 0])
    else:
        # gimbal lock: only ez +/- ex is observable, conventionally put it all in ez
        ey = math.copysign(math.pi / 2.0, sy)
        ex = 0.0
        ez = math.atan2(-R[0, 1], R[1, 1])
    return np.array([ex, ey, ez])


def inverse(m: RigidMotion) -> RigidMotion:
    R = m.rotation()
    return RigidMotion(euler=matrix_to_euler(R.T), translation=-(R.T @ m.translation))


def compose(a: RigidMotion, b: RigidMotion) -> RigidMotion:
    """Motion equivalent to applying b first, then a."""
    Ra, Rb = a.rotation(), b.rotation()
    return RigidMotion(
        euler=matrix_to_euler(Ra @ Rb),
        translation=Ra @ b.translation + a.translation,
    )


def backproject(p: PixelCoord, d: float, K: Intrinsics) -> Point3:
    """Lift pixel p at depth d to camera coordinates, d * K^-1 * (u, v, 1).

    p may lie outside the image bounds; only the depth sign is checked.
    """
    if not d > 0:
        raise ValueError(f"depth must be positive, got {d}")
    return Point3((p.u - K.cx) * d / K.fx, (p.v - K.cy) * d / K.fy, d)


def project(x: Point3, K: Intrinsics) -> PixelCoord:
    if not x.z > 0:
        raise BehindCameraError(f"cannot project point with z={x.z}")
    return PixelCoord(K.fx * x.x / x.z + K.cx, K.fy * x.y / x.z + K.cy)


def transform(m: RigidMotion, x: Point3) -> Point3:
    y = m.rotation() @ np.array([x.x, x.y, x.z]) + m.translation
    return Point3(y[0], y[1], y[2])


def rigid_reproject(p: PixelCoord, d: float, K: Intrinsics, m: RigidMotion) -> PixelCoord:
    """Where pixel p at depth d lands in the target view under motion m."""
    return project(transform(m, backproject(p, d, K)), K)


def skew(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(3)
    return np.array(
        [
            [0.0, -t[2], t[1]],
            [t[2], 0.0, -t[0]],
            [-t[1], t[0], 0.0],
        ]
    )


def essential_matrix(m: RigidMotion) -> np.ndarray:
    """E = [t/|t|]x R; the zero matrix when |t| = 0 (pure rotation)."""
    norm = float(np.linalg.norm(m.translation))
    if norm == 0.0:
        return np.zeros((3, 3))
    return skew(m.translation / norm) @ m.rotation()


def epipolar_residual(p: PixelCoord, p_prime: PixelCoord, K: Intrinsics, m: RigidMotion) -> float:
    """Signed algebraic epipolar residual of a correspondence (p -> p_prime).

    Evaluates y'^T [t/|t|]x R y with y = K^-1 (u, v, 1). Exact rigid
    correspondences under x' = R x + t lie on the zero set; |t| = 0 yields 0
    for every input pair (degenerate but well defined).
    """
    E = essential_matrix(m)
    y = np.array([(p.u - K.cx) / K.fx, (p.v - K.cy) / K.fy, 1.0])
    yp = np.array([(p_prime.u - K.cx) / K.fx, (p_prime.v - K.cy) / K.fy, 1.0])
    return float(yp @ E @ y)
