"""Shared argument checks and the package exception taxonomy.

Exit-code mapping used by the command line tool:
  usage errors        -> 2 (argparse default)
  FormatError         -> 3
  NumericalError      -> 4
"""

from __future__ import annotations

import numpy as np


class FormatError(ValueError):
    """A file does not conform to its on-disk format contract.

    byte_offset, when known, is the position of the first offending byte.
    """

    def __init__(self, message: str, *, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class EmptySupportError(ValueError):
    """A masked reduction was asked to average over zero valid elements."""


class BehindCameraError(ValueError):
    """A point with z <= 0 was passed to a projection."""


class NumericalError(ArithmeticError):
    """Non-finite values or a numerically invalid state during refinement."""


class InvalidPriorError(NumericalError):
    """A prior state violates its domain (non-positive depth, bad shapes)."""


def as_float_array(x, name: str, shape=None) -> np.ndarray:
    """Coerce to a float64 ndarray and optionally pin an exact shape."""
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name}: expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_image(img, name: str = "image") -> np.ndarray:
    """Validate an intensity image: (H, W) or (H, W, 3), finite, in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ValueError(f"{name}: expected (H, W) or (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ValueError(f"{name}: needs at least 2x2 pixels, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name}: intensities must lie in [0, 1]")
    return arr


def check_depth_map(depth, name: str = "depth") -> np.ndarray:
    """Validate a depth map: (H, W), finite, strictly positive."""
    arr = np.asarray(depth, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected (H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() <= 0.0:
        raise InvalidPriorError(f"{name}: depth must be strictly positive")
    return arr


def check_flow_field(flow, name: str = "flow") -> np.ndarray:
    """Validate a flow field: (H, W, 2), finite."""
    arr = np.asarray(flow, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"{name}: expected (H, W, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr
