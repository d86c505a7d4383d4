"""Containers for the refinable output variables of a frame snippet.

A snippet of n frames carries n depth maps, n-1 relative motions (frame k to
frame k+1), one forward and one backward flow field per adjacent pair, and a
single shared set of intrinsics. The 2-frame case is the smallest instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, RigidMotion
from .validation import InvalidPriorError


def _frozen(arr, name: str) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise InvalidPriorError(f"{name}: contains non-finite values")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class OutputState:
    """Depth, motion, intrinsics, and flow for one snippet, natural domain.

    Refinement parameterizes depth and focal lengths logarithmically to keep
    them positive; this container always holds the plain quantities.
    """

    depths: tuple
    motions: tuple
    intrinsics: Intrinsics
    flows_fwd: tuple
    flows_bwd: tuple

    def __post_init__(self):
        depths = tuple(_frozen(d, f"depth[{i}]") for i, d in enumerate(self.depths))
        flows_f = tuple(_frozen(f, f"flow_fwd[{i}]") for i, f in enumerate(self.flows_fwd))
        flows_b = tuple(_frozen(f, f"flow_bwd[{i}]") for i, f in enumerate(self.flows_bwd))
        object.__setattr__(self, "depths", depths)
        object.__setattr__(self, "flows_fwd", flows_f)
        object.__setattr__(self, "flows_bwd", flows_b)
        object.__setattr__(self, "motions", tuple(self.motions))

        n = len(self.depths)
        if n < 2:
            raise InvalidPriorError("state needs at least 2 frames")
        n_pairs = n - 1
        if not (len(self.motions) == len(self.flows_fwd) == len(self.flows_bwd) == n_pairs):
            raise InvalidPriorError(
                f"inconsistent snippet: {n} depths, {len(self.motions)} motions, "
                f"{len(self.flows_fwd)}/{len(self.flows_bwd)} flows"
            )
        shape = (self.intrinsics.height, self.intrinsics.width)
        for i, d in enumerate(self.depths):
            if d.shape != shape:
                raise InvalidPriorError(f"depth[{i}] shape {d.shape} != {shape}")
            if d.min() <= 0.0:
                raise InvalidPriorError(f"depth[{i}] must be strictly positive")
        for name, flows in (("flow_fwd", self.flows_fwd), ("flow_bwd", self.flows_bwd)):
            for i, f in enumerate(flows):
                if f.shape != shape + (2,):
                    raise InvalidPriorError(f"{name}[{i}] shape {f.shape} != {shape + (2,)}")
        for i, m in enumerate(self.motions):
            if not isinstance(m, RigidMotion):
                raise InvalidPriorError(f"motion[{i}] is not a RigidMotion")

    @property
    def n_frames(self) -> int:
        return len(self.depths)

    @property
    def n_pairs(self) -> int:
        return len(self.motions)

    def check_frames(self, frames) -> None:
        if len(frames) != self.n_frames:
            raise ValueError(f"state has {self.n_frames} frames, got {len(frames)} images")
        shape = (self.intrinsics.height, self.intrinsics.width)
        for i, img in enumerate(frames):
            if np.asarray(img).shape[:2] != shape:
                raise ValueError(f"frame[{i}] shape {np.asarray(img).shape} != {shape}")


@dataclass(frozen=True)
class ProxWeights:
    """Per-block proximal weights for the squared-L2 anchor penalty.

    Depth and flow are dense and weakly constrained per pixel, so they get a
    nonzero default; pose and intrinsics are few scalars constrained by every
    pixel and default to free.
    """

    depth: float = 1e-2
    rotation: float = 0.0
    translation: float = 0.0
    intrinsics: float = 0.0
    flow: float = 1e-2

    def __post_init__(self):
        for name in ("depth", "rotation", "translation", "intrinsics", "flow"):
            if getattr(self, name) < 0:
                raise ValueError(f"proximal weight {name} must be >= 0")


@dataclass(frozen=True)
class ProximalPrior:
    """Anchor state plus the per-block weights pulling the refinement to it."""

    anchor: OutputState
    weights: ProxWeights = field(default_factory=ProxWeights)
