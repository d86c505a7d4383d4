"""Analytic scene rendering with exact ground truth.

Scenes are textured rectangles (free-standing planes and box faces) imaged
by a pinhole camera that moves one rigid step per frame. Textures are
band-limited sums of sinusoids attached to surface coordinates, so the
rendered pair is photometrically consistent by construction: the same
surface point produces the same value in every frame, with no resampling
anywhere in the pipeline.

Ground-truth flow comes from transforming the ray-cast hit point with the
relative rigid motion of the pixel's surface and reprojecting. The
arithmetic mirrors the scalar ops in :mod:`densba.geometry` term by term,
so on scenes whose quantities are dyadic rationals (power-of-two focal
lengths, eighths for depths and translations) the rendered flow, depth,
and image shift are exact in floating point, not merely close.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, RigidMotion, compose, inverse
from .state import OutputState

_TWO_PI = 2.0 * math.pi
_MISS_DEPTH = 100.0
_MISS_VALUE = 0.5
_OCCLUSION_SLACK = 1e-6


def _finite_scalar(v, name):
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"{name} must be finite, got {v}")
    return v


def _vec3(v, name):
    t = tuple(float(x) for x in v)
    if len(t) != 3 or not all(math.isfinite(x) for x in t):
        raise ValueError(f"{name} must be 3 finite numbers, got {v!r}")
    return t


@dataclass(frozen=True)
class Wave:
    """One sinusoidal texture component over surface coordinates.

    value = amplitude * taper(alpha) * taper(beta)
            * sin(2*pi*(freq_a*alpha + freq_b*beta) + phase)

    A taper is a pair (flat_until, zero_from): the wave keeps full strength
    for coordinates up to flat_until in magnitude, fades with a smoothstep,
    and is exactly zero beyond zero_from. Tapered borders make the texture
    locally constant there, which keeps window losses exact when replicate
    padding pairs up taps from slightly different surface points.
    """

    amplitude: float
    freq_a: float
    freq_b: float
    phase: float = 0.0
    taper_a: tuple | None = None
    taper_b: tuple | None = None

    def __post_init__(self):
        amp = _finite_scalar(self.amplitude, "amplitude")
        if amp < 0.0:
            raise ValueError(f"amplitude must be >= 0, got {amp}")
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "freq_a", _finite_scalar(self.freq_a, "freq_a"))
        object.__setattr__(self, "freq_b", _finite_scalar(self.freq_b, "freq_b"))
        object.__setattr__(self, "phase", _finite_scalar(self.phase, "phase"))
        for field in ("taper_a", "taper_b"):
            taper = getattr(self, field)
            if taper is None:
                continue
            a0, a1 = (float(x) for x in taper)
            if not (0.0 <= a0 < a1 and math.isfinite(a1)):
                raise ValueError(f"{field} must satisfy 0 <= flat_until < zero_from, got {taper}")
            object.__setattr__(self, field, (a0, a1))


def _taper_weight(coord, taper):
    if taper is None:
        return 1.0
    a0, a1 = taper
    s = np.clip((a1 - np.abs(coord)) / (a1 - a0), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


@dataclass(frozen=True)
class Texture:
    """Band-limited analytic texture: base level plus sinusoidal waves.

    The amplitude budget keeps values inside [0, 1] for any coordinates.
    """

    base: float
    waves: tuple = ()

    def __post_init__(self):
        base = _finite_scalar(self.base, "base")
        if not 0.0 <= base <= 1.0:
            raise ValueError(f"base must be in [0, 1], got {base}")
        waves = tuple(self.waves)
        for w in waves:
            if not isinstance(w, Wave):
                raise TypeError(f"waves must be Wave instances, got {type(w).__name__}")
        budget = sum(w.amplitude for w in waves)
        if budget > min(base, 1.0 - base):
            raise ValueError(
                f"amplitude sum {budget} exceeds the head-room of base {base}; "
                "values would leave [0, 1]"
            )
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "waves", waves)

    def value(self, alpha, beta):
        """Evaluate the texture at surface coordinates (alpha, beta)."""
        alpha = np.asarray(alpha, dtype=np.float64)
        beta = np.asarray(beta, dtype=np.float64)
        out = np.full(np.broadcast(alpha, beta).shape, self.base)
        for w in self.waves:
            weight = _taper_weight(alpha, w.taper_a) * _taper_weight(beta, w.taper_b)
            arg = _TWO_PI * (w.freq_a * alpha + w.freq_b * beta) + w.phase
            out = out + (w.amplitude * weight) * np.sin(arg)
        return out

    def to_dict(self):
        return {
            "base": self.base,
            "waves": [
                {
                    "amplitude": w.amplitude,
                    "freq_a": w.freq_a,
                    "freq_b": w.freq_b,
                    "phase": w.phase,
                    "taper_a": list(w.taper_a) if w.taper_a else None,
                    "taper_b": list(w.taper_b) if w.taper_b else None,
                }
                for w in self.waves
            ],
        }

    @classmethod
    def from_dict(cls, d):
        waves = tuple(
            Wave(
                amplitude=w["amplitude"],
                freq_a=w["freq_a"],
                freq_b=w["freq_b"],
                phase=w.get("phase", 0.0),
                taper_a=tuple(w["taper_a"]) if w.get("taper_a") else None,
                taper_b=tuple(w["taper_b"]) if w.get("taper_b") else None,
            )
            for w in d.get("waves", ())
        )
        return cls(base=d["base"], waves=waves)


@dataclass(frozen=True)
class Plane:
    """Textured rectangle: anchor point, plane normal, two extent axes.

    Surface coordinates are alpha = axis_a . (hit - point) and
    beta = axis_b . (hit - point); the rectangle covers |alpha| <= half_a,
    |beta| <= half_b. Axes need not be unit length; extents are measured
    in the induced dot-product units.
    """

    point: tuple
    normal: tuple
    axis_a: tuple
    axis_b: tuple
    half_a: float
    half_b: float
    texture: Texture

    def __post_init__(self):
        object.__setattr__(self, "point", _vec3(self.point, "point"))
        for name in ("normal", "axis_a", "axis_b"):
            v = _vec3(getattr(self, name), name)
            if v == (0.0, 0.0, 0.0):
                raise ValueError(f"{name} must be non-zero")
            object.__setattr__(self, name, v)
        for name in ("half_a", "half_b"):
            h = _finite_scalar(getattr(self, name), name)
            if h <= 0.0:
                raise ValueError(f"{name} must be positive, got {h}")
            object.__setattr__(self, name, h)
        if not isinstance(self.texture, Texture):
            raise TypeError("texture must be a Texture")

    def to_dict(self):
        return {
            "point": list(self.point),
            "normal": list(self.normal),
            "axis_a": list(self.axis_a),
            "axis_b": list(self.axis_b),
            "half_a": self.half_a,
            "half_b": self.half_b,
            "texture": self.texture.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            point=tuple(d["point"]),
            normal=tuple(d["normal"]),
            axis_a=tuple(d["axis_a"]),
            axis_b=tuple(d["axis_b"]),
            half_a=d["half_a"],
            half_b=d["half_b"],
            texture=Texture.from_dict(d["texture"]),
        )


@dataclass(frozen=True)
class Box:
    """Axis-aligned textured box that moves rigidly between frames.

    `motion` is applied once per frame step in world coordinates (the
    camera frame of the first image). Faces are enumerated in the fixed
    order -z, +z, -x, +x, -y, +y for ownership bookkeeping.
    """

    center: tuple
    half_extents: tuple
    texture: Texture
    motion: RigidMotion = dataclasses.field(default_factory=RigidMotion.identity)

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center, "center"))
        he = _vec3(self.half_extents, "half_extents")
        if min(he) <= 0.0:
            raise ValueError(f"half_extents must be positive, got {he}")
        object.__setattr__(self, "half_extents", he)
        if not isinstance(self.texture, Texture):
            raise TypeError("texture must be a Texture")
        if not isinstance(self.motion, RigidMotion):
            raise TypeError("motion must be a RigidMotion")

    def faces(self):
        cx, cy, cz = self.center
        hx, hy, hz = self.half_extents
        return (
            ((cx, cy, cz - hz), (0.0, 0.0, -1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), hx, hy),
            ((cx, cy, cz + hz), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), hx, hy),
            ((cx - hx, cy, cz), (-1.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), hz, hy),
            ((cx + hx, cy, cz), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), hz, hy),
            ((cx, cy - hy, cz), (0.0, -1.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), hx, hz),
            ((cx, cy + hy, cz), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), hx, hz),
        )

    def to_dict(self):
        return {
            "center": list(self.center),
            "half_extents": list(self.half_extents),
            "texture": self.texture.to_dict(),
            "motion": _motion_to_dict(self.motion),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            center=tuple(d["center"]),
            half_extents=tuple(d["half_extents"]),
            texture=Texture.from_dict(d["texture"]),
            motion=_motion_from_dict(d["motion"]),
        )


def _motion_to_dict(m: RigidMotion):
    return {"euler": [float(x) for x in m.euler], "translation": [float(x) for x in m.translation]}


def _motion_from_dict(d) -> RigidMotion:
    return RigidMotion(euler=tuple(d["euler"]), translation=tuple(d["translation"]))


@dataclass(frozen=True)
class SceneSpec:
    """Complete description of a synthetic snippet's world and camera."""

    width: int
    height: int
    fx: float
    fy: float
    ego: RigidMotion
    planes: tuple = ()
    boxes: tuple = ()
    z_min: float = 0.05

    def __post_init__(self):
        if int(self.width) < 2 or int(self.height) < 2:
            raise ValueError(f"image must be at least 2x2, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        for name in ("fx", "fy"):
            f = _finite_scalar(getattr(self, name), name)
            if f <= 0.0:
                raise ValueError(f"{name} must be positive, got {f}")
            object.__setattr__(self, name, f)
        z_min = _finite_scalar(self.z_min, "z_min")
        if z_min <= 0.0:
            raise ValueError(f"z_min must be positive, got {z_min}")
        object.__setattr__(self, "z_min", z_min)
        if not isinstance(self.ego, RigidMotion):
            raise TypeError("ego must be a RigidMotion")
        planes = tuple(self.planes)
        boxes = tuple(self.boxes)
        if not all(isinstance(p, Plane) for p in planes):
            raise TypeError("planes must be Plane instances")
        if not all(isinstance(b, Box) for b in boxes):
            raise TypeError("boxes must be Box instances")
        if not planes and not boxes:
            raise ValueError("scene needs at least one plane or box")
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "boxes", boxes)

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(fx=self.fx, fy=self.fy, width=self.width, height=self.height)

    def to_dict(self):
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "z_min": self.z_min,
            "ego": _motion_to_dict(self.ego),
            "planes": [p.to_dict() for p in self.planes],
            "boxes": [b.to_dict() for b in self.boxes],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            width=d["width"],
            height=d["height"],
            fx=d["fx"],
            fy=d["fy"],
            ego=_motion_from_dict(d["ego"]),
            planes=tuple(Plane.from_dict(p) for p in d.get("planes", ())),
            boxes=tuple(Box.from_dict(b) for b in d.get("boxes", ())),
            z_min=d.get("z_min", 0.05),
        )


# internal per-frame rectangle: geometry in the camera frame of one image
@dataclass
class _CamRect:
    q: tuple
    n: tuple
    e1: tuple
    e2: tuple
    half_a: float
    half_b: float
    texture: Texture
    is_object: bool


def _transform_point(m: RigidMotion, p):
    v = m.rotation() @ np.asarray(p, dtype=np.float64) + m.translation
    return (float(v[0]), float(v[1]), float(v[2]))


def _rotate_dir(m: RigidMotion, d):
    v = m.rotation() @ np.asarray(d, dtype=np.float64)
    return (float(v[0]), float(v[1]), float(v[2]))


def _world_rects(spec: SceneSpec):
    rects = []
    for p in spec.planes:
        rects.append((p.point, p.normal, p.axis_a, p.axis_b, p.half_a, p.half_b, p.texture, False))
    for b in spec.boxes:
        for q, n, e1, e2, ha, hb in b.faces():
            rects.append((q, n, e1, e2, ha, hb, b.texture, True))
    return rects


def _rects_in_frame(world_rects, poses):
    out = []
    for (q, n, e1, e2, ha, hb, tex, is_obj), pose in zip(world_rects, poses):
        out.append(
            _CamRect(
                q=_transform_point(pose, q),
                n=_rotate_dir(pose, n),
                e1=_rotate_dir(pose, e1),
                e2=_rotate_dir(pose, e2),
                half_a=ha,
                half_b=hb,
                texture=tex,
                is_object=is_obj,
            )
        )
    return out


@dataclass
class _Cast:
    s: np.ndarray        # depth of the nearest hit, +inf where none
    owner: np.ndarray    # rectangle index, -1 where none
    hx: np.ndarray       # hit point, camera coordinates
    hy: np.ndarray
    hz: np.ndarray
    alpha: np.ndarray    # surface coordinates of the hit
    beta: np.ndarray


def _cast_rays(rects, U, V, K: Intrinsics):
    """Nearest-hit ray cast through (possibly fractional) pixel coordinates.

    Hit points are computed as (u - cx) * s / fx to match the scalar
    backprojection expression exactly. Ties on depth go to the earlier
    rectangle in the scene list.
    """
    shape = U.shape
    du = (U - K.cx) / K.fx
    dv = (V - K.cy) / K.fy
    best = np.full(shape, np.inf)
    owner = np.full(shape, -1, dtype=np.int32)
    hx = np.zeros(shape)
    hy = np.zeros(shape)
    hz = np.zeros(shape)
    alpha = np.zeros(shape)
    beta = np.zeros(shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        for idx, r in enumerate(rects):
            n0, n1, n2 = r.n
            q0, q1, q2 = r.q
            nd = (n0 * du + n1 * dv) + n2
            nq = (n0 * q0 + n1 * q1) + n2 * q2
            s = nq / nd
            px = (U - K.cx) * s / K.fx
            py = (V - K.cy) * s / K.fy
            rx = px - q0
            ry = py - q1
            rz = s - q2
            e1 = r.e1
            e2 = r.e2
            a = (e1[0] * rx + e1[1] * ry) + e1[2] * rz
            b = (e2[0] * rx + e2[1] * ry) + e2[2] * rz
            inside = (
                np.isfinite(s)
                & (s > 0.0)
                & (np.abs(a) <= r.half_a)
                & (np.abs(b) <= r.half_b)
            )
            win = inside & (s < best)
            best[win] = s[win]
            owner[win] = idx
            hx[win] = px[win]
            hy[win] = py[win]
            hz[win] = s[win]
            alpha[win] = a[win]
            beta[win] = b[win]
    return _Cast(s=best, owner=owner, hx=hx, hy=hy, hz=hz, alpha=alpha, beta=beta)


def _shade(cast: _Cast, rects):
    img = np.full(cast.s.shape, _MISS_VALUE)
    for idx, r in enumerate(rects):
        m = cast.owner == idx
        if m.any():
            img[m] = r.texture.value(cast.alpha[m], cast.beta[m])
    return img


def _is_identity(m: RigidMotion) -> bool:
    return np.array_equal(m.rotation(), np.eye(3)) and np.all(m.translation == 0.0)


def _correspond(cast: _Cast, motions, target_rects, K: Intrinsics, z_min: float):
    """Flow from one frame into another via per-rectangle rigid motions.

    Returns (flow, valid). Flow stays the geometric correspondence even
    where it is flagged invalid (out of view or occluded in the target);
    pixels with no geometry get zero flow.
    """
    shape = cast.s.shape
    U = np.broadcast_to(np.arange(K.width, dtype=np.float64)[None, :], shape).copy()
    V = np.broadcast_to(np.arange(K.height, dtype=np.float64)[:, None], shape).copy()
    u1 = U.copy()
    v1 = V.copy()
    z1 = np.ones(shape)
    for idx, motion in enumerate(motions):
        m = cast.owner == idx
        if not m.any():
            continue
        if _is_identity(motion):
            z1[m] = cast.hz[m]
            continue
        R = motion.rotation()
        t = motion.translation
        hx, hy, hz = cast.hx[m], cast.hy[m], cast.hz[m]
        x1 = R[0, 0] * hx + R[0, 1] * hy + R[0, 2] * hz + t[0]
        y1 = R[1, 0] * hx + R[1, 1] * hy + R[1, 2] * hz + t[1]
        zz = R[2, 0] * hx + R[2, 1] * hy + R[2, 2] * hz + t[2]
        safe = np.where(zz > 1e-12, zz, 1.0)
        u1[m] = K.fx * x1 / safe + K.cx
        v1[m] = K.fy * y1 / safe + K.cy
        z1[m] = zz
    flow = np.stack([u1 - U, v1 - V], axis=-1)
    hit = cast.owner >= 0
    flow[~hit] = 0.0
    in_bounds = (u1 >= 0.0) & (u1 <= K.width - 1) & (v1 >= 0.0) & (v1 <= K.height - 1)
    probe = _cast_rays(target_rects, u1, v1, K)
    occluded = probe.s < z1 - _OCCLUSION_SLACK
    valid = hit & in_bounds & (z1 > z_min) & ~occluded
    return flow, valid


@dataclass(frozen=True)
class RenderedPair:
    """Two consecutive frames with exact ground truth between them."""

    image_source: np.ndarray
    image_target: np.ndarray
    depth_source: np.ndarray
    depth_target: np.ndarray
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray
    object_mask: np.ndarray
    valid_mask: np.ndarray
    motion: RigidMotion
    intrinsics: Intrinsics

    def gt_state(self):

        return OutputState(
            depths=(self.depth_source, self.depth_target),
            motions=(self.motion,),
            intrinsics=self.intrinsics,
            flows_fwd=(self.flow_fwd,),
            flows_bwd=(self.flow_bwd,),
        )


@dataclass(frozen=True)
class RenderedSnippet:
    """A rendered multi-frame snippet with per-pair ground truth.

    valid_fwd[k] flags pixels of frame k whose forward correspondence into
    frame k+1 is on-screen and unoccluded; valid_bwd[k] is the same for
    frame k+1 looking back. owners holds the rectangle index per pixel
    (-1 where no geometry), object_masks flags pixels owned by a box.
    """

    frames: tuple
    depths: tuple
    flows_fwd: tuple
    flows_bwd: tuple
    valid_fwd: tuple
    valid_bwd: tuple
    owners: tuple
    object_masks: tuple
    motions: tuple
    intrinsics: Intrinsics
    spec: SceneSpec

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def pair(self, k: int) -> RenderedPair:
        if not 0 <= k < len(self.motions):
            raise IndexError(f"pair index {k} out of range for {self.n_frames} frames")
        return RenderedPair(
            image_source=self.frames[k],
            image_target=self.frames[k + 1],
            depth_source=self.depths[k],
            depth_target=self.depths[k + 1],
            flow_fwd=self.flows_fwd[k],
            flow_bwd=self.flows_bwd[k],
            object_mask=self.object_masks[k],
            valid_mask=self.valid_fwd[k],
            motion=self.motions[k],
            intrinsics=self.intrinsics,
        )

    def gt_state(self):

        return OutputState(
            depths=self.depths,
            motions=self.motions,
            intrinsics=self.intrinsics,
            flows_fwd=self.flows_fwd,
            flows_bwd=self.flows_bwd,
        )


def _freeze(arr):
    arr.flags.writeable = False
    return arr


def render_snippet(spec: SceneSpec, n_frames: int = 2) -> RenderedSnippet:
    """Render n_frames consecutive frames of the scene with ground truth."""
    if not isinstance(spec, SceneSpec):
        raise TypeError(f"spec must be a SceneSpec, got {type(spec).__name__}")
    n_frames = int(n_frames)
    if n_frames < 2:
        raise ValueError(f"need at least 2 frames, got {n_frames}")

    K = spec.intrinsics
    world = _world_rects(spec)
    n_planes = len(spec.planes)

    # camera pose per frame (world = frame-0 camera) and box pose per frame.
    # static rectangles use the per-step ego motion directly for flow, which
    # keeps the correspondence identical to scalar reprojection.
    ego_pose = [RigidMotion.identity()]
    for _ in range(n_frames - 1):
        ego_pose.append(compose(spec.ego, ego_pose[-1]))
    box_world = []
    for b in spec.boxes:
        seq = [RigidMotion.identity()]
        for _ in range(n_frames - 1):
            seq.append(compose(b.motion, seq[-1]))
        box_world.append(seq)

    def rect_poses(k):
        poses = [ego_pose[k]] * n_planes
        for j in range(len(spec.boxes)):
            for _ in range(6):
                poses.append(compose(ego_pose[k], box_world[j][k]))
        return poses

    frame_rects = [_rects_in_frame(world, rect_poses(k)) for k in range(n_frames)]

    U = np.broadcast_to(
        np.arange(K.width, dtype=np.float64)[None, :], (K.height, K.width)
    ).copy()
    V = np.broadcast_to(
        np.arange(K.height, dtype=np.float64)[:, None], (K.height, K.width)
    ).copy()

    casts = []
    frames = []
    depths = []
    owners = []
    object_masks = []
    for k in range(n_frames):
        cast = _cast_rays(frame_rects[k], U, V, K)
        hit = cast.owner >= 0
        if np.any(hit & (cast.s <= spec.z_min)):
            raise ValueError(f"visible geometry closer than z_min={spec.z_min}")
        casts.append(cast)
        frames.append(_freeze(_shade(cast, frame_rects[k])))
        depths.append(_freeze(np.where(hit, cast.s, _MISS_DEPTH)))
        owners.append(_freeze(cast.owner))
        is_obj = np.zeros(len(frame_rects[k]) + 1, dtype=bool)
        for idx, r in enumerate(frame_rects[k]):
            is_obj[idx] = r.is_object
        object_masks.append(_freeze(is_obj[cast.owner]))

    inv_ego = inverse(spec.ego)

    def pair_motions(k, forward):
        motions = []
        for idx in range(len(world)):
            if idx < n_planes:
                motions.append(spec.ego if forward else inv_ego)
            else:
                j = (idx - n_planes) // 6
                cur = compose(ego_pose[k], box_world[j][k])
                nxt = compose(ego_pose[k + 1], box_world[j][k + 1])
                if forward:
                    motions.append(compose(nxt, inverse(cur)))
                else:
                    motions.append(compose(cur, inverse(nxt)))
        return motions

    flows_fwd = []
    flows_bwd = []
    valid_fwd = []
    valid_bwd = []
    for k in range(n_frames - 1):
        flow, valid = _correspond(
            casts[k], pair_motions(k, True), frame_rects[k + 1], K, spec.z_min
        )
        flows_fwd.append(_freeze(flow))
        valid_fwd.append(_freeze(valid))
        flow, valid = _correspond(
            casts[k + 1], pair_motions(k, False), frame_rects[k], K, spec.z_min
        )
        flows_bwd.append(_freeze(flow))
        valid_bwd.append(_freeze(valid))

    return RenderedSnippet(
        frames=tuple(frames),
        depths=tuple(depths),
        flows_fwd=tuple(flows_fwd),
        flows_bwd=tuple(flows_bwd),
        valid_fwd=tuple(valid_fwd),
        valid_bwd=tuple(valid_bwd),
        owners=tuple(owners),
        object_masks=tuple(object_masks),
        motions=(spec.ego,) * (n_frames - 1),
        intrinsics=K,
        spec=spec,
    )


def render(spec: SceneSpec) -> RenderedPair:
    """Render one frame pair of the scene."""
    return render_snippet(spec, 2).pair(0)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise magnitudes for manufacturing a degraded prior from ground truth.

    Depth noise is multiplicative log-normal; everything else is additive
    Gaussian. All draws come from one seeded generator in a fixed order, so
    the prior is reproducible.
    """

    depth_sigma: float = 0.0
    flow_sigma: float = 0.0
    euler_sigma: float = 0.0
    translation_sigma: float = 0.0
    focal_sigma: float = 0.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = _finite_scalar(getattr(self, f.name), f.name)
            if v < 0.0:
                raise ValueError(f"{f.name} must be >= 0, got {v}")
            object.__setattr__(self, f.name, v)


def perturb(rendered, noise: NoiseSpec, seed: int = 0):
    """Draw a noisy prior state around a rendering's ground truth.

    Accepts a RenderedPair, a RenderedSnippet, or a bare OutputState.
    Draw order: depths per frame, forward flows, backward flows, per-pair
    Euler then translation, then fx and fy. Zero sigmas reproduce the
    input bit for bit.
    """
    if not isinstance(noise, NoiseSpec):
        raise TypeError(f"noise must be a NoiseSpec, got {type(noise).__name__}")
    st = rendered if isinstance(rendered, OutputState) else rendered.gt_state()
    rng = np.random.default_rng(seed)
    depths = tuple(d * np.exp(noise.depth_sigma * rng.standard_normal(d.shape)) for d in st.depths)
    flows_f = tuple(f + noise.flow_sigma * rng.standard_normal(f.shape) for f in st.flows_fwd)
    flows_b = tuple(f + noise.flow_sigma * rng.standard_normal(f.shape) for f in st.flows_bwd)
    motions = tuple(
        RigidMotion(
            euler=m.euler + noise.euler_sigma * rng.standard_normal(3),
            translation=m.translation + noise.translation_sigma * rng.standard_normal(3),
        )
        for m in st.motions
    )
    K = st.intrinsics
    fx = K.fx + noise.focal_sigma * rng.standard_normal()
    fy = K.fy + noise.focal_sigma * rng.standard_normal()

    return OutputState(
        depths=depths,
        motions=motions,
        intrinsics=Intrinsics(fx=fx, fy=fy, width=K.width, height=K.height),
        flows_fwd=flows_f,
        flows_bwd=flows_b,
    )


def default_scene() -> SceneSpec:
    """Fronto-parallel plane, lateral camera step, all quantities dyadic.

    With fx = 128, depth 4, and a step of 0.125 the ground-truth flow is
    exactly +4 columns at every pixel. The horizontal wave fades to zero
    near the left/right borders so replicate-padded window taps compare
    equal values there; the vertical wave needs no taper because the flow
    has no vertical component. The dead zone is wide enough for snippets
    of up to three frames (the border columns drift 0.125 surface units
    per frame).
    """
    tex = Texture(
        base=0.5,
        waves=(
            Wave(amplitude=0.18, freq_a=0.0, freq_b=0.4, phase=0.7),
            Wave(amplitude=0.12, freq_a=0.26, freq_b=0.09, phase=1.1, taper_a=(2.5, 2.9)),
        ),
    )
    plane = Plane(
        point=(0.0, 0.0, 4.0),
        normal=(0.0, 0.0, -1.0),
        axis_a=(1.0, 0.0, 0.0),
        axis_b=(0.0, -1.0, 0.0),
        half_a=3.8,
        half_b=1.4,
        texture=tex,
    )
    ego = RigidMotion(euler=(0.0, 0.0, 0.0), translation=(0.125, 0.0, 0.0))
    return SceneSpec(width=208, height=64, fx=128.0, fy=128.0, ego=ego, planes=(plane,))


def moving_box_scene() -> SceneSpec:
    """Default background plus a textured box sliding against the camera.

    The box front face sits at depth 2.5 and translates -0.1640625 per
    step, giving it a flow of exactly -2 columns while the background
    moves +4: a clean rigid-versus-independent-motion separation.
    """
    base = default_scene()
    box_tex = Texture(base=0.5, waves=(Wave(amplitude=0.2, freq_a=0.8, freq_b=0.5, phase=0.3),))
    box = Box(
        center=(0.6, 0.1, 2.7),
        half_extents=(0.5, 0.35, 0.2),
        texture=box_tex,
        motion=RigidMotion(euler=(0.0, 0.0, 0.0), translation=(-0.1640625, 0.0, 0.0)),
    )
    return SceneSpec(
        width=base.width,
        height=base.height,
        fx=base.fx,
        fy=base.fy,
        ego=base.ego,
        planes=base.planes,
        boxes=(box,),
    )


def random_scene(seed: int, *, width: int = 78, height: int = 24, focal: float = 96.0) -> SceneSpec:
    """Seeded two-plane scene with rotation-rich ego motion.

    Meant for recovery experiments: several low-frequency texture waves give
    smooth photometric gradients, and the ego motion mixes rotation about all
    three axes with a lateral-dominant translation. A single plane leaves
    motions that slide the plane over itself unobservable to the structure
    and epipolar terms, so a nearer, differently slanted plane partially
    covers one side of the view to break that gauge.
    """
    rng = np.random.default_rng(seed)

    def u(lo: float, hi: float) -> float:
        return float(rng.uniform(lo, hi))

    def signed(lo: float, hi: float) -> float:
        mag = u(lo, hi)
        return mag if rng.random() < 0.5 else -mag

    def texture() -> Texture:
        # low spatial frequencies keep the photometric landscape monotone
        # over several pixels of warp error; busy waves would let the
        # per-pixel branch minimum reward decorrelated (wrong) warps that
        # land on matching level sets by luck
        waves = tuple(Wave(
            amplitude=u(0.1, 0.16),
            freq_a=signed(0.1, 0.4),
            freq_b=signed(0.1, 0.4),
            phase=u(0.0, _TWO_PI),
        ) for _ in range(3))
        return Texture(base=0.5, waves=waves)

    # wedge: two differently sloped half-planes abutting along a
    # near-vertical junction line. Depth stays continuous, so unlike an
    # occluding pair there is no disocclusion seam rewarding collapsed
    # parallax, yet the distinct normals break the sliding gauge a single
    # plane leaves to the structure and epipolar terms.
    zj = u(2.6, 3.4)
    xj = signed(2.0, 16.0) * zj / focal
    jdir = np.array([signed(0.0, 0.08), 1.0, signed(0.0, 0.1)])
    jdir /= np.linalg.norm(jdir)
    junction = np.array([xj, 0.0, zj])
    # both faces carry the same surface-coordinate texture: their charts
    # agree along the junction (alpha = -half_a, shared beta), so the image
    # is value-continuous there and the seam adds no photometric floor
    shared = texture()
    # the depth slope of the face on `side` is slope_z / side, so the crease
    # between the faces is the SUM of the two slope_z draws. Independent
    # draws can cancel into a near-coplanar wedge, which restores the
    # single-plane gauge, so draw the crease directly with a floor and
    # derive the second slope from it.
    slope_l = signed(0.1, 0.45)
    crease = signed(0.3, 0.7)
    if abs(crease - slope_l) > 0.8:
        crease = -crease
    planes = []
    for side, slope in ((-1.0, slope_l), (1.0, crease - slope_l)):
        w = np.array([side, 0.0, slope])
        w -= jdir * (w @ jdir)
        w /= np.linalg.norm(w)
        planes.append(Plane(
            point=tuple(junction + 8.0 * w),
            normal=tuple(np.cross(w, jdir)),
            axis_a=tuple(w),
            axis_b=tuple(jdir),
            half_a=8.0,
            half_b=6.0,
            texture=shared,
        ))
    ego = RigidMotion(
        euler=(signed(0.003, 0.007), signed(0.003, 0.007), signed(0.002, 0.005)),
        translation=(signed(0.03, 0.06), signed(0.008, 0.02), signed(0.015, 0.04)),
    )
    return SceneSpec(width=width, height=height, fx=focal, fy=focal, ego=ego,
                     planes=tuple(planes))
