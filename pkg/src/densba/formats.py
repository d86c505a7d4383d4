"""On-disk formats: portable pixmaps, Middlebury .flo, portable float maps,
calibration and pose text files, state directories, and run configuration.

Binary layouts are frozen by byte-level tests. Conventions:

* images: P5 (gray) / P6 (color), maxval up to 65535, multi-byte samples
  big-endian, values normalized to [0, 1] in memory;
* flow: .flo with little-endian float32 magic 202021.25, then width and
  height as int32, then row-major interleaved (u, v) float32 pairs;
* depth: grayscale PFM ("Pf"), rows stored bottom to top, the scale line's
  sign encoding endianness (writer always emits "-1", little-endian);
* pose and calibration: whitespace-separated decimal text at 17 significant
  digits, which round-trips IEEE doubles exactly.

A state directory holds depth_{k}.pfm per frame, pose_{k}.txt,
flow_fwd_{k}.flo and flow_bwd_{k}.flo per frame pair, and intrinsics.txt;
bare names (depth.pfm, ...) are accepted as aliases for index 0 on read.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .geometry import Intrinsics, RigidMotion
from .losses import LossWeights
from .refine import RefineConfig, VariableMask
from .state import OutputState, ProxWeights
from .validation import FormatError

_FLO_MAGIC = 202021.25


# ── portable pixmaps ─────────────────────────────────────────────────────────


class _Tokens:
    """PNM header tokenizer: whitespace-separated, '#' comments to end of line.

    Tracks the byte offset so malformed headers can be located precisely.
    """

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def _skip_filler(self):
        n = len(self.blob)
        while self.pos < n:
            b = self.blob[self.pos]
            if b in b" \t\r\n":
                self.pos += 1
            elif b == ord("#"):
                while self.pos < n and self.blob[self.pos] != ord("\n"):
                    self.pos += 1
            else:
                return

    def next(self, what: str) -> str:
        self._skip_filler()
        start = self.pos
        n = len(self.blob)
        while self.pos < n and self.blob[self.pos] not in b" \t\r\n#":
            self.pos += 1
        if self.pos == start:
            raise FormatError(f"missing {what} in header", byte_offset=start)
        return self.blob[start:self.pos].decode("ascii", errors="replace")

    def next_int(self, what: str) -> int:
        start = self.pos
        tok = self.next(what)
        try:
            return int(tok)
        except ValueError:
            raise FormatError(f"{what}: expected an integer, got {tok!r}",
                              byte_offset=start) from None


def read_image(path) -> np.ndarray:
    """Read a P5/P6 pixmap into a float image normalized to [0, 1]."""
    blob = Path(path).read_bytes()
    t = _Tokens(blob)
    magic = t.next("magic")
    if magic not in ("P5", "P6"):
        raise FormatError(f"unsupported magic {magic!r}, expected P5 or P6",
                          byte_offset=0)
    width = t.next_int("width")
    height = t.next_int("height")
    maxval = t.next_int("maxval")
    if width < 1 or height < 1:
        raise FormatError(f"bad dimensions {width}x{height}")
    if not (0 < maxval < 65536):
        raise FormatError(f"maxval must be in [1, 65535], got {maxval}")
    # exactly one whitespace byte separates the header from the payload
    if t.pos >= len(blob) or blob[t.pos] not in b" \t\r\n":
        raise FormatError("missing whitespace after maxval", byte_offset=t.pos)
    start = t.pos + 1
    channels = 3 if magic == "P6" else 1
    sample_bytes = 2 if maxval > 255 else 1
    expected = width * height * channels * sample_bytes
    got = len(blob) - start
    if got != expected:
        raise FormatError(
            f"payload: expected {expected} bytes, got {got}",
            byte_offset=start + min(got, expected))
    dtype = ">u2" if sample_bytes == 2 else np.uint8
    data = np.frombuffer(blob, dtype=dtype, offset=start).astype(np.float64)
    if np.any(data > maxval):
        raise FormatError(f"sample exceeds maxval {maxval}")
    shape = (height, width) if channels == 1 else (height, width, 3)
    return (data / maxval).reshape(shape)


def write_image(img, path, *, maxval: int = 65535) -> None:
    """Write a [0, 1] image as P5 (gray) or P6 (color)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"image must be (H, W) or (H, W, 3), got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must be finite and in [0, 1]")
    if not (0 < maxval < 65536):
        raise ValueError(f"maxval must be in [1, 65535], got {maxval}")
    magic = b"P6" if img.ndim == 3 else b"P5"
    h, w = img.shape[:2]
    samples = np.rint(img * maxval).astype(np.int64)
    samples = np.clip(samples, 0, maxval)
    dtype = ">u2" if maxval > 255 else np.uint8
    payload = samples.astype(dtype).tobytes()
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    Path(path).write_bytes(header + payload)


# ── middlebury flow ──────────────────────────────────────────────────────────


def read_flo(path) -> np.ndarray:
    """Read a .flo flow field as a float64 (H, W, 2) array."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError(f"header: expected 12 bytes, got {len(blob)}",
                          byte_offset=len(blob))
    magic, width, height = struct.unpack_from("<fii", blob)
    if magic != _FLO_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_FLO_MAGIC}",
                          byte_offset=0)
    if width < 1 or height < 1:
        raise FormatError(f"bad dimensions {width}x{height}", byte_offset=4)
    expected = 12 + width * height * 8
    if len(blob) != expected:
        raise FormatError(
            f"expected {expected} bytes for {width}x{height}, got {len(blob)}",
            byte_offset=min(len(blob), expected))
    data = np.frombuffer(blob, dtype="<f4", offset=12)
    return data.astype(np.float64).reshape(height, width, 2)


def write_flo(flow, path) -> None:
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    header = struct.pack("<fii", _FLO_MAGIC, w, h)
    Path(path).write_bytes(header + flow.astype("<f4").tobytes())


# ── portable float maps ──────────────────────────────────────────────────────


def read_depth(path, *, strict: bool = False) -> np.ndarray:
    """Read a grayscale PFM as float64 (H, W); strict also rejects values <= 0."""
    blob = Path(path).read_bytes()
    t = _Tokens(blob)
    magic = t.next("magic")
    if magic != "Pf":
        raise FormatError(
            f"unsupported magic {magic!r}, expected grayscale 'Pf'", byte_offset=0)
    width = t.next_int("width")
    height = t.next_int("height")
    scale_start = t.pos
    scale_tok = t.next("scale")
    try:
        scale = float(scale_tok)
    except ValueError:
        raise FormatError(f"scale: expected a float, got {scale_tok!r}",
                          byte_offset=scale_start) from None
    if scale == 0.0 or width < 1 or height < 1:
        raise FormatError(f"bad header: {width}x{height} scale {scale}")
    if t.pos >= len(blob) or blob[t.pos] not in b" \t\r\n":
        raise FormatError("missing whitespace after scale", byte_offset=t.pos)
    start = t.pos + 1
    expected = width * height * 4
    got = len(blob) - start
    if got != expected:
        raise FormatError(f"payload: expected {expected} bytes, got {got}",
                          byte_offset=start + min(got, expected))
    dtype = "<f4" if scale < 0.0 else ">f4"
    data = np.frombuffer(blob, dtype=dtype, offset=start).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise FormatError(f"non-finite value at index {bad[0]}")
    if strict:
        bad = np.flatnonzero(data <= 0.0)
        if bad.size:
            raise FormatError(f"non-positive depth at index {bad[0]}")
    # rows are stored bottom to top
    return data.reshape(height, width)[::-1].copy()


def write_depth(depth, path) -> None:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"depth must be (H, W), got {depth.shape}")
    bad = np.flatnonzero(~np.isfinite(depth[::-1].ravel()))
    if bad.size:
        raise FormatError(f"non-finite value at index {bad[0]}")
    h, w = depth.shape
    header = b"Pf\n%d %d\n-1\n" % (w, h)
    Path(path).write_bytes(header + depth[::-1].astype("<f4").tobytes())


# ── text files: calibration and poses ────────────────────────────────────────


def _g17(x: float) -> str:
    return f"{float(x):.17g}"


def read_calibration(path) -> Intrinsics:
    """Parse 'fx fy width height' into Intrinsics."""
    tokens = Path(path).read_text().split()
    if len(tokens) != 4:
        raise FormatError(
            f"calibration: expected 4 fields 'fx fy width height', got {len(tokens)}")
    try:
        fx, fy = float(tokens[0]), float(tokens[1])
        width, height = int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise FormatError(f"calibration: {e}") from None
    try:
        return Intrinsics(fx=fx, fy=fy, width=width, height=height)
    except ValueError as e:
        raise FormatError(f"calibration: {e}") from None


def write_calibration(K: Intrinsics, path) -> None:
    Path(path).write_text(f"{_g17(K.fx)} {_g17(K.fy)} {K.width} {K.height}\n")


def _read_pose(path) -> RigidMotion:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) != 2:
        raise FormatError(f"{Path(path).name}: expected 2 lines, got {len(lines)}")
    try:
        euler = tuple(float(x) for x in lines[0].split())
        translation = tuple(float(x) for x in lines[1].split())
    except ValueError as e:
        raise FormatError(f"{Path(path).name}: {e}") from None
    if len(euler) != 3 or len(translation) != 3:
        raise FormatError(f"{Path(path).name}: each line needs 3 numbers")
    return RigidMotion(euler=euler, translation=translation)


def _write_pose(m: RigidMotion, path) -> None:
    e, t = np.asarray(m.euler), np.asarray(m.translation)
    Path(path).write_text(
        " ".join(_g17(x) for x in e) + "\n" + " ".join(_g17(x) for x in t) + "\n")


# ── state directories ────────────────────────────────────────────────────────


def _indexed(directory: Path, base: str, ext: str, k: int) -> Optional[Path]:
    p = directory / f"{base}_{k}{ext}"
    if p.exists():
        return p
    if k == 0:
        bare = directory / f"{base}{ext}"
        if bare.exists():
            return bare
    return None


def read_state(directory) -> OutputState:
    """Load an OutputState from its directory layout."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    depths = []
    while True:
        p = _indexed(directory, "depth", ".pfm", len(depths))
        if p is None:
            break
        depths.append(read_depth(p))
    if not depths:
        raise FormatError(f"{directory}: no depth maps (depth_0.pfm) found")
    n = len(depths)
    motions, flows_fwd, flows_bwd = [], [], []
    for k in range(n - 1):
        for base, ext, sink, reader in (
            ("pose", ".txt", motions, _read_pose),
            ("flow_fwd", ".flo", flows_fwd, read_flo),
            ("flow_bwd", ".flo", flows_bwd, read_flo),
        ):
            p = _indexed(directory, base, ext, k)
            if p is None:
                raise FormatError(f"{directory}: missing {base}_{k}{ext}")
            sink.append(reader(p))
    calib = directory / "intrinsics.txt"
    if not calib.exists():
        raise FormatError(f"{directory}: missing intrinsics.txt")
    return OutputState(depths=tuple(depths), motions=tuple(motions),
                       intrinsics=read_calibration(calib),
                       flows_fwd=tuple(flows_fwd), flows_bwd=tuple(flows_bwd))


def write_state(state: OutputState, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, d in enumerate(state.depths):
        write_depth(d, directory / f"depth_{k}.pfm")
    for k, m in enumerate(state.motions):
        _write_pose(m, directory / f"pose_{k}.txt")
    for k, f in enumerate(state.flows_fwd):
        write_flo(f, directory / f"flow_fwd_{k}.flo")
    for k, f in enumerate(state.flows_bwd):
        write_flo(f, directory / f"flow_bwd_{k}.flo")
    write_calibration(state.intrinsics, directory / "intrinsics.txt")


# ── run configuration ────────────────────────────────────────────────────────


def _parse_bool(tok: str) -> bool:
    low = tok.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {tok!r}")


@dataclass(frozen=True)
class RunConfig:
    """Parsed run settings; unset fields fall back to the library defaults."""

    iterations: Optional[int] = None
    learning_rate: Optional[float] = None
    adam_beta1: Optional[float] = None
    adam_beta2: Optional[float] = None
    adam_eps: Optional[float] = None
    threads: Optional[int] = None
    w_apc: Optional[float] = None
    w_mvs: Optional[float] = None
    w_e: Optional[float] = None
    w_smooth_depth: Optional[float] = None
    w_smooth_flow: Optional[float] = None
    w_fb: Optional[float] = None
    prox_depth: Optional[float] = None
    prox_rotation: Optional[float] = None
    prox_translation: Optional[float] = None
    prox_intrinsics: Optional[float] = None
    prox_flow: Optional[float] = None
    refine_depth: Optional[bool] = None
    refine_rotation: Optional[bool] = None
    refine_translation: Optional[bool] = None
    refine_intrinsics: Optional[bool] = None
    refine_flow: Optional[bool] = None
    seed: int = 0
    frames: Optional[Tuple[str, ...]] = None
    prior: Optional[str] = None
    calib: Optional[str] = None
    out: Optional[str] = None

    def _collect(self, prefix: str, names, strip_prefix=True) -> dict:
        out = {}
        for name in names:
            v = getattr(self, f"{prefix}{name}" if strip_prefix else name)
            if v is not None:
                out[name] = v
        return out

    def loss_weights(self) -> LossWeights:
        names = ("w_apc", "w_mvs", "w_e", "w_smooth_depth", "w_smooth_flow", "w_fb")
        return LossWeights(**self._collect("", names, strip_prefix=False))

    def prox_weights(self) -> ProxWeights:
        names = ("depth", "rotation", "translation", "intrinsics", "flow")
        return ProxWeights(**self._collect("prox_", names))

    def variable_mask(self) -> VariableMask:
        names = ("depth", "rotation", "translation", "intrinsics", "flow")
        return VariableMask(**self._collect("refine_", names))

    def refine_config(self) -> RefineConfig:
        names = ("iterations", "learning_rate", "adam_beta1", "adam_beta2",
                 "adam_eps", "threads")
        return RefineConfig(
            loss_weights=self.loss_weights(),
            prox_weights=self.prox_weights(),
            variables=self.variable_mask(),
            **self._collect("", names, strip_prefix=False),
        )


_CONFIG_PARSERS = {}
for _f in fields(RunConfig):
    if _f.name == "frames":
        _CONFIG_PARSERS[_f.name] = lambda v: tuple(v.split())
    elif _f.name in ("prior", "calib", "out"):
        _CONFIG_PARSERS[_f.name] = str
    elif _f.name in ("iterations", "threads", "seed"):
        _CONFIG_PARSERS[_f.name] = int
    elif _f.name.startswith("refine_"):
        _CONFIG_PARSERS[_f.name] = _parse_bool
    else:
        _CONFIG_PARSERS[_f.name] = float
del _f


def parse_config(text: str) -> RunConfig:
    """Parse flat 'key = value' text; unknown or repeated keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.split("#")[0].strip()
        if key not in _CONFIG_PARSERS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _CONFIG_PARSERS[key](value)
        except ValueError as e:
            raise ValueError(f"line {lineno}: {key}: {e}") from None
    cfg = RunConfig(**values)
    cfg.refine_config()  # validate eagerly, before any computation
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
