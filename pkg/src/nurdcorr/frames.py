"""B-scan frames, the OCTF sequence container, phantom synthesis and image output.

A frame is an (N, M) array: row i is A-line i (circumferential position,
wraps mod N), column j is depth.  Pixel values live in [0, 1].
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

MIN_ALINES = 8
MIN_POINTS = 4

OCTF_MAGIC = b"OCTF"
OCTF_VERSION = 1
# magic, u16 version, u32 N, u32 M, u32 F, u8 dtype, 3 reserved bytes
_OCTF_HEADER = struct.Struct("<4sHIIIB3s")
DTYPE_F32 = 0


class FrameError(ValueError):
    """Invalid frame contents or shape."""


class ContainerError(IOError):
    """Base for container read failures."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class PGMError(ValueError):
    pass


class BScanFrame:
    """One OCT B-scan.  Immutable: the pixel array is marked read-only."""

    __slots__ = ("pixels",)

    def __init__(self, pixels, *, clip: bool = False):
        arr = np.array(pixels, dtype=np.float32)
        if arr.ndim != 2:
            raise FrameError(f"frame must be 2-D, got shape {arr.shape}")
        n, m = arr.shape
        if n < MIN_ALINES or m < MIN_POINTS:
            raise FrameError(f"frame {n}x{m} below minimum {MIN_ALINES}x{MIN_POINTS}")
        if not np.all(np.isfinite(arr)):
            raise FrameError("frame contains NaN or Inf")
        if clip:
            np.clip(arr, 0.0, 1.0, out=arr)
        elif arr.min() < 0.0 or arr.max() > 1.0:
            raise FrameError(
                f"pixel values must lie in [0, 1], got [{arr.min()}, {arr.max()}]")
        arr.setflags(write=False)
        self.pixels = arr

    @property
    def n_alines(self) -> int:
        return self.pixels.shape[0]

    @property
    def n_points(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def roll(self, k: int) -> "BScanFrame":
        """Circular shift of A-lines: out[i] = self[i + k]."""
        return BScanFrame(np.roll(self.pixels, -k, axis=0))

    def __eq__(self, other):
        return isinstance(other, BScanFrame) and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"BScanFrame(n_alines={self.n_alines}, n_points={self.n_points})"


class FrameSequence:
    """Ordered frames sharing one (N, M) shape."""

    def __init__(self, frames: Sequence[BScanFrame], origin: int = 0):
        frames = list(frames)
        if not frames:
            raise FrameError("a sequence needs at least one frame")
        shape = frames[0].shape
        for k, f in enumerate(frames):
            if f.shape != shape:
                raise FrameError(f"frame {k} has shape {f.shape}, expected {shape}")
        self.frames = frames
        self.origin = origin

    @classmethod
    def from_array(cls, arr: np.ndarray, origin: int = 0) -> "FrameSequence":
        return cls([BScanFrame(a) for a in np.asarray(arr)], origin)

    def to_array(self) -> np.ndarray:
        return np.stack([f.pixels for f in self.frames])

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape

    def __len__(self):
        return len(self.frames)

    def __iter__(self) -> Iterator[BScanFrame]:
        return iter(self.frames)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return FrameSequence(self.frames[k], self.origin)
        return self.frames[k]

    def __repr__(self):
        n, m = self.shape
        return f"FrameSequence({len(self)} frames, {n}x{m})"


# ---------------------------------------------------------------- phantom

@dataclass
class PhantomConfig:
    n_alines: int = 256
    n_points: int = 64
    ring_center_depth: float = 0.45
    ring_thickness: float = 0.18
    n_angular_features: int = 4
    feature_contrast: float = 0.5
    speckle_strength: float = 0.2
    speckle_grain: float = 3.0

    def validate(self) -> None:
        if self.n_alines < MIN_ALINES or self.n_points < MIN_POINTS:
            raise ValueError(
                f"phantom size {self.n_alines}x{self.n_points} below minimum")
        for name in ("ring_center_depth", "ring_thickness"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        for name in ("feature_contrast", "speckle_strength"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.speckle_grain < 0:
            raise ValueError("speckle_grain must be >= 0")
        if self.n_angular_features < 1:
            raise ValueError("n_angular_features must be >= 1")


def _phantom_clean(cfg: PhantomConfig, phase: float = 0.0, depth_offset: float = 0.0) -> np.ndarray:
    n, m = cfg.n_alines, cfg.n_points
    theta = 2.0 * np.pi * np.arange(n) / n + phase
    k = cfg.n_angular_features
    c = cfg.feature_contrast
    # thickness and brightness are modulated in quadrature so that an A-line's
    # appearance pins down its angular phase within a lobe
    thickness = cfg.ring_thickness * m * (1.0 + 0.5 * c * np.sin(k * theta))
    brightness = 0.75 * (1.0 + 0.5 * c * np.cos(k * theta)) / (1.0 + 0.5 * c)
    center = (cfg.ring_center_depth + depth_offset) * m
    z = np.arange(m) + 0.5
    dist = np.abs(z[None, :] - center) / (0.5 * thickness[:, None])
    band = 1.0 / (1.0 + dist ** 8)
    background = 0.08 * np.exp(-z / m)
    tissue = np.where(z[None, :] > center, 0.25 * np.exp(-(z[None, :] - center) / (0.3 * m)), 0.0)
    return brightness[:, None] * band + tissue * (1.0 - band) + background[None, :]


def speckle_field(shape, grain: float, rng: np.random.Generator) -> np.ndarray:
    """Fully developed speckle: |complex Gaussian|^2 with unit mean (exponential marginal).

    ``grain`` is the Gaussian correlation width along A-lines (circular); 0 gives
    independent pixels.
    """
    field = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    if grain > 0:
        field = ndimage.gaussian_filter1d(field.real, grain, axis=0, mode="wrap") \
            + 1j * ndimage.gaussian_filter1d(field.imag, grain, axis=0, mode="wrap")
    intensity = np.abs(field) ** 2
    return intensity / intensity.mean()


def _apply_speckle(clean: np.ndarray, cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.speckle_strength == 0.0:
        return clean
    speckle = speckle_field(clean.shape, cfg.speckle_grain, rng)
    return clean * ((1.0 - cfg.speckle_strength) + cfg.speckle_strength * speckle)


def generate_phantom(cfg: PhantomConfig, rng: np.random.Generator, *,
                     phase: float = 0.0, depth_offset: float = 0.0) -> BScanFrame:
    """Synthetic vessel-phantom B-scan: a bright lumen wall with angular lobes plus speckle."""
    cfg.validate()
    img = _apply_speckle(_phantom_clean(cfg, phase, depth_offset), cfg, rng)
    return BScanFrame(np.clip(img, 0.0, 1.0))


def generate_sequence(cfg: PhantomConfig, n_frames: int, rng: np.random.Generator,
                      drift: float = 0.001) -> FrameSequence:
    """Pull-back style sequence: slowly wandering wall depth and phase, fresh speckle per frame.

    ``drift`` bounds the rotation per frame in radians/pi; the wall depth wobbles
    by up to 2% of the depth range with a period of 64 to 256 frames.
    """
    cfg.validate()
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    phase0 = rng.uniform(0.0, 2.0 * np.pi)
    phase_rate = rng.uniform(-1.0, 1.0) * drift * np.pi
    depth_amp = rng.uniform(0.0, 0.02)
    depth_freq = 2.0 * np.pi / rng.uniform(64.0, 256.0)
    frames = []
    for t in range(n_frames):
        frames.append(generate_phantom(
            cfg, rng,
            phase=phase0 + phase_rate * t,
            depth_offset=depth_amp * np.sin(depth_freq * t)))
    return FrameSequence(frames)


# ---------------------------------------------------------------- OCTF container

def save_sequence(seq: FrameSequence, path) -> None:
    n, m = seq.shape
    header = _OCTF_HEADER.pack(OCTF_MAGIC, OCTF_VERSION, n, m, len(seq), DTYPE_F32, b"\0\0\0")
    payload = seq.to_array().astype("<f4", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_sequence(path) -> FrameSequence:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != OCTF_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {OCTF_MAGIC!r}")
    if len(data) < _OCTF_HEADER.size:
        raise TruncatedError(f"{path}: header truncated")
    _, version, n, m, count, dtype, _ = _OCTF_HEADER.unpack_from(data)
    if version != OCTF_VERSION:
        raise VersionError(f"{path}: unsupported OCTF version {version}")
    if dtype != DTYPE_F32:
        raise ContainerError(f"{path}: unsupported dtype code {dtype}")
    need = count * n * m * 4
    have = len(data) - _OCTF_HEADER.size
    if have < need:
        raise TruncatedError(
            f"{path}: header declares {count} frames of {n}x{m} ({need} bytes) "
            f"but only {have} payload bytes present")
    arr = np.frombuffer(data, dtype="<f4", count=count * n * m, offset=_OCTF_HEADER.size)
    return FrameSequence.from_array(arr.astype(np.float32).reshape(count, n, m))


# ---------------------------------------------------------------- PGM / PPM

def _pgm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PGMError("unexpected end of PGM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def import_pgm(path) -> BScanFrame:
    """Binary 8-bit PGM (P5); image rows become A-lines, scaled by 1/255."""
    data = Path(path).read_bytes()
    if data[:2] == b"P2":
        raise PGMError("ASCII PGM (P2) is not supported; convert to binary P5")
    if data[:2] != b"P5":
        raise PGMError(f"not a binary PGM: magic {data[:2]!r}")
    tokens, start = _pgm_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise PGMError(f"malformed PGM header: {tokens}") from exc
    if width <= 0 or height <= 0:
        raise PGMError(f"invalid PGM size {width}x{height}")
    if maxval > 255:
        raise PGMError(f"16-bit PGM (maxval {maxval}) is not supported")
    if maxval != 255:
        raise PGMError(f"PGM maxval must be 255, got {maxval}")
    raster = data[2 + start:]
    if len(raster) < width * height:
        raise PGMError(f"PGM raster truncated: {len(raster)} < {width * height} bytes")
    img = np.frombuffer(raster, dtype=np.uint8, count=width * height).reshape(height, width)
    return BScanFrame(img.astype(np.float32) / np.float32(255.0))


def export_pgm(frame: BScanFrame, path) -> None:
    n, m = frame.shape
    img = _to_bytes(frame.pixels)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (m, n))
        fh.write(img.tobytes())


def _to_bytes(values: np.ndarray) -> np.ndarray:
    # round half up; float64 keeps x*255 exact enough for .5 ties
    return np.floor(np.asarray(values, np.float64) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def rgb_overlay(f1: BScanFrame, f2: BScanFrame, f3: BScanFrame, path) -> None:
    """Write three frames as the R, G, B channels of a binary PPM."""
    if not (f1.shape == f2.shape == f3.shape):
        raise FrameError(f"shape mismatch: {f1.shape}, {f2.shape}, {f3.shape}")
    n, m = f1.shape
    rgb = np.stack([_to_bytes(f.pixels) for f in (f1, f2, f3)], axis=-1)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (m, n))
        fh.write(rgb.tobytes())


def en_face_projection(seq: FrameSequence) -> np.ndarray:
    """(frames x A-lines) map of per-A-line depth means."""
    return np.stack([f.pixels.mean(axis=1, dtype=np.float64) for f in seq])
