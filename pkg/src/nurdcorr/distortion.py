"""Distortion vectors and circular A-line warping.

Convention used throughout: warping frame O by vector d gives D with
D[i] = O[i + d_i] (indices mod N, linear interpolation between A-lines).
Correction applies -d, which undoes constant shifts exactly and smooth
shifts to first order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .frames import BScanFrame, BadMagicError, TruncatedError, VersionError

OCTD_MAGIC = b"OCTD"
OCTD_VERSION = 1
_OCTD_HEADER = struct.Struct("<4sHII")
MAX_MONOTONE_RETRIES = 100


class DistortionError(ValueError):
    pass


class DistortionVector:
    """Per-A-line circular shifts in A-line units."""

    __slots__ = ("shifts",)

    def __init__(self, shifts, *, dtype=np.float32):
        arr = np.array(shifts, dtype=dtype).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise DistortionError("distortion vector contains NaN or Inf")
        n = arr.size
        if n == 0:
            raise DistortionError("empty distortion vector")
        if np.abs(arr).max() > n / 2:
            raise DistortionError(
                f"shift magnitude {np.abs(arr).max():.3f} exceeds N/2 = {n / 2}")
        arr.setflags(write=False)
        self.shifts = arr

    @classmethod
    def zeros(cls, n: int) -> "DistortionVector":
        return cls(np.zeros(n))

    @classmethod
    def constant(cls, n: int, value: float) -> "DistortionVector":
        return cls(np.full(n, value))

    def __len__(self):
        return self.shifts.size

    def __neg__(self):
        return DistortionVector(-self.shifts, dtype=self.shifts.dtype)

    def __eq__(self, other):
        return isinstance(other, DistortionVector) and np.array_equal(self.shifts, other.shifts)

    def __repr__(self):
        return f"DistortionVector(n={len(self)}, max|d|={np.abs(self.shifts).max():.3f})"


@dataclass
class DistortionGenConfig:
    n_components: int = 1
    max_frequency: int = 3
    max_amplitude: float = 6.0
    enforce_monotone: bool = False

    def validate(self) -> None:
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.max_frequency < 1:
            raise ValueError("max_frequency must be >= 1")
        if not self.max_amplitude > 0:
            raise ValueError("max_amplitude must be > 0")


def sinusoid_mixture(n_alines: int, freqs, phases, amps, max_amplitude: float) -> np.ndarray:
    """Sum of sinusoids over the circle, rescaled so max |d| == max_amplitude."""
    i = np.arange(n_alines, dtype=np.float64)
    d = np.zeros(n_alines)
    for f, phi, a in zip(freqs, phases, amps):
        d += a * np.sin(2.0 * np.pi * f * i / n_alines + phi)
    peak = np.abs(d).max()
    if peak == 0:
        raise DistortionError("degenerate sinusoid mixture")
    return d * (max_amplitude / peak)


def _is_monotone(d: np.ndarray) -> bool:
    return bool(np.all(np.diff(np.arange(d.size) + d, append=d.size + d[0]) > 0))


def generate_gt_vector(cfg: DistortionGenConfig, n_alines: int,
                       rng: np.random.Generator) -> DistortionVector:
    """Random smooth NURD field: a few low-frequency sinusoids with exact peak amplitude."""
    cfg.validate()
    if cfg.max_amplitude > n_alines / 2:
        raise ValueError(f"max_amplitude {cfg.max_amplitude} exceeds N/2")
    for _ in range(MAX_MONOTONE_RETRIES if cfg.enforce_monotone else 1):
        k = cfg.n_components
        freqs = rng.integers(1, cfg.max_frequency + 1, size=k)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=k)
        amps = rng.uniform(0.0, 1.0, size=k)
        try:
            d = sinusoid_mixture(n_alines, freqs, phases, amps, cfg.max_amplitude)
        except DistortionError:
            continue
        if not cfg.enforce_monotone or _is_monotone(d):
            return DistortionVector(d)
    raise DistortionError(
        f"no monotone distortion found in {MAX_MONOTONE_RETRIES} attempts "
        f"(max_amplitude={cfg.max_amplitude}, max_frequency={cfg.max_frequency})")


# ---------------------------------------------------------------- warping

def _sample_positions(n: int, shifts: np.ndarray):
    pos = np.arange(n, dtype=np.float64) + np.asarray(shifts, np.float64)
    lo = np.floor(pos)
    w = pos - lo
    lo = lo.astype(np.int64) % n
    hi = (lo + 1) % n
    return lo, hi, w


def warp_array(pixels: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """out[..., i, :] = lerp of pixels rows at i + shifts[..., i] (circular).

    Leading batch axes on both arguments are supported.  Integer shifts give
    an exact row gather (weight 0 on the upper neighbour is skipped).
    """
    n = pixels.shape[-2]
    if shifts.shape[-1] != n:
        raise DistortionError(f"vector length {shifts.shape[-1]} != frame A-lines {n}")
    lo, hi, w = _sample_positions(n, shifts)
    a = np.take_along_axis(pixels, lo[..., None], axis=-2)
    b = np.take_along_axis(pixels, hi[..., None], axis=-2)
    w = w.astype(pixels.dtype)[..., None]
    out = a + w * (b - a)
    # keep integer positions bit-exact
    return np.where(w == 0, a, out)


def warp_grad_shifts(pixels: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """d out[i, :] / d shifts[i] = pixels[hi] - pixels[lo] (right derivative at integers)."""
    n = pixels.shape[-2]
    lo, hi, _ = _sample_positions(n, shifts)
    a = np.take_along_axis(pixels, lo[..., None], axis=-2)
    b = np.take_along_axis(pixels, hi[..., None], axis=-2)
    return b - a


def warp_frame(frame: BScanFrame, d: DistortionVector) -> BScanFrame:
    """Apply T_{O->D}: out[i] = frame[i + d_i] with circular linear interpolation."""
    if len(d) != frame.n_alines:
        raise DistortionError(f"vector length {len(d)} != frame A-lines {frame.n_alines}")
    return BScanFrame(warp_array(frame.pixels, d.shifts))


def correct_frame(frame: BScanFrame, d: DistortionVector) -> BScanFrame:
    """First-order inverse of :func:`warp_frame`; exact for constant shifts."""
    return warp_frame(frame, -d)


# ---------------------------------------------------------------- cumulative vectors

def lerp_circular(values: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Sample a circular 1-D field at fractional positions."""
    n = values.size
    lo, hi, w = _sample_positions(n, positions - np.arange(n))
    v = np.asarray(values, np.float64)
    return v[lo] + w * (v[hi] - v[lo])


def compose_cumulative(c_prev: DistortionVector, d_n: DistortionVector,
                       decay: float = 1.0) -> DistortionVector:
    """c_n[i] = decay * c_prev(i + d_n[i]) + d_n[i]."""
    if len(c_prev) != len(d_n):
        raise DistortionError(f"length mismatch: {len(c_prev)} vs {len(d_n)}")
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {decay}")
    d = np.asarray(d_n.shifts, np.float64)
    if decay == 0.0:
        return DistortionVector(d)
    carried = lerp_circular(c_prev.shifts, np.arange(d.size) + d)
    c = decay * carried + d
    # wrap into [-N/2, N/2] so long streams never leave the valid range
    n = d.size
    c = (c + n / 2) % n - n / 2
    return DistortionVector(c)


# ---------------------------------------------------------------- OCTD container

def save_vectors(vectors: Sequence[DistortionVector], path) -> None:
    vectors = list(vectors)
    if not vectors:
        raise DistortionError("nothing to save")
    n = len(vectors[0])
    if any(len(v) != n for v in vectors):
        raise DistortionError("vectors differ in length")
    with open(path, "wb") as fh:
        fh.write(_OCTD_HEADER.pack(OCTD_MAGIC, OCTD_VERSION, n, len(vectors)))
        for v in vectors:
            fh.write(np.asarray(v.shifts, "<f4").tobytes())


def load_vectors(path) -> list[DistortionVector]:
    data = Path(path).read_bytes()
    if data[:4] != OCTD_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {OCTD_MAGIC!r}")
    if len(data) < _OCTD_HEADER.size:
        raise TruncatedError(f"{path}: header truncated")
    _, version, n, count = _OCTD_HEADER.unpack_from(data)
    if version != OCTD_VERSION:
        raise VersionError(f"{path}: unsupported OCTD version {version}")
    need = n * count * 4
    if len(data) - _OCTD_HEADER.size < need:
        raise TruncatedError(f"{path}: payload shorter than {count} vectors of length {n}")
    arr = np.frombuffer(data, "<f4", count=n * count, offset=_OCTD_HEADER.size)
    return [DistortionVector(row) for row in arr.astype(np.float32).reshape(count, n)]
