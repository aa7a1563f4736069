"""Correction quality metrics and a classical cross-correlation aligner.

The STD metric averages, over every pixel, the population standard deviation
of that pixel across a centred window of 5 frames.  Lower is better.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distortion import DistortionVector
from .frames import BScanFrame, FrameSequence

WINDOW = 5
HALF = WINDOW // 2


class MetricError(ValueError):
    pass


@dataclass
class StdSeries:
    frames: np.ndarray   # centre frame index of each window
    values: np.ndarray
    window: int = WINDOW

    def mean(self) -> float:
        return float(self.values.mean())

    def to_csv(self, path=None) -> str:
        text = "frame,std\n" + "".join(f"{int(n)},{v:.6g}\n" for n, v in zip(self.frames, self.values))
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_svg(self, path=None, width: int = 640, height: int = 240, label: str = "std") -> str:
        return svg_polyline(self.frames, self.values, path, width, height, label)


def _stack(seq: FrameSequence | np.ndarray) -> np.ndarray:
    if isinstance(seq, FrameSequence):
        return seq.to_array().astype(np.float64)
    return np.asarray(seq, np.float64)


def std_metric(seq: FrameSequence | np.ndarray, n: int) -> float:
    """Mean over pixels of the 5-frame population STD centred on frame ``n``."""
    arr = _stack(seq)
    if len(arr) < WINDOW:
        raise MetricError(f"need at least {WINDOW} frames, got {len(arr)}")
    if not HALF <= n <= len(arr) - 1 - HALF:
        raise MetricError(f"frame {n} has no full {WINDOW}-frame window in a {len(arr)}-frame sequence")
    return float(arr[n - HALF:n + HALF + 1].std(axis=0).mean())


def std_series(seq: FrameSequence | np.ndarray) -> StdSeries:
    arr = _stack(seq)
    if len(arr) < WINDOW:
        raise MetricError(f"need at least {WINDOW} frames, got {len(arr)}")
    idx = np.arange(HALF, len(arr) - HALF)
    return StdSeries(idx, np.array([std_metric(arr, n) for n in idx]))


def mae_vectors(pred, gt) -> float:
    p = np.asarray(pred.shifts if isinstance(pred, DistortionVector) else pred, np.float64)
    g = np.asarray(gt.shifts if isinstance(gt, DistortionVector) else gt, np.float64)
    if p.shape != g.shape:
        raise MetricError(f"length mismatch: {p.shape} vs {g.shape}")
    return float(np.abs(p - g).mean())


# ---------------------------------------------------------------- baseline aligner

def _ncc(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """NCC of profile ``a`` against each row of ``b``; flat profiles score 0."""
    a = a - a.mean()
    b = b - b.mean(axis=-1, keepdims=True)
    den = np.linalg.norm(a) * np.linalg.norm(b, axis=-1)
    num = b @ a
    return np.divide(num, den, out=np.zeros_like(num), where=den > 1e-12)


def _circular_dp(cost: np.ndarray, shifts: np.ndarray, lam: float) -> np.ndarray:
    """Minimise sum cost[b, s_b] + lam * |s_b - s_{b-1}| around a closed loop of blocks."""
    n_blocks, n_s = cost.shape
    jump = lam * np.abs(shifts[:, None] - shifts[None, :]).astype(np.float64)
    best_total, best_path = np.inf, None
    for s0 in range(n_s):
        acc = np.full(n_s, np.inf)
        acc[s0] = cost[0, s0]
        back = np.zeros((n_blocks, n_s), dtype=np.int64)
        for b in range(1, n_blocks):
            cand = acc[:, None] + jump          # previous state x current state
            back[b] = np.argmin(cand, axis=0)
            acc = cand[back[b], np.arange(n_s)] + cost[b]
        closing = acc + jump[:, s0]
        last = int(np.argmin(closing))
        if closing[last] < best_total - 1e-12:
            path = [last]
            for b in range(n_blocks - 1, 0, -1):
                path.append(int(back[b, path[-1]]))
            best_total, best_path = closing[last], path[::-1]
    return shifts[np.array(best_path)]


def xcorr_align(prev: BScanFrame, cur: BScanFrame, max_shift: int = 8, block: int = 8,
                lambda_dp: float = 1e-4) -> DistortionVector:
    """Estimate the vector d with cur ~= warp(prev, d) by block NCC + circular DP.

    For every block of ``block`` A-lines the block-mean A-line of ``cur`` is
    correlated against ``prev``'s block means at integer offsets within
    +-``max_shift``; a DP over blocks trades correlation against jumps between
    neighbouring block shifts.  NCC differences between nearby shifts are
    small on smooth frames, so useful ``lambda_dp`` values are small too.
    """
    if prev.shape != cur.shape:
        raise MetricError(f"shape mismatch: {prev.shape} vs {cur.shape}")
    n = prev.n_alines
    if max_shift < 0 or max_shift > n // 4:
        raise MetricError(f"max_shift must lie in [0, N/4 = {n // 4}], got {max_shift}")
    if block < 1 or n % block:
        raise MetricError(f"block {block} must divide N = {n}")
    if lambda_dp < 0:
        raise MetricError("lambda_dp must be >= 0")
    p = prev.pixels.astype(np.float64)
    c = cur.pixels.astype(np.float64)
    shifts = np.arange(-max_shift, max_shift + 1)
    n_blocks = n // block
    # running block means of prev starting at every A-line (circular)
    csum = np.cumsum(np.concatenate([p, p[:block]]), axis=0)
    csum = np.concatenate([np.zeros((1, p.shape[1])), csum])
    window_mean = (csum[block:block + n] - csum[:n]) / block
    cost = np.empty((n_blocks, shifts.size))
    for b in range(n_blocks):
        start = b * block
        target = c[start:start + block].mean(axis=0)
        cost[b] = -_ncc(target, window_mean[(start + shifts) % n])
    if np.isinf(lambda_dp):
        block_shift = np.full(n_blocks, shifts[np.argmin(cost.sum(axis=0))])
    else:
        block_shift = _circular_dp(cost, shifts, lambda_dp)
    return DistortionVector(np.repeat(block_shift, block).astype(np.float64))


# ---------------------------------------------------------------- plotting

def svg_polyline(xs, ys, path=None, width: int = 640, height: int = 240, label: str = "") -> str:
    """Minimal SVG line plot; no external renderer needed."""
    xs = np.asarray(xs, np.float64)
    ys = np.asarray(ys, np.float64)
    pad = 30
    x0, x1 = xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1
    y0, y1 = 0.0, max(ys.max(), 1e-12)
    px = pad + (xs - x0) / (x1 - x0) * (width - 2 * pad)
    py = height - pad - (ys - y0) / (y1 - y0) * (height - 2 * pad)
    points = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'  <rect width="100%" height="100%" fill="white"/>\n'
        f'  <line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n'
        f'  <line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>\n'
        f'  <text x="{pad}" y="{pad - 8}" font-size="12">{label} (max {y1:.4g})</text>\n'
        f'  <polyline fill="none" stroke="green" stroke-width="1.5" points="{points}"/>\n'
        f'</svg>\n')
    if path is not None:
        with open(path, "w") as fh:
            fh.write(svg)
    return svg
