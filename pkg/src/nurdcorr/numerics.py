"""Dense 2-D tensor ops with hand-written backward passes.

Tensors are plain numpy arrays whose last two axes are (rows, cols); a
leading batch axis is allowed everywhere so a batch of frames can be pushed
through the model in one call.  Training runs in float32; gradient checks
switch to float64 via :func:`set_dtype`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5

# tanh-form GELU: 0.5 x (1 + tanh(c (x + a x^3))), c = sqrt(2/pi), a = 0.044715
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_dtype = DEFAULT_DTYPE


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def get_dtype():
    return _dtype


def set_dtype(dtype) -> None:
    """Switch the working float type (float32 default, float64 for gradient checks)."""
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _dtype = dtype


class float64_mode:
    """Context manager: run the enclosed block with float64 tensors."""

    def __enter__(self):
        self._prev = _dtype
        set_dtype(np.float64)
        return self

    def __exit__(self, *exc):
        set_dtype(self._prev)
        return False


def tensor2(data, checked: bool = True) -> np.ndarray:
    """Build a 2-D tensor in the working dtype, rejecting NaN/Inf when ``checked``."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=_dtype))
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D tensor, got shape {arr.shape}")
    if checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream for ``seed``; the bit stream is identical on every platform."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rng(rng: np.random.Generator) -> np.random.Generator:
    """Split off an independent child stream."""
    return np.random.Generator(np.random.PCG64(rng.integers(0, 2**63)))


# ---------------------------------------------------------------- matmul

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, dc: np.ndarray):
    """Return (dA, dB) for C = A @ B.  A batched A with a shared B sums dB over the batch."""
    da = dc @ np.swapaxes(b, -1, -2)
    db = np.swapaxes(a, -1, -2) @ dc
    if db.ndim > b.ndim:
        db = db.reshape(-1, *b.shape).sum(axis=0)
    return da, db


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x @ w + b with a row-vector bias."""
    return matmul(x, w) + b


def linear_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Return (dx, dw, db) for y = x @ w + b."""
    if x.shape[-1] != w.shape[0] or dy.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear backward shapes {x.shape}, {w.shape}, {dy.shape}")
    dy2 = dy.reshape(-1, dy.shape[-1])
    dx = dy @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dy2
    db = dy2.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------- softmax

def softmax_rows(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(s: np.ndarray, ds: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the softmax input given its output ``s``."""
    return s * (ds - (ds * s).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------- layer norm

def layer_norm_rows(a: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                    eps: float = LN_EPS, return_cache: bool = False):
    """Per-row (x - mean) / sqrt(popvar + eps) * gamma + beta."""
    if gamma.shape[-1] != a.shape[-1] or beta.shape[-1] != a.shape[-1]:
        raise DimensionError(
            f"layer norm params of length {gamma.shape[-1]}/{beta.shape[-1]} "
            f"for rows of length {a.shape[-1]}")
    mean = a.mean(axis=-1, keepdims=True)
    xc = a - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.reshape(-1) + beta.reshape(-1)
    if return_cache:
        return out, (xhat, rstd)
    return out


def layer_norm_rows_backward(cache, gamma: np.ndarray, dout: np.ndarray):
    """Return (dx, dgamma, dbeta)."""
    xhat, rstd = cache
    g = gamma.reshape(-1)
    flat_dout = dout.reshape(-1, dout.shape[-1])
    dgamma = (flat_dout * xhat.reshape(flat_dout.shape)).sum(axis=0)
    dbeta = flat_dout.sum(axis=0)
    dxhat = dout * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma.reshape(gamma.shape), dbeta.reshape(gamma.shape)


# ---------------------------------------------------------------- GELU

def mlp_activation(a: np.ndarray) -> np.ndarray:
    """Elementwise GELU, tanh approximation."""
    t = np.tanh(a * (GELU_C + (GELU_C * GELU_A) * (a * a)))
    return 0.5 * a * (1.0 + t)


def mlp_activation_backward(a: np.ndarray, dout: np.ndarray) -> np.ndarray:
    a2 = a * a
    t = np.tanh(a * (GELU_C + (GELU_C * GELU_A) * a2))
    dinner = GELU_C + (3.0 * GELU_C * GELU_A) * a2
    return dout * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner)


gelu = mlp_activation
gelu_backward = mlp_activation_backward


# ---------------------------------------------------------------- optimizer

def sgd_step(params: Iterable[Parameter] | Mapping[str, Parameter], lr: float) -> None:
    """Plain SGD: value -= lr * grad, then zero the gradients."""
    if isinstance(params, Mapping):
        params = params.values()
    for p in params:
        if lr != 0:
            p.value -= p.value.dtype.type(lr) * p.grad
        p.zero_grad()


def zero_grads(params: Mapping[str, Parameter]) -> None:
    for p in params.values():
        p.zero_grad()


# ---------------------------------------------------------------- gradient oracle

def finite_difference_grad(f: Callable[[], float],
                           params: Mapping[str, Parameter] | Iterable[Parameter],
                           h: float = 1e-6) -> dict | list:
    """Central differences of the scalar ``f()`` w.r.t. every parameter entry.

    ``f`` reads the parameters' current values; each entry is nudged in place
    and restored.  Returns gradients in the same container shape as ``params``.
    """
    keyed = isinstance(params, Mapping)
    items = list(params.items()) if keyed else list(enumerate(params))
    out = {}
    for key, p in items:
        g = np.zeros(p.value.shape, dtype=np.float64)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f())
            flat[k] = orig - h
            fm = float(f())
            flat[k] = orig
            gflat[k] = (fp - fm) / (2.0 * h)
        out[key] = g
    return out if keyed else [out[k] for k, _ in items]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Norm-wise relative error ||a - n|| / max(||a|| + ||n||, floor).

    The floor keeps parameters whose true gradient is zero (e.g. the key bias,
    which softmax ignores) from turning rounding noise into a large ratio.
    """
    num = float(np.linalg.norm(np.asarray(analytic, np.float64) - numeric))
    den = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    return num / max(den, floor)
