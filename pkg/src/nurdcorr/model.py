"""Stacked cross-attention network over A-line tokens.

Token i is the concatenation of A-line i of the reference frame and A-line i
of the moving frame (2M values).  Tokens are embedded to E dims, passed
through B pre-norm blocks ``x += MHA(LN(x)); x += MLP(LN(x))``, normalised
once more and mapped per token to two outputs: column 0 is the
original->distorted vector, column 1 the distorted->original vector.

There is no positional encoding, so the network is equivariant to any
permutation of A-lines applied to both frames.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import numerics as nx
from .distortion import DistortionVector
from .frames import BScanFrame, BadMagicError, ContainerError, TruncatedError, VersionError
from .numerics import Parameter

OCTW_MAGIC = b"OCTW"
OCTW_VERSION = 1
_OCTW_HEADER = struct.Struct("<4sH6I")
STANDARDIZE_EPS = 1e-3


class ConfigError(ValueError):
    pass


class IntegrityError(ContainerError):
    pass


@dataclass
class ModelConfig:
    n_alines: int = 256
    n_points: int = 64
    embed_dim: int = 128
    n_heads: int = 4
    n_blocks: int = 5
    mlp_hidden: int = 256

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(n_alines=1024, n_points=512, embed_dim=1024, n_heads=4,
                   n_blocks=5, mlp_hidden=2048)

    @classmethod
    def tiny(cls) -> "ModelConfig":
        return cls(n_alines=8, n_points=4, embed_dim=16, n_heads=2, n_blocks=2, mlp_hidden=32)

    def validate(self) -> None:
        if self.embed_dim % self.n_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.embed_dim <= self.n_points:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must exceed n_points {self.n_points}")
        if self.n_blocks < 1 or self.mlp_hidden < 1:
            raise ConfigError("n_blocks and mlp_hidden must be >= 1")
        if self.n_alines < 8 or self.n_points < 4:
            raise ConfigError("frames must be at least 8 x 4")


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int | None]]:
    """(name, shape, fan_in) in checkpoint order; fan_in None marks bias/norm tensors."""
    e, h, m2 = cfg.embed_dim, cfg.mlp_hidden, 2 * cfg.n_points
    layout = [("embed.W", (m2, e), m2), ("embed.b", (e,), None)]
    for k in range(cfg.n_blocks):
        p = f"block{k}."
        layout += [
            (p + "ln1.gamma", (e,), None), (p + "ln1.beta", (e,), None),
            (p + "W_Q", (e, e), e), (p + "b_Q", (e,), None),
            (p + "W_K", (e, e), e), (p + "b_K", (e,), None),
            (p + "W_V", (e, e), e), (p + "b_V", (e,), None),
            (p + "W_O", (e, e), e), (p + "b_O", (e,), None),
            (p + "ln2.gamma", (e,), None), (p + "ln2.beta", (e,), None),
            (p + "W_1", (e, h), e), (p + "b_1", (h,), None),
            (p + "W_2", (h, e), h), (p + "b_2", (e,), None),
        ]
    layout += [("final.gamma", (e,), None), ("final.beta", (e,), None),
             ("head.W", (e, 2), e), ("head.b", (2,), None)]
    return layout


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Parameter]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0; norm gains 1."""
    cfg.validate()
    dtype = nx.get_dtype()
    params = {}
    for name, shape, fan_in in param_shapes(cfg):
        if fan_in is not None:
            bound = 1.0 / math.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif name.endswith("gamma"):
            value = np.ones(shape, dtype)
        else:
            value = np.zeros(shape, dtype)
        params[name] = Parameter(value)
    return params


def zero_head(params: dict[str, Parameter]) -> None:
    """Zero the output head so the network predicts zero vectors."""
    params["head.W"].value[...] = 0
    params["head.b"].value[...] = 0


def cast_params(params: dict[str, Parameter], dtype) -> dict[str, Parameter]:
    return {k: Parameter(p.value.astype(dtype)) for k, p in params.items()}


# ---------------------------------------------------------------- tokens

def tokenize(ref: BScanFrame | np.ndarray, moving: BScanFrame | np.ndarray) -> np.ndarray:
    """Concatenate A-line i of ``ref`` and ``moving`` into token i (N x 2M)."""
    r = ref.pixels if isinstance(ref, BScanFrame) else np.asarray(ref)
    m = moving.pixels if isinstance(moving, BScanFrame) else np.asarray(moving)
    if r.shape != m.shape:
        raise ConfigError(f"frame shape mismatch: {r.shape} vs {m.shape}")
    return np.concatenate([r, m], axis=-1).astype(nx.get_dtype(), copy=False)


def standardize_frame(pixels: np.ndarray, eps: float = STANDARDIZE_EPS) -> np.ndarray:
    """Z-score every depth bin across A-lines (per frame).

    Removes the angle-independent profile shared by all A-lines so tokens carry
    only their angular variation.  Statistics over A-lines are permutation
    invariant, so the network stays permutation equivariant.
    """
    x = np.asarray(pixels, dtype=np.float64)
    mean = x.mean(axis=-2, keepdims=True)
    std = x.std(axis=-2, keepdims=True)
    return ((x - mean) / (std + eps)).astype(nx.get_dtype())


def prepare_tokens(ref: BScanFrame | np.ndarray, moving: BScanFrame | np.ndarray) -> np.ndarray:
    """Standardise both frames, then tokenize."""
    r = ref.pixels if isinstance(ref, BScanFrame) else ref
    m = moving.pixels if isinstance(moving, BScanFrame) else moving
    return tokenize(standardize_frame(r), standardize_frame(m))


def attention_head(q: np.ndarray, k: np.ndarray, v: np.ndarray, return_probs: bool = False):
    """softmax(q k^T / sqrt(d_k)) v for one head (or a stack of heads)."""
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise nx.DimensionError(f"attention shapes {q.shape}, {k.shape}, {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    probs = nx.softmax_rows((q @ np.swapaxes(k, -1, -2)) * q.dtype.type(scale))
    out = probs @ v
    return (out, probs) if return_probs else out


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    b, n, e = x.shape
    return x.reshape(b, n, h, e // h).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


# ---------------------------------------------------------------- forward / backward

def forward_tokens(params: dict[str, Parameter], cfg: ModelConfig, tokens: np.ndarray,
                   training: bool = False):
    """Run the network on (batch, N, 2M) tokens; returns ((batch, N, 2), cache | None)."""
    squeeze = tokens.ndim == 2
    x_in = tokens[None] if squeeze else tokens
    if x_in.shape[-1] != 2 * cfg.n_points or x_in.shape[-2] != cfg.n_alines:
        raise ConfigError(
            f"tokens {x_in.shape[-2]}x{x_in.shape[-1]} do not match model "
            f"N={cfg.n_alines}, 2M={2 * cfg.n_points}")
    P = {k: p.value for k, p in params.items()}
    h = cfg.n_heads
    scale = x_in.dtype.type(1.0 / math.sqrt(cfg.head_dim))
    cache = {"tokens": x_in, "blocks": []} if training else None

    x = nx.linear(x_in, P["embed.W"], P["embed.b"])
    for k in range(cfg.n_blocks):
        p = f"block{k}."
        ln1, ln1_c = nx.layer_norm_rows(x, P[p + "ln1.gamma"], P[p + "ln1.beta"], return_cache=True)
        q = _split_heads(nx.linear(ln1, P[p + "W_Q"], P[p + "b_Q"]), h)
        kk = _split_heads(nx.linear(ln1, P[p + "W_K"], P[p + "b_K"]), h)
        v = _split_heads(nx.linear(ln1, P[p + "W_V"], P[p + "b_V"]), h)
        probs = nx.softmax_rows((q @ np.swapaxes(kk, -1, -2)) * scale)
        concat = _merge_heads(probs @ v)
        x = x + nx.linear(concat, P[p + "W_O"], P[p + "b_O"])

        ln2, ln2_c = nx.layer_norm_rows(x, P[p + "ln2.gamma"], P[p + "ln2.beta"], return_cache=True)
        pre = nx.linear(ln2, P[p + "W_1"], P[p + "b_1"])
        act = nx.mlp_activation(pre)
        x = x + nx.linear(act, P[p + "W_2"], P[p + "b_2"])
        if training:
            cache["blocks"].append(dict(ln1=ln1, ln1_c=ln1_c, q=q, k=kk, v=v, probs=probs,
                                        concat=concat, ln2=ln2, ln2_c=ln2_c, pre=pre, act=act))

    xf, xf_c = nx.layer_norm_rows(x, P["final.gamma"], P["final.beta"], return_cache=True)
    out = nx.linear(xf, P["head.W"], P["head.b"])
    if training:
        cache.update(xf=xf, xf_c=xf_c, squeeze=squeeze)
    return (out[0] if squeeze else out), cache


def backward_tokens(params: dict[str, Parameter], cfg: ModelConfig, cache, grad_out: np.ndarray):
    """Accumulate parameter gradients for upstream gradient ``grad_out`` (same shape as output).

    Returns the gradient w.r.t. the input tokens.
    """
    if cache is None:
        raise RuntimeError("backward needs the cache from a training-mode forward")
    g = grad_out[None] if cache["squeeze"] else grad_out
    P = {k: p.value for k, p in params.items()}
    G = {k: p.grad for k, p in params.items()}
    h = cfg.n_heads
    scale = g.dtype.type(1.0 / math.sqrt(cfg.head_dim))

    dxf, dW, db = nx.linear_backward(cache["xf"], P["head.W"], g)
    G["head.W"] += dW
    G["head.b"] += db
    dx, dgm, dbt = nx.layer_norm_rows_backward(cache["xf_c"], P["final.gamma"], dxf)
    G["final.gamma"] += dgm
    G["final.beta"] += dbt

    for k in reversed(range(cfg.n_blocks)):
        p = f"block{k}."
        c = cache["blocks"][k]
        # MLP branch
        dact, dW, db = nx.linear_backward(c["act"], P[p + "W_2"], dx)
        G[p + "W_2"] += dW
        G[p + "b_2"] += db
        dpre = nx.mlp_activation_backward(c["pre"], dact)
        dln2, dW, db = nx.linear_backward(c["ln2"], P[p + "W_1"], dpre)
        G[p + "W_1"] += dW
        G[p + "b_1"] += db
        dres, dgm, dbt = nx.layer_norm_rows_backward(c["ln2_c"], P[p + "ln2.gamma"], dln2)
        G[p + "ln2.gamma"] += dgm
        G[p + "ln2.beta"] += dbt
        dx = dx + dres
        # attention branch
        dconcat, dW, db = nx.linear_backward(c["concat"], P[p + "W_O"], dx)
        G[p + "W_O"] += dW
        G[p + "b_O"] += db
        dheads = _split_heads(dconcat, h)
        dv = np.swapaxes(c["probs"], -1, -2) @ dheads
        dprobs = dheads @ np.swapaxes(c["v"], -1, -2)
        dscores = nx.softmax_rows_backward(c["probs"], dprobs) * scale
        dq = dscores @ c["k"]
        dk = np.swapaxes(dscores, -1, -2) @ c["q"]
        dln1 = np.zeros_like(c["ln1"])
        for name, dpart in (("Q", dq), ("K", dk), ("V", dv)):
            dl, dW, db = nx.linear_backward(c["ln1"], P[p + "W_" + name], _merge_heads(dpart))
            G[p + "W_" + name] += dW
            G[p + "b_" + name] += db
            dln1 += dl
        dres, dgm, dbt = nx.layer_norm_rows_backward(c["ln1_c"], P[p + "ln1.gamma"], dln1)
        G[p + "ln1.gamma"] += dgm
        G[p + "ln1.beta"] += dbt
        dx = dx + dres

    dtok, dW, db = nx.linear_backward(cache["tokens"], P["embed.W"], dx)
    G["embed.W"] += dW
    G["embed.b"] += db
    return dtok[0] if cache["squeeze"] else dtok


def forward(params: dict[str, Parameter], cfg: ModelConfig, ref: BScanFrame, moving: BScanFrame,
            training: bool = False):
    """Predict (vec1, vec2[, cache]) for a reference/moving frame pair."""
    _check_frames(cfg, ref, moving)
    out, cache = forward_tokens(params, cfg, prepare_tokens(ref, moving), training)
    vec1, vec2 = _to_vector(out[:, 0]), _to_vector(out[:, 1])
    return (vec1, vec2, cache) if training else (vec1, vec2)


def backward(params: dict[str, Parameter], cfg: ModelConfig, cache, grad_vec1, grad_vec2):
    if cache is None:
        raise RuntimeError("backward needs the cache from a training-mode forward")
    grad = np.stack([np.asarray(grad_vec1), np.asarray(grad_vec2)], axis=-1)
    return backward_tokens(params, cfg, cache, grad.astype(cache["tokens"].dtype))


def _to_vector(col: np.ndarray) -> DistortionVector:
    n = col.size
    # an untrained network may emit anything; keep it inside the valid range
    return DistortionVector(np.clip(col, -n / 2, n / 2))


def _check_frames(cfg: ModelConfig, *frames: BScanFrame) -> None:
    for f in frames:
        if f.shape != (cfg.n_alines, cfg.n_points):
            raise ConfigError(
                f"frame {f.n_alines}x{f.n_points} does not match model "
                f"N={cfg.n_alines}, M={cfg.n_points}")


# ---------------------------------------------------------------- checkpoint

def save_model(params: dict[str, Parameter], cfg: ModelConfig, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_OCTW_HEADER.pack(OCTW_MAGIC, OCTW_VERSION, cfg.n_alines, cfg.n_points,
                                   cfg.embed_dim, cfg.n_heads, cfg.n_blocks, cfg.mlp_hidden))
        for name, shape, _ in param_shapes(cfg):
            value = params[name].value
            rows, cols = (1, shape[0]) if len(shape) == 1 else shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.asarray(value, "<f4").tobytes())


def load_model(path) -> tuple[dict[str, Parameter], ModelConfig]:
    data = Path(path).read_bytes()
    if data[:4] != OCTW_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {OCTW_MAGIC!r}")
    if len(data) < _OCTW_HEADER.size:
        raise TruncatedError(f"{path}: header truncated")
    _, version, *dims = _OCTW_HEADER.unpack_from(data)
    if version != OCTW_VERSION:
        raise VersionError(f"{path}: unsupported OCTW version {version}")
    cfg = ModelConfig(*dims)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise IntegrityError(f"{path}: invalid header config: {exc}") from exc
    pos = _OCTW_HEADER.size
    params = {}
    for name, shape, _ in param_shapes(cfg):
        if pos + 8 > len(data):
            raise TruncatedError(f"{path}: truncated before tensor {name}")
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        want = (1, shape[0]) if len(shape) == 1 else shape
        if (rows, cols) != want:
            raise IntegrityError(
                f"{path}: tensor {name} is {rows}x{cols}, header config implies {want[0]}x{want[1]}")
        nbytes = rows * cols * 4
        if pos + nbytes > len(data):
            raise TruncatedError(f"{path}: tensor {name} truncated")
        arr = np.frombuffer(data, "<f4", count=rows * cols, offset=pos).astype(np.float32)
        params[name] = Parameter(arr.reshape(shape).copy())
        pos += nbytes
    if pos != len(data):
        raise IntegrityError(f"{path}: {len(data) - pos} trailing bytes after last tensor")
    return params, cfg


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
