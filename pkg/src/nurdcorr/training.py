"""Self-supervised training: synthetic distortion pairs, the three losses, SGD.

Per pair the network sees (original, distorted) and predicts vec1
(original->distorted) and vec2 (distorted->original).  The objective is

    w_l1 * L1(vec1, gt)
  + w_smooth * (Ls(vec1) + Ls(vec2))
  + w_sim * (Lsim(warp(original, vec1), distorted) + Lsim(warp(distorted, vec2), original))

averaged over the batch.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .distortion import (DistortionGenConfig, DistortionVector, generate_gt_vector, warp_array,
                         warp_grad_shifts, warp_frame)
from .frames import BScanFrame, FrameSequence
from .model import (ModelConfig, backward_tokens, forward_tokens, init_params, prepare_tokens,
                    save_model)
from .numerics import Parameter

log = logging.getLogger(__name__)


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    w_l1: float = 1.0
    w_smooth: float = 0.1
    w_sim: float = 0.1

    def validate(self) -> None:
        ws = (self.w_l1, self.w_smooth, self.w_sim)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError(f"loss weights must be >= 0 with at least one > 0, got {ws}")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch: int = 24
    epochs: int = 200
    seed: int = 0
    gen: DistortionGenConfig = field(default_factory=DistortionGenConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0
    max_steps: int = 0
    circular_smooth: bool = False
    fixed_pairs: bool = False

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.max_steps < 0 or self.checkpoint_every < 0:
            raise ValueError("max_steps and checkpoint_every must be >= 0")
        self.gen.validate()
        self.weights.validate()


# ---------------------------------------------------------------- losses (array level)

def l1_and_grad(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise LossError(f"length mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    n = pred.shape[-1]
    return np.abs(diff).mean(axis=-1), np.sign(diff) / n


def smooth_and_grad(pred: np.ndarray, circular: bool = False):
    n = pred.shape[-1]
    if n < 2:
        raise LossError("smoothness needs at least 2 entries")
    if circular:
        diff = pred - np.roll(pred, -1, axis=-1)
        s = np.sign(diff) / n
        return np.abs(diff).mean(axis=-1), s - np.roll(s, 1, axis=-1)
    diff = pred[..., :-1] - pred[..., 1:]
    s = np.sign(diff) / (n - 1)
    grad = np.zeros_like(pred)
    grad[..., :-1] += s
    grad[..., 1:] -= s
    return np.abs(diff).mean(axis=-1), grad


def similarity_and_grad(pred_pixels: np.ndarray, target_pixels: np.ndarray):
    """A-line-mean L1 between two frames; gradient w.r.t. ``pred_pixels``."""
    if pred_pixels.shape != target_pixels.shape:
        raise LossError(f"shape mismatch: {pred_pixels.shape} vs {target_pixels.shape}")
    n, m = pred_pixels.shape[-2:]
    diff = pred_pixels.mean(axis=-1) - target_pixels.mean(axis=-1)
    grad = np.broadcast_to((np.sign(diff) / (n * m))[..., None], pred_pixels.shape)
    return np.abs(diff).mean(axis=-1), grad


# ---------------------------------------------------------------- losses (public)

def _vec(v) -> np.ndarray:
    return np.asarray(v.shifts if isinstance(v, DistortionVector) else v, np.float64)


def _pix(f) -> np.ndarray:
    return np.asarray(f.pixels if isinstance(f, BScanFrame) else f, np.float64)


def loss_l1(pred, gt) -> float:
    """Mean absolute error between predicted and ground-truth vectors."""
    return float(l1_and_grad(_vec(pred), _vec(gt))[0])


def loss_smooth(pred, circular: bool = False) -> float:
    """Mean |d_i - d_{i+1}| over consecutive A-lines (no wrap term unless ``circular``)."""
    return float(smooth_and_grad(_vec(pred), circular)[0])


def loss_similarity(pred_frame, target_frame) -> float:
    """Mean over A-lines of |mean depth intensity difference|."""
    return float(similarity_and_grad(_pix(pred_frame), _pix(target_frame))[0])


# ---------------------------------------------------------------- pairs

def build_pair(original: BScanFrame, gen: DistortionGenConfig, rng: np.random.Generator):
    gt = generate_gt_vector(gen, original.n_alines, rng)
    return original, warp_frame(original, gt), gt


def stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dtype = nx.get_dtype()
    orig = np.stack([p[0].pixels for p in pairs]).astype(dtype)
    dist = np.stack([p[1].pixels for p in pairs]).astype(dtype)
    gt = np.stack([p[2].shifts for p in pairs]).astype(dtype)
    return orig, dist, gt


# ---------------------------------------------------------------- objective

def objective(params: dict[str, Parameter], cfg: ModelConfig, orig: np.ndarray,
              dist: np.ndarray, gt: np.ndarray, weights: LossWeights,
              circular_smooth: bool = False, backward: bool = True) -> dict:
    """Batch-mean loss terms; with ``backward`` the gradients are accumulated into params."""
    tokens = prepare_tokens(orig, dist)
    out, cache = forward_tokens(params, cfg, tokens, training=backward)
    v1, v2 = out[..., 0], out[..., 1]
    b = orig.shape[0]

    l1, g_l1 = l1_and_grad(v1, gt)
    s1, g_s1 = smooth_and_grad(v1, circular_smooth)
    s2, g_s2 = smooth_and_grad(v2, circular_smooth)
    new_dist = warp_array(orig, v1)
    new_orig = warp_array(dist, v2)
    sim1, g_p1 = similarity_and_grad(new_dist, dist)
    sim2, g_p2 = similarity_and_grad(new_orig, orig)

    total = weights.w_l1 * l1 + weights.w_smooth * (s1 + s2) + weights.w_sim * (sim1 + sim2)
    result = {"l1": float(l1.mean()), "smooth": float((s1 + s2).mean()),
              "sim": float((sim1 + sim2).mean()), "total": float(total.mean())}
    if backward:
        g_sim1 = (g_p1 * warp_grad_shifts(orig, v1)).sum(axis=-1)
        g_sim2 = (g_p2 * warp_grad_shifts(dist, v2)).sum(axis=-1)
        gv1 = weights.w_l1 * g_l1 + weights.w_smooth * g_s1 + weights.w_sim * g_sim1
        gv2 = weights.w_smooth * g_s2 + weights.w_sim * g_sim2
        grad_out = np.stack([gv1, gv2], axis=-1).astype(out.dtype) / out.dtype.type(b)
        backward_tokens(params, cfg, cache, grad_out)
    return result


def train_step(params: dict[str, Parameter], cfg: ModelConfig, pairs, weights: LossWeights,
               lr: float, circular_smooth: bool = False) -> dict:
    """One SGD step on a batch of (original, distorted, gt) pairs; returns the loss terms."""
    if not pairs:
        raise ValueError("empty batch")
    orig, dist, gt = stack_pairs(pairs)
    nx.zero_grads(params)
    losses = objective(params, cfg, orig, dist, gt, weights, circular_smooth)
    nx.sgd_step(params, lr)
    return losses


# ---------------------------------------------------------------- loop

def train_loop(cfg: TrainConfig, model_cfg: ModelConfig, dataset: FrameSequence, out_path,
               log_path=None, params: dict[str, Parameter] | None = None,
               progress=None) -> dict[str, Parameter]:
    """Train from scratch (or from ``params``); writes the checkpoint and a CSV loss log."""
    cfg.validate()
    model_cfg.validate()
    if len(dataset) < 1:
        raise ValueError("empty dataset")
    if dataset.shape != (model_cfg.n_alines, model_cfg.n_points):
        raise ValueError(
            f"dataset frames {dataset.shape} do not match model "
            f"({model_cfg.n_alines}, {model_cfg.n_points})")
    root = nx.make_rng(cfg.seed)
    init_rng, order_rng, pair_rng = (nx.spawn_rng(root) for _ in range(3))
    if params is None:
        params = init_params(model_cfg, init_rng)
    out_path = Path(out_path)
    log_path = Path(log_path) if log_path else out_path.with_suffix(".csv")

    fixed = None
    if cfg.fixed_pairs:
        fixed = [build_pair(f, cfg.gen, pair_rng) for f in dataset]

    step = 0
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l1", "smooth", "sim", "total"])
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(len(dataset))
            for start in range(0, len(order), cfg.batch):
                idx = order[start:start + cfg.batch]
                if fixed is not None:
                    pairs = [fixed[i] for i in idx]
                else:
                    pairs = [build_pair(dataset[i], cfg.gen, pair_rng) for i in idx]
                losses = train_step(params, model_cfg, pairs, cfg.weights, cfg.lr,
                                    cfg.circular_smooth)
                step += 1
                writer.writerow([step] + [f"{losses[k]:.6g}" for k in ("l1", "smooth", "sim", "total")])
                if not math.isfinite(losses["total"]):
                    raise FloatingPointError(f"loss diverged at step {step}")
                if progress is not None:
                    progress(step, epoch, losses)
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_model(params, model_cfg, out_path)
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            if cfg.max_steps and step >= cfg.max_steps:
                break
    save_model(params, model_cfg, out_path)
    log.info("trained %d steps, final total loss %.6g", step, losses["total"])
    return params
