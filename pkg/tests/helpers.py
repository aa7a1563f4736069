"""Shared oracles for the test-suite."""
import numpy as np

from nurdcorr import numerics as nx
from nurdcorr.distortion import DistortionGenConfig
from nurdcorr.frames import BScanFrame, PhantomConfig, generate_phantom
from nurdcorr.model import ModelConfig, init_params
from nurdcorr.training import LossWeights, build_pair, objective, stack_pairs


def random_frame(rng, n=16, m=8):
    return BScanFrame(rng.uniform(0, 1, size=(n, m)))


def end_to_end_grad_errors(seed: int, batch: int = 2) -> dict[str, float]:
    """Per-tensor relative error of the analytic total-loss gradient vs central differences.

    Runs in float64 on the tiny config; norms and biases are perturbed away from
    their init values so every code path carries signal.
    """
    with nx.float64_mode():
        cfg = ModelConfig.tiny()
        rng = nx.make_rng(seed)
        params = init_params(cfg, rng)
        for p in params.values():
            p.value += rng.normal(0, 0.1, p.value.shape)
        pc = PhantomConfig(n_alines=cfg.n_alines, n_points=cfg.n_points, speckle_strength=0.3)
        gen = DistortionGenConfig(n_components=2, max_frequency=2, max_amplitude=1.5)
        pairs = [build_pair(generate_phantom(pc, rng), gen, rng) for _ in range(batch)]
        orig, dist, gt = stack_pairs(pairs)
        w = LossWeights(1.0, 0.5, 0.5)
        nx.zero_grads(params)
        objective(params, cfg, orig, dist, gt, w)
        numeric = nx.finite_difference_grad(
            lambda: objective(params, cfg, orig, dist, gt, w, backward=False)["total"], params, 1e-5)
        return {k: nx.relative_error(params[k].grad, numeric[k]) for k in params}
