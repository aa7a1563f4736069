import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nurdcorr import numerics as nx
from nurdcorr.distortion import DistortionGenConfig, DistortionVector, warp_frame
from nurdcorr.frames import BScanFrame, FrameSequence, PhantomConfig, generate_sequence
from nurdcorr.model import ModelConfig, init_params, load_model, zero_head
from nurdcorr.training import (LossError, LossWeights, TrainConfig, build_pair, l1_and_grad,
                               loss_l1, loss_similarity, loss_smooth, objective,
                               similarity_and_grad, smooth_and_grad, stack_pairs, train_loop,
                               train_step)

from helpers import random_frame


# ---------------------------------------------------------------- loss values

def test_l1_examples():
    assert loss_l1(np.array([0.0, 0.0]), np.array([1.0, -1.0])) == 1.0
    x = np.array([0.5, -2.0, 3.0])
    assert loss_l1(x, x) == 0.0
    y = np.array([1.0, 1.0, 1.0])
    assert loss_l1(x + 7, y + 7) == pytest.approx(loss_l1(x, y))
    with pytest.raises(LossError):
        loss_l1(np.zeros(2), np.zeros(3))


def test_smooth_examples():
    assert loss_smooth(np.array([0.0, 1.0, 0.0])) == 1.0
    assert loss_smooth(np.array([0.0, 3.0])) == 3.0
    assert loss_smooth(np.full(7, 2.5)) == 0.0
    # no wrap term unless asked for
    assert loss_smooth(np.array([0.0, 1.0, 2.0])) == 1.0
    assert loss_smooth(np.array([0.0, 1.0, 2.0]), circular=True) == pytest.approx(4 / 3)
    with pytest.raises(LossError):
        loss_smooth(np.zeros(1))


def test_similarity_examples(rng):
    assert loss_similarity(np.array([[0.2, 0.4]]), np.array([[0.1, 0.1]])) == pytest.approx(0.2)
    f = random_frame(rng)
    assert loss_similarity(f, f) == 0.0
    shuffled = BScanFrame(np.array([rng.permutation(row) for row in f.pixels]))
    assert loss_similarity(shuffled, f) == pytest.approx(0.0, abs=1e-7)
    with pytest.raises(LossError):
        loss_similarity(np.zeros((2, 2)), np.zeros((3, 2)))


# ---------------------------------------------------------------- loss gradients

def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_l1_and_smooth_gradients(seed):
    r = np.random.default_rng(seed)
    # spacing keeps every entry well away from a tie
    pred = np.cumsum(r.uniform(0.1, 1.0, 12)) * r.choice([-1, 1], 12)
    gt = pred + r.choice([-1, 1], 12) * r.uniform(0.1, 1.0, 12)
    _, g = l1_and_grad(pred, gt)
    assert nx.relative_error(g, _fd(lambda p: l1_and_grad(p, gt)[0], pred)) < 1e-4
    for circ in (False, True):
        _, g = smooth_and_grad(pred, circ)
        assert nx.relative_error(g, _fd(lambda p: smooth_and_grad(p, circ)[0], pred)) < 1e-4


def test_similarity_gradient():
    r = np.random.default_rng(0)
    a, b = r.uniform(0, 1, (6, 4)), r.uniform(0, 1, (6, 4))
    _, g = similarity_and_grad(a, b)
    assert nx.relative_error(g, _fd(lambda x: similarity_and_grad(x, b)[0], a)) < 1e-4


# ---------------------------------------------------------------- pairs and objective

def test_build_pair_deterministic_and_consistent():
    seq = generate_sequence(PhantomConfig(n_alines=32, n_points=8), 1, nx.make_rng(0))
    gen = DistortionGenConfig(max_amplitude=3.0)
    o1, d1, g1 = build_pair(seq[0], gen, nx.make_rng(5))
    o2, d2, g2 = build_pair(seq[0], gen, nx.make_rng(5))
    assert g1 == g2 and d1.pixels.tobytes() == d2.pixels.tobytes()
    assert d1.pixels.tobytes() == warp_frame(o1, g1).pixels.tobytes()
    tiny = DistortionGenConfig(max_amplitude=1e-4)
    _, d, _ = build_pair(seq[0], tiny, nx.make_rng(5))
    assert np.abs(d.pixels - seq[0].pixels).max() < 1e-3


def test_objective_closed_form_at_zero_head():
    cfg = ModelConfig.tiny()
    params = init_params(cfg, nx.make_rng(0))
    zero_head(params)
    seq = generate_sequence(PhantomConfig(n_alines=8, n_points=4), 3, nx.make_rng(1))
    rng = nx.make_rng(2)
    gen = DistortionGenConfig(max_amplitude=2.0)
    pairs = [build_pair(f, gen, rng) for f in seq]
    w = LossWeights(1.0, 0.3, 0.7)
    out = objective(params, cfg, *stack_pairs(pairs), w, backward=False)
    expected = np.mean([w.w_l1 * np.abs(g.shifts).mean()
                        + w.w_sim * (loss_similarity(o, d) + loss_similarity(d, o))
                        for o, d, g in pairs])
    assert out["total"] == pytest.approx(expected, rel=1e-5)
    assert out["smooth"] == 0.0


def test_objective_zero_when_prediction_is_gt():
    # an exact shift predictor: L1-only loss with v1 forced to gt is zero
    cfg = ModelConfig.tiny()
    params = init_params(cfg, nx.make_rng(0))
    zero_head(params)
    gt = np.zeros((1, 8), np.float32)
    o = np.random.default_rng(0).uniform(0, 1, (1, 8, 4)).astype(np.float32)
    out = objective(params, cfg, o, o, gt, LossWeights(1.0, 0.0, 0.0), backward=False)
    assert out["total"] == 0.0


def test_train_step_updates_and_returns_losses():
    cfg = ModelConfig.tiny()
    params = init_params(cfg, nx.make_rng(0))
    before = {k: p.value.copy() for k, p in params.items()}
    seq = generate_sequence(PhantomConfig(n_alines=8, n_points=4), 2, nx.make_rng(1))
    pairs = [build_pair(f, DistortionGenConfig(max_amplitude=2.0), nx.make_rng(i))
             for i, f in enumerate(seq)]
    losses = train_step(params, cfg, pairs, LossWeights(), 1e-2)
    assert set(losses) == {"l1", "smooth", "sim", "total"}
    assert any(not np.array_equal(before[k], p.value) for k, p in params.items())
    assert all(not p.grad.any() for p in params.values())
    with pytest.raises(ValueError):
        train_step(params, cfg, [], LossWeights(), 1e-2)


def test_weights_and_config_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0).validate()
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1).validate()
    with pytest.raises(ValueError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(batch=0).validate()


# ---------------------------------------------------------------- loop

def _small_run(tmp_path, name, **kw):
    model_cfg = ModelConfig(n_alines=16, n_points=8, embed_dim=16, n_heads=2, n_blocks=1, mlp_hidden=16)
    data = generate_sequence(PhantomConfig(n_alines=16, n_points=8), 6, nx.make_rng(0))
    cfg = TrainConfig(lr=1e-3, batch=4, epochs=3, seed=7,
                      gen=DistortionGenConfig(max_amplitude=2.0), **kw)
    out = tmp_path / f"{name}.octw"
    train_loop(cfg, model_cfg, data, out)
    return out, out.with_suffix(".csv")


def test_train_loop_determinism_and_log(tmp_path):
    a, log_a = _small_run(tmp_path, "a")
    b, _ = _small_run(tmp_path, "b")
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.reader(log_a.open()))
    assert rows[0] == ["step", "l1", "smooth", "sim", "total"]
    # 6 frames, batch 4 -> 2 steps per epoch, 3 epochs
    assert len(rows) == 1 + 6
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 7))
    for r in rows[1:]:
        for v in r[1:]:
            digits = v.lstrip("-").split("e")[0].replace(".", "").lstrip("0")
            assert len(digits) <= 6
    params, cfg = load_model(a)
    assert cfg.n_alines == 16


def test_train_loop_max_steps_and_fixed_pairs(tmp_path):
    _, log = _small_run(tmp_path, "m", max_steps=4, fixed_pairs=True)
    assert len(log.read_text().splitlines()) == 1 + 4


def test_train_loop_rejects_mismatch(tmp_path):
    data = FrameSequence([BScanFrame(np.zeros((8, 4)))])
    with pytest.raises(ValueError):
        train_loop(TrainConfig(epochs=1), ModelConfig.tiny(), FrameSequence([BScanFrame(np.zeros((16, 4)))]),
                   tmp_path / "x.octw")
    with pytest.raises(ValueError):
        train_loop(TrainConfig(epochs=0), ModelConfig.tiny(), data, tmp_path / "x.octw")
