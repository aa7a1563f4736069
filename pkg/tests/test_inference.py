import numpy as np
import pytest

from nurdcorr import numerics as nx
from nurdcorr.distortion import DistortionVector, warp_frame
from nurdcorr.frames import BScanFrame, FrameSequence, PhantomConfig, generate_phantom
from nurdcorr.inference import (Model, StreamCorrector, TimingReport, bench, correct_sequence,
                                default_decay, predict_vector)
from nurdcorr.model import ConfigError, ModelConfig, init_params, zero_head

from helpers import random_frame


def zero_model(cfg=None):
    cfg = cfg or ModelConfig(n_alines=32, n_points=8, embed_dim=16, n_heads=2, n_blocks=1, mlp_hidden=16)
    params = init_params(cfg, nx.make_rng(0))
    zero_head(params)
    return Model(params, cfg)


def gt_predictor(vectors):
    """Replays known per-frame vectors in stream order (frame 1 onwards)."""
    it = iter(vectors)
    return lambda prev, cur: next(it)


def test_predict_vector(rng):
    m = zero_model()
    a, b = random_frame(rng, 32, 8), random_frame(rng, 32, 8)
    assert not predict_vector(m, a, b).shifts.any()
    m.params["head.b"].value[:] = [1.5, -2.0]
    assert np.all(m(a, b).shifts == 1.5)
    with pytest.raises(ConfigError):
        predict_vector(m, random_frame(rng, 16, 8), random_frame(rng, 16, 8))


def test_single_frame_passthrough(rng):
    seq = FrameSequence([random_frame(rng, 32, 8)])
    out, vecs = correct_sequence(zero_model(), seq)
    assert out[0].pixels.tobytes() == seq[0].pixels.tobytes()
    assert len(vecs) == 1 and not vecs[0].shifts.any()


@pytest.mark.parametrize("ref_mode", ["corrected", "raw"])
def test_zero_model_repeated_frames(rng, ref_mode):
    f = random_frame(rng, 32, 8)
    seq = FrameSequence([f] * 4)
    out, _ = correct_sequence(zero_model(), seq, decay=0.0, ref_mode=ref_mode)
    assert out.to_array().tobytes() == seq.to_array().tobytes()


def _integer_shift_sequence(ks):
    base = generate_phantom(PhantomConfig(n_alines=64, n_points=16, speckle_strength=0.0), nx.make_rng(0))
    frames = [warp_frame(base, DistortionVector.constant(64, float(k))) for k in ks]
    return base, FrameSequence(frames)


def test_gt_correction_corrected_reference_is_exact():
    ks = [0, 3, -2, 5, 5, -7, 1]
    base, seq = _integer_shift_sequence(ks)
    # against a corrected reference the relative distortion is the absolute one
    vecs = [DistortionVector.constant(64, float(k)) for k in ks[1:]]
    out, applied = correct_sequence(gt_predictor(vecs), seq)
    for f in out:
        assert f.pixels.tobytes() == base.pixels.tobytes()
    assert [float(v.shifts[0]) for v in applied] == [float(k) for k in ks]


def test_gt_correction_raw_reference_accumulates():
    ks = [0, 3, -2, 5, 5, -7, 1]
    base, seq = _integer_shift_sequence(ks)
    # raw previous frame as reference: only the step k_n - k_{n-1} is observable
    steps = [DistortionVector.constant(64, float(b - a)) for a, b in zip(ks, ks[1:])]
    out, applied = correct_sequence(gt_predictor(steps), seq, ref_mode="raw")
    for f in out:
        assert f.pixels.tobytes() == base.pixels.tobytes()
    np.testing.assert_array_equal([v.shifts[0] for v in applied], ks)


def test_stream_corrector_state_and_validation(rng):
    s = StreamCorrector(zero_model())
    assert s.decay == default_decay("corrected") == 0.0
    assert StreamCorrector(zero_model(), ref_mode="raw").decay == 1.0
    for _ in range(3):
        s.push(random_frame(rng, 32, 8))
    assert s.state.frame_counter == 3
    with pytest.raises(ValueError):
        StreamCorrector(zero_model(), ref_mode="sideways")
    with pytest.raises(ValueError):
        StreamCorrector(zero_model(), decay=2.0)


def test_output_shape_matches_input(rng):
    seq = FrameSequence([random_frame(rng, 32, 8) for _ in range(5)])
    out, vecs = correct_sequence(zero_model(), seq)
    assert out.to_array().shape == seq.to_array().shape and len(vecs) == 5


def test_bench_report(rng):
    seq = FrameSequence([random_frame(rng, 32, 8) for _ in range(4)])
    rep = bench(zero_model(), seq, repeats=2)
    assert isinstance(rep, TimingReport)
    assert rep.n_samples == 6
    assert [name for name, _ in rep.rows()] == list(TimingReport.CATEGORIES)
    assert rep.total_ms.mean >= rep.inference_ms.mean
    assert rep.total_ms.mean >= rep.prepost_ms.mean
    assert rep.fps.mean == pytest.approx(1000 / rep.total_ms.mean)
    assert rep.total_ms.std >= 0
    lines = rep.csv().splitlines()
    assert lines[0] == "category,mean_ms,std_ms" and len(lines) == 5
    assert len(rep.table().splitlines()) == 5
    with pytest.raises(ValueError):
        bench(zero_model(), FrameSequence([seq[0]]))
