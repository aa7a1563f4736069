"""Streaming NURD correction and per-frame latency benchmarking."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .distortion import DistortionVector, compose_cumulative, correct_frame
from .frames import BScanFrame, FrameSequence
from .model import ConfigError, ModelConfig, forward_tokens, prepare_tokens, _to_vector
from .numerics import Parameter

REF_MODES = ("corrected", "raw")

Predictor = Callable[[BScanFrame, BScanFrame], DistortionVector]


@dataclass
class Model:
    """Trained parameters bundled with their config."""
    params: dict[str, Parameter]
    cfg: ModelConfig

    def __call__(self, prev: BScanFrame, cur: BScanFrame) -> DistortionVector:
        return predict_vector(self, prev, cur)


def predict_vector(model: Model, prev: BScanFrame, cur: BScanFrame) -> DistortionVector:
    """Distortion of ``cur`` relative to ``prev`` (the network's first output only)."""
    cfg = model.cfg
    for f in (prev, cur):
        if f.shape != (cfg.n_alines, cfg.n_points):
            raise ConfigError(
                f"frame {f.n_alines}x{f.n_points} does not match model "
                f"N={cfg.n_alines}, M={cfg.n_points}")
    out, _ = forward_tokens(model.params, cfg, prepare_tokens(prev, cur))
    return _to_vector(out[:, 0])


def default_decay(ref_mode: str) -> float:
    # a corrected reference already carries the history, so accumulating on top
    # of it would count earlier distortions twice
    return 0.0 if ref_mode == "corrected" else 1.0


@dataclass
class CorrectionState:
    cumulative: DistortionVector
    decay: float
    frame_counter: int = 0


class StreamCorrector:
    """Single-pass corrector: feed frames in order, get corrected frames back.

    State is one reference frame plus the cumulative vector.
    """

    def __init__(self, predictor: Union[Model, Predictor], decay: float | None = None,
                 ref_mode: str = "corrected"):
        if ref_mode not in REF_MODES:
            raise ValueError(f"ref_mode must be one of {REF_MODES}, got {ref_mode!r}")
        self.predict = predictor
        self.ref_mode = ref_mode
        self.decay = default_decay(ref_mode) if decay is None else float(decay)
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")
        self.state: CorrectionState | None = None
        self._ref: BScanFrame | None = None

    def push(self, frame: BScanFrame) -> tuple[BScanFrame, DistortionVector]:
        if self.state is None:
            self.state = CorrectionState(DistortionVector.zeros(frame.n_alines), self.decay, 1)
            self._ref = frame
            return frame, self.state.cumulative
        d = self.predict(self._ref, frame)
        c = compose_cumulative(self.state.cumulative, d, self.decay)
        corrected = correct_frame(frame, c)
        self.state.cumulative = c
        self.state.frame_counter += 1
        self._ref = corrected if self.ref_mode == "corrected" else frame
        return corrected, c


def correct_sequence(predictor: Union[Model, Predictor], seq: FrameSequence,
                     decay: float | None = None, ref_mode: str = "corrected"):
    """Correct a sequence frame by frame; returns (corrected sequence, applied vectors).

    ``predictor`` is a :class:`Model` or any ``(prev, cur) -> DistortionVector``
    callable, e.g. one that looks up ground-truth vectors.  With the default
    corrected reference ``decay`` defaults to 0; with ``ref_mode="raw"`` per-step
    vectors are relative to the raw previous frame and are accumulated (decay 1).
    """
    stream = StreamCorrector(predictor, decay, ref_mode)
    frames, vectors = [], []
    for f in seq:
        out, c = stream.push(f)
        frames.append(out)
        vectors.append(c)
    return FrameSequence(frames, seq.origin), vectors


# ---------------------------------------------------------------- benchmarking

@dataclass
class Stat:
    mean: float
    std: float

    def __str__(self):
        return f"{self.mean:.2f}±{self.std:.2f}"


@dataclass
class TimingReport:
    prepost_ms: Stat
    inference_ms: Stat
    total_ms: Stat
    fps: Stat
    n_samples: int

    CATEGORIES = ("pre- & post-processing", "Model inference", "Total time/frame", "Frame per second")

    def rows(self):
        return list(zip(self.CATEGORIES, (self.prepost_ms, self.inference_ms, self.total_ms, self.fps)))

    def table(self) -> str:
        width = max(len(c) for c in self.CATEGORIES)
        lines = [f"{'category':<{width}}  {'mean':>10}  {'std':>8}"]
        for name, st in self.rows():
            unit = "fps" if name == "Frame per second" else "ms"
            lines.append(f"{name:<{width}}  {st.mean:>10.2f}  {st.std:>8.2f}  {unit}")
        return "\n".join(lines)

    def csv(self) -> str:
        lines = ["category,mean_ms,std_ms"]
        for name, st in self.rows():
            lines.append(f"{name},{st.mean:.6g},{st.std:.6g}")
        return "\n".join(lines) + "\n"


def _stat(xs) -> Stat:
    xs = list(xs)
    return Stat(statistics.fmean(xs), statistics.pstdev(xs) if len(xs) > 1 else 0.0)


def bench(model: Model, seq: FrameSequence, repeats: int = 1) -> TimingReport:
    """Time the streaming pipeline per frame, split into network vs everything else."""
    if len(seq) < 2:
        raise ValueError("bench needs at least 2 frames")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    cfg = model.cfg
    clock = time.perf_counter
    prepost, infer, total = [], [], []
    for _ in range(repeats):
        ref = seq[0]
        c = DistortionVector.zeros(cfg.n_alines)
        for frame in seq.frames[1:]:
            t0 = clock()
            tokens = prepare_tokens(ref, frame)
            t1 = clock()
            out, _ = forward_tokens(model.params, cfg, tokens)
            t2 = clock()
            d = _to_vector(out[:, 0])
            c = compose_cumulative(c, d, 0.0)
            ref = correct_frame(frame, c)
            t3 = clock()
            infer.append((t2 - t1) * 1e3)
            prepost.append(((t1 - t0) + (t3 - t2)) * 1e3)
            total.append((t3 - t0) * 1e3)
    total_stat = _stat(total)
    fps = [1e3 / t for t in total]
    return TimingReport(_stat(prepost), _stat(infer), total_stat,
                        Stat(1e3 / total_stat.mean, statistics.pstdev(fps) if len(fps) > 1 else 0.0),
                        len(total))
