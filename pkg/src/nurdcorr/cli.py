"""``nurdcorr`` command line: generate, train, correct, eval, bench.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 shape/config mismatch.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import ConfigFileError, desk_model_config, load_config
from .distortion import (DistortionGenConfig, generate_gt_vector, load_vectors, save_vectors,
                         warp_frame)
from .evaluation import MetricError, mae_vectors, std_series, xcorr_align
from .frames import ContainerError, FrameSequence, generate_sequence, load_sequence, save_sequence
from .inference import Model, bench, correct_sequence
from .model import ConfigError, file_sha256, load_model
from .training import train_loop

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MISMATCH = 0, 2, 3, 4

log = logging.getLogger("nurdcorr")


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


def configure_threads() -> None:
    """Apply NURD_DETERMINISTIC / NURD_THREADS to the BLAS thread pool."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    deterministic = os.environ.get("NURD_DETERMINISTIC", "1") != "0"
    threads = os.environ.get("NURD_THREADS")
    if deterministic:
        threadpool_limits(1)
    elif threads:
        threadpool_limits(int(threads))


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for part in filter(None, text.split(",")):
        if "=" not in part:
            raise UsageError(f"expected key=value in {text!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _read_sequence(path) -> FrameSequence:
    if not Path(path).exists():
        raise FileNotFoundError(f"no such file: {path}")
    return load_sequence(path)


def _read_model(path) -> Model:
    if not Path(path).exists():
        raise FileNotFoundError(f"no such file: {path}")
    params, cfg = load_model(path)
    return Model(params, cfg)


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = load_config(None, args.set).phantom
    cfg.n_alines, cfg.n_points = args.alines, args.points
    for flag, attr in (("ring_depth", "ring_center_depth"), ("ring_thickness", "ring_thickness"),
                       ("features", "n_angular_features"), ("contrast", "feature_contrast"),
                       ("speckle", "speckle_strength"), ("grain", "speckle_grain")):
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg, attr, value)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    rng = nx.make_rng(args.seed)
    seq = generate_sequence(cfg, args.frames, nx.spawn_rng(rng))
    save_sequence(seq, args.out)
    print(f"wrote {args.out}: {len(seq)} frames of {cfg.n_alines}x{cfg.n_points}")
    if args.inject_nurd:
        kv = _parse_kv(args.inject_nurd)
        unknown = set(kv) - {"dmax", "fmax", "k", "monotone"}
        if unknown:
            raise UsageError(f"unknown --inject-nurd keys: {sorted(unknown)}")
        gen = DistortionGenConfig(n_components=int(kv.get("k", 1)),
                                  max_frequency=int(kv.get("fmax", 3)),
                                  max_amplitude=float(kv.get("dmax", 6.0)),
                                  enforce_monotone=kv.get("monotone", "0") in ("1", "true"))
        try:
            gen.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        nurd_rng = nx.spawn_rng(rng)
        vectors = [generate_gt_vector(gen, cfg.n_alines, nurd_rng) for _ in seq]
        distorted = FrameSequence([warp_frame(f, v) for f, v in zip(seq, vectors)])
        base = Path(args.out)
        nurd_path = Path(args.nurd_out) if args.nurd_out else base.with_name(base.stem + "_nurd.octf")
        save_sequence(distorted, nurd_path)
        save_vectors(vectors, nurd_path.with_suffix(".octd"))
        print(f"wrote {nurd_path} and {nurd_path.with_suffix('.octd')} (dmax={gen.max_amplitude})")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_config(args.config, args.set)
    if args.seed is not None:
        run.train.seed = args.seed
    seq = _read_sequence(args.data)
    n, m = seq.shape
    run.model.n_alines, run.model.n_points = n, m
    try:
        run.model.validate()
        run.train.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print("effective config:")
    print(run.echo())
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    last = {}

    def progress(step, epoch, losses):
        last.update(losses, step=step)
        if args.verbose and step % 50 == 0:
            print(f"step {step} epoch {epoch} " + " ".join(
                f"{k}={losses[k]:.4f}" for k in ("l1", "smooth", "sim", "total")), flush=True)

    train_loop(run.train, run.model, seq, out, log_path, progress=progress)
    print(f"steps={last['step']} " + " ".join(
        f"{k}={last[k]:.6g}" for k in ("l1", "smooth", "sim", "total")))
    print(f"checkpoint {out} sha256={file_sha256(out)}")
    print(f"loss log {log_path}")
    return EXIT_OK


def _xcorr_predictor(args):
    def predict(prev, cur):
        return xcorr_align(prev, cur, args.max_shift, args.block, args.lambda_dp)
    return predict


def cmd_correct(args) -> int:
    seq = _read_sequence(args.inp)
    if args.method == "xcorr":
        predictor = _xcorr_predictor(args)
    else:
        if not args.model:
            raise UsageError("--model is required for --method model")
        model = _read_model(args.model)
        n, m = seq.shape
        if (model.cfg.n_alines, model.cfg.n_points) != (n, m):
            raise MismatchError(
                f"model expects N={model.cfg.n_alines}, M={model.cfg.n_points} "
                f"but data has N={n}, M={m}")
        predictor = model
    if args.decay is not None and not 0.0 <= args.decay <= 1.0:
        raise UsageError("--decay must lie in [0, 1]")
    corrected, vectors = correct_sequence(predictor, seq, args.decay, args.ref_mode)
    save_sequence(corrected, args.out)
    print(f"wrote {args.out}: {len(corrected)} frames")
    if args.vectors_out:
        save_vectors(vectors, args.vectors_out)
        print(f"wrote {args.vectors_out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.metric == "std":
        seq = _read_sequence(args.inp)
        if len(seq) < 5:
            raise UsageError(f"std metric needs at least 5 frames, got {len(seq)}")
        series = std_series(seq)
        if args.csv:
            series.to_csv(args.csv)
        if args.svg:
            series.to_svg(args.svg, label=Path(args.inp).name)
        print(f"mean_std={series.mean():.6g}")
        return EXIT_OK
    if not args.gt_vectors:
        raise UsageError("--metric mae needs --gt-vectors")
    for p in (args.inp, args.gt_vectors):
        if not Path(p).exists():
            raise FileNotFoundError(f"no such file: {p}")
    pred, gt = load_vectors(args.inp), load_vectors(args.gt_vectors)
    if len(pred) != len(gt) or len(pred[0]) != len(gt[0]):
        raise MismatchError(
            f"vector files differ: {len(pred)}x{len(pred[0])} vs {len(gt)}x{len(gt[0])}")
    values = [mae_vectors(p, g) for p, g in zip(pred, gt)]
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("frame,mae\n" + "".join(f"{k},{v:.6g}\n" for k, v in enumerate(values)))
    print(f"mean_mae={float(np.mean(values)):.6g}")
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _read_model(args.model)
    seq = _read_sequence(args.inp)
    if (model.cfg.n_alines, model.cfg.n_points) != seq.shape:
        raise MismatchError(
            f"model expects N={model.cfg.n_alines}, M={model.cfg.n_points} "
            f"but data has N={seq.shape[0]}, M={seq.shape[1]}")
    if len(seq) < 2:
        raise UsageError("bench needs at least 2 frames")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    report = bench(model, seq, args.repeats)
    print(report.table())
    if args.csv:
        Path(args.csv).write_text(report.csv())
    else:
        print()
        print(report.csv(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nurdcorr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic phantom sequence")
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--alines", type=int, default=256)
    g.add_argument("--points", type=int, default=64)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--ring-depth", type=float)
    g.add_argument("--ring-thickness", type=float)
    g.add_argument("--features", type=int)
    g.add_argument("--contrast", type=float)
    g.add_argument("--speckle", type=float)
    g.add_argument("--grain", type=float)
    g.add_argument("--inject-nurd", metavar="dmax=..,fmax=..,k=..",
                   help="also write a distorted copy and its ground-truth vectors")
    g.add_argument("--nurd-out", help="path of the distorted copy (default <out>_nurd.octf)")
    g.add_argument("--set", action="append", default=[], metavar="phantom.key=value")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the cross-attention model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="loss CSV path (default <out>.csv)")
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", default=[], metavar="section.key=value")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("correct", help="correct NURD in a sequence")
    c.add_argument("--model")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--decay", type=float,
                   help="cumulative decay (default 0 for corrected reference, 1 for raw)")
    c.add_argument("--ref-mode", choices=("corrected", "raw"), default="corrected")
    c.add_argument("--vectors-out")
    c.add_argument("--method", choices=("model", "xcorr"), default="model")
    c.add_argument("--max-shift", type=int, default=8)
    c.add_argument("--block", type=int, default=8)
    c.add_argument("--lambda-dp", type=float, default=1e-4)
    c.set_defaults(func=cmd_correct)

    e = sub.add_parser("eval", help="STD series or vector MAE")
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--gt-vectors")
    e.add_argument("--metric", choices=("std", "mae"), default="std")
    e.add_argument("--csv")
    e.add_argument("--svg")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-frame latency report")
    b.add_argument("--model", required=True)
    b.add_argument("--in", dest="inp", required=True)
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--csv")
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    try:
        return args.func(args)
    except (UsageError, ConfigFileError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MismatchError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
