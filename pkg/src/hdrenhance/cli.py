"""Command-line entry point: ``hdrenhance <subcommand> ...``.

Exit codes: 0 success, 1 partial failure (some files failed), 2 invalid
input or configuration.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import hdr_io
from .dataset import PairConfig, generate_dataset, load_pairs
from .metrics.niqe import NiqeModel, fit_niqe_model, niqe
from .metrics.tmqi import tmqi
from .network import UNet, UNetConfig, load_checkpoint
from .optim import CorpusPairs, FixedPairs, TrainConfig, enhance, resume_state, train
from .tonemap import DEFAULT_EPSILON, ToneMapParams, tonemap_reinhard

log = logging.getLogger("hdrenhance")

CORPUS_ENV = "HDRENHANCE_CORPUS"
EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2
EVAL_COLUMNS = ["image", "TMQI_Q", "TMQI_S", "TMQI_N", "NIQE"]


class UsageError(Exception):
    """Invalid input or configuration; maps to exit code 2."""


def _corpus_files(corpus):
    if corpus is None:
        raise UsageError(f"no corpus given (use --corpus or set {CORPUS_ENV})")
    root = Path(corpus)
    if not root.is_dir():
        raise UsageError(f"corpus directory not found: {root}")
    files = sorted(p for p in root.iterdir()
                   if p.is_file() and p.suffix.lower() in hdr_io.HDR_SUFFIXES + (".pfm",))
    if not files:
        raise UsageError(f"no HDR images found in {root}")
    return files


def _out_path(out, src, suffix):
    """``out`` is a file when one input is given, otherwise a directory."""
    out = Path(out)
    if out.is_dir() or out.suffix == "":
        out.mkdir(parents=True, exist_ok=True)
        return out / (Path(src).stem + suffix)
    return out


# --------------------------------------------------------------------------
# Subcommands


def cmd_gen_dataset(args):
    if args.count < 1 or args.size < 8:
        raise UsageError("--count must be at least 1 and --size at least 8")
    files = _corpus_files(args.corpus)
    cfg = PairConfig(out_size=args.size, epsilon=args.epsilon, key=args.a)

    def progress(rec):
        print(f"pair {rec['index']}: source {rec['source']} seed {rec['seed']}")

    manifest = generate_dataset(files, args.count, args.out, args.seed, cfg,
                                jobs=args.jobs, write_ppm=args.ppm, progress=progress)
    print(f"{len(manifest.pairs)} pairs from {len(manifest.sources)} images -> {args.out}")
    if not manifest.sources:
        log.error("no readable HDR images in %s", args.corpus)
        return EXIT_INVALID
    return EXIT_PARTIAL if manifest.skipped else EXIT_OK


def _train_source(args, size):
    if args.manifest:
        if not Path(args.manifest).is_file():
            raise UsageError(f"manifest not found: {args.manifest}")
        x, y = load_pairs(args.manifest)
        if x.shape[1] != size or x.shape[2] != size:
            raise UsageError(f"manifest pairs are {x.shape[2]}x{x.shape[1]}, model expects {size}x{size}")
        return FixedPairs(x, y)
    images = []
    for path in _corpus_files(args.corpus):
        try:
            images.append(hdr_io.load_hdr(path))
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", path, exc)
    if not images:
        raise UsageError("no readable HDR images in corpus")
    cfg = PairConfig(out_size=size, epsilon=args.epsilon, key=args.a)
    return CorpusPairs(images, cfg, seed=args.seed, jobs=args.jobs)


def cmd_train(args):
    if args.resume:
        state = resume_state(args.resume)
        net_cfg = state.net.config
    else:
        state = None
        base = UNetConfig.desk() if args.desk else UNetConfig()
        overrides = {k: v for k, v in (("base_width", args.width), ("depth", args.depth),
                                        ("input_size", args.size)) if v is not None}
        try:
            net_cfg = UNetConfig(**{**base.__dict__, **overrides})
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    source = _train_source(args, net_cfg.input_size)
    if args.batch is not None:
        batch = args.batch
    elif state and "batch" in state.train_config:
        batch = state.train_config["batch"]
    else:
        batch = min(8, len(source)) if args.desk else 8
    if batch > len(source):
        raise UsageError(f"batch {batch} is larger than the {len(source)} available images")
    try:
        cfg = TrainConfig(epochs=args.epochs, batch=batch, seed=args.seed, lr=args.lr,
                          checkpoint_every=args.checkpoint_every, out_dir=str(args.out), jobs=args.jobs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    net = state.net if state else UNet(net_cfg, np.random.default_rng(args.seed))
    print(f"training {net.parameter_count()} parameters, batch {batch}, "
          f"{len(source) // batch} steps per epoch, epochs {cfg.epochs}")

    def on_step(st):
        it, epoch, loss = st.history[-1]
        if it % args.log_every == 0:
            print(f"iter {it} epoch {epoch} loss {loss:.6g}", flush=True)

    state = train(net, source, cfg, state, on_step)
    from .plotting import plot_loss_curve

    plot_loss_curve(state.history, Path(args.out) / "loss.png")
    print(f"final loss {state.history[-1][2]:.6g}; outputs in {args.out}")
    return EXIT_OK


def cmd_enhance(args):
    net, _, _ = load_checkpoint(args.checkpoint)
    failed = 0
    for src in args.inputs:
        try:
            out = enhance(net, hdr_io.load_ldr(src))
            dest = _out_path(args.out, src, ".ppm") if len(args.inputs) > 1 else Path(args.out)
            hdr_io.save_ldr(dest, out)
            print(f"{src} -> {dest}")
        except (OSError, ValueError) as exc:
            log.error("%s: %s", src, exc)
            failed += 1
    return _status(failed, len(args.inputs))


def cmd_tonemap(args):
    params = ToneMapParams(args.a, args.epsilon)
    ldr = tonemap_reinhard(hdr_io.load_hdr(args.input), params)
    hdr_io.save_ldr(args.output, ldr)
    print(f"{args.input} -> {args.output}")
    return EXIT_OK


def _fmt(value):
    return "" if value is None else repr(float(value))


def cmd_evaluate(args):
    model_path = args.model
    model = NiqeModel.load(model_path)
    ref = hdr_io.load_hdr(args.ref) if args.ref else None
    rows, failed = [], 0
    for src in args.inputs:
        row = dict.fromkeys(EVAL_COLUMNS)
        row["image"] = str(src)
        try:
            ldr = hdr_io.load_ldr(src)
            if ref is not None:
                res = tmqi(ldr, ref)
                row.update(TMQI_Q=res.Q, TMQI_S=res.S, TMQI_N=res.N)
            row["NIQE"] = niqe(ldr, model)
        except (OSError, ValueError) as exc:
            log.error("%s: %s", src, exc)
            failed += 1
        rows.append(row)
    lines = [EVAL_COLUMNS] + [[r["image"]] + [_fmt(r[c]) for c in EVAL_COLUMNS[1:]] for r in rows]
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerows(lines)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(lines)
        meta = {"reference": args.ref, "niqe_model": model_path or "bundled",
                "niqe_model_sha256": hashlib.sha256(model.to_bytes()).hexdigest()}
        out.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
        from .plotting import plot_evaluation

        plot_evaluation(rows, out.with_suffix(".png"))
    return _status(failed, len(args.inputs))


def cmd_fit_niqe_model(args):
    images = []
    for src in args.inputs:
        try:
            images.append(hdr_io.load_ldr(src))
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", src, exc)
    try:
        model = fit_niqe_model(images)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model.save(args.out)
    print(f"fitted on {len(images)} images -> {args.out}")
    return EXIT_PARTIAL if len(images) < len(args.inputs) else EXIT_OK


def _status(failed, total):
    if failed == 0:
        return EXIT_OK
    return EXIT_INVALID if failed == total else EXIT_PARTIAL


# --------------------------------------------------------------------------
# Parser


def build_parser():
    parser = argparse.ArgumentParser(prog="hdrenhance", description="HDR-supervised LDR enhancement")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        if seed:
            p.add_argument("--seed", type=int, default=0, help="single source of randomness")
        p.add_argument("--jobs", type=int, default=1, help="worker threads (1 = deterministic single-thread)")

    def tonemap_flags(p):
        p.add_argument("--a", type=float, default=0.18, help="tone-mapping key value")
        p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)

    p = sub.add_parser("gen-dataset", help="materialise training pairs from an HDR corpus")
    p.add_argument("--corpus", default=os.environ.get(CORPUS_ENV))
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", type=int, default=1, help="pairs per image")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--ppm", action="store_true", help="also write PPM previews")
    tonemap_flags(p)
    common(p)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train the U-Net")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--corpus", default=os.environ.get(CORPUS_ENV))
    src.add_argument("--manifest", help="train on the fixed pairs of a generated dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--desk", action="store_true", help="reduced model: width 4, depth 3, 64x64")
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--epochs", type=int, default=5000)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--checkpoint-every", type=int, default=1)
    p.add_argument("--log-every", type=int, default=1)
    p.add_argument("--resume", help="checkpoint to continue from")
    tonemap_flags(p)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="run a trained network on LDR images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True, help="output file, or directory for several inputs")
    common(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("tonemap", help="Reinhard global tone mapping")
    p.add_argument("input")
    p.add_argument("output")
    tonemap_flags(p)
    p.set_defaults(func=cmd_tonemap)

    p = sub.add_parser("evaluate", help="TMQI/NIQE report as CSV")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--ref", help="HDR reference for TMQI")
    p.add_argument("--model", help="NIQE model file (default: bundled model)")
    p.add_argument("--out", help="also write the CSV here, with a .png chart and .json metadata")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fit-niqe-model", help="fit a NIQE pristine model from natural images")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_niqe_model)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
