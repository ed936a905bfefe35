"""``denet`` command line: gen-data, train, detect, eval, gradcheck, bench."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as dataio
from .evaluate import coverage
from .model import VARIANTS, DeNet, ModelConfig, full_scale_config
from .sampler import search_boxes
from .trainer import LossWeights, TrainConfig, TrainingError, augment_sample, model_from_checkpoint, train

log = logging.getLogger("denet")

COVERAGE_NS = (4, 8, 16, 24, 32)


class UsageError(Exception):
    """Bad flags or missing inputs; reported with the usage line and exit code 2."""


def _positive(kind):
    def parse(text: str):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value: {text!r}") from None
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return parse


def _unit(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def _nonneg(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="denet", description="Corner-based sparse-sampling object detector.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic shapes dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=_positive(int), required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=_positive(int), default=64, help="image side in pixels")
    g.add_argument("--max-instances", type=_positive(int), default=3)

    t = sub.add_parser("train", parents=[common], help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory (model.ckpt, metrics.csv, training.png)")
    t.add_argument("--epochs", type=_positive(int), default=30)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--variant", choices=VARIANTS, default="plain")
    t.add_argument("--n", type=_positive(int), default=None, help="RoI grid side; N^2 RoIs per image (default 8, 16 for wide)")
    t.add_argument("--m", type=_positive(int), default=16, help="corners kept per type")
    t.add_argument("--lambda-t", type=_nonneg, default=100.0)
    t.add_argument("--lambda-s", type=_nonneg, default=1.0)
    t.add_argument("--lambda-b", type=_nonneg, default=1.0)
    t.add_argument("--lr", type=_positive(float), default=0.1)
    t.add_argument("--warmup", type=_nonneg, default=2.0, help="linear warm-up length in epochs")
    t.add_argument("--batch-size", type=_positive(int), default=16)
    t.add_argument("--checkpoint-every", type=int, default=0, help="also keep epochNNN.ckpt every K epochs")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")

    d = sub.add_parser("detect", parents=[common], help="run a trained model on images")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True, help="PNG file, directory of PNGs or dataset directory")
    d.add_argument("--out", required=True, help="detections CSV")
    d.add_argument("--nms-iou", type=_unit, default=0.5)
    d.add_argument("--min-conf", type=float, default=0.05)
    d.add_argument("--n", type=_positive(int), default=None)
    d.add_argument("--figures", action="store_true", help="also render one overlay PNG per image next to --out")

    e = sub.add_parser("eval", parents=[common], help="score a model on an annotated dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="report CSV; table and figures are written beside it")
    e.add_argument("--nms-iou", type=_unit, default=0.5)
    e.add_argument("--min-conf", type=float, default=0.0)
    e.add_argument("--n", type=_positive(int), default=None)
    e.add_argument("--interp", choices=("all", "11point"), default="all")
    e.add_argument("--no-figures", action="store_true")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", parents=[common], help="per-stage inference timing")
    b.add_argument("--model", default=None, help="checkpoint (optional with --full-scale)")
    b.add_argument("--data", required=True)
    b.add_argument("--full-scale", action="store_true", help="time a randomly initialised 512-pixel network")
    b.add_argument("--images", type=_positive(int), default=64)
    b.add_argument("--batch-size", type=_positive(int), default=8)
    b.add_argument("--warmup", type=_positive(int), default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None, help="timing CSV; a bar chart is written beside it")
    return p


# --------------------------------------------------------------------------
# helpers


def _need(path: str, what: str, directory: bool = False) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    if directory and not p.is_dir():
        raise UsageError(f"{what} is not a directory: {path}")
    return p


def _load_model(path: str) -> DeNet:
    ckpt = dataio.load_checkpoint(_need(path, "model checkpoint"))
    return model_from_checkpoint(ckpt)[0]


def _prepare(samples: Sequence[dataio.SceneSample], size: int):
    """Border and rescale each image to the model input; returns images, model-space gt and scales."""
    images, gts, scales = [], [], []
    for s in samples:
        img, boxes, classes = augment_sample(s.image, s.boxes, s.classes, None, False, size)
        images.append(img)
        gts.append([(int(c), tuple(b)) for c, b in zip(classes, boxes)])
        scales.append(max(s.image.shape[1:]) / size)
    return np.stack(images) if images else np.zeros((0, 3, size, size), np.float32), gts, scales


def _chunks(n: int, size: int):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    size = args.size
    if size < 16:
        raise UsageError(f"--size must be at least 16, got {size}")
    cfg = dataio.GenConfig(image_size=size, max_instances=args.max_instances, min_size=max(4, size // 4), max_size=max(4, size // 2))
    samples = [dataio.gen_scene([args.seed, i], cfg) for i in range(args.count)]
    dataio.write_dataset(args.out, samples, {"seed": args.seed, "size": size})
    print(f"wrote {len(samples)} scenes with {sum(len(s.annotations) for s in samples)} instances to {args.out}")
    return 0


def cmd_train(args) -> int:
    data_dir = _need(args.data, "data directory", directory=True)
    out = Path(args.out)
    samples = [s for _, s in dataio.load_dataset(data_dir)]
    if not samples:
        raise UsageError(f"no images in {data_dir}")
    cfg = TrainConfig.scaled(
        args.epochs,
        lr=args.lr,
        seed=args.seed,
        batch_size=args.batch_size,
        warmup_epochs=args.warmup,
        checkpoint_every=args.checkpoint_every,
    )
    if args.resume:
        ckpt = dataio.load_checkpoint(_need(args.resume, "resume checkpoint"))
        model, weights, state = model_from_checkpoint(ckpt)
        saved = ckpt.extra.get("train_config")
        if saved:
            cfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in saved.items()})
    else:
        size = int(max(samples[0].image.shape[1:]))
        overrides = dict(seed=args.seed, M=args.m, input_size=size)
        if args.n is not None:
            overrides["N"] = args.n
        try:
            mc = ModelConfig.for_variant(args.variant, **overrides)
        except ValueError as e:
            raise UsageError(str(e)) from None
        model = DeNet(mc)
        weights = LossWeights(lambda_s=args.lambda_s, lambda_t=args.lambda_t, lambda_b=args.lambda_b)
        state = None

    def on_row(row):
        if args.verbose and row[0] % 50 == 0:
            log.info("step %d epoch %d lr %.4g loss %.4f coverage %.3f", row[0], row[1], row[2], row[3], row[7])

    weights, state = train(samples, model, cfg, weights, out, state, on_row=on_row)
    from .plotting import plot_training

    plot_training(state.rows, out / "training.png")
    last = state.rows[-1] if state.rows else None
    summary = f"trained {state.epoch} epochs ({state.step} steps) -> {out / 'model.ckpt'}"
    if last:
        summary += f"; final loss {last[3]:.4f}"
    print(summary)
    return 0


def _input_samples(path: Path) -> list[tuple[str, dataio.SceneSample]]:
    if path.is_file():
        return [(path.stem, dataio.SceneSample(dataio.load_image(path)))]
    if (path / "annotations.txt").exists():
        return dataio.load_dataset(path)
    pngs = sorted(path.glob("*.png")) or sorted((path / "images").glob("*.png"))
    if not pngs:
        raise UsageError(f"no PNG images under {path}")
    return [(p.stem, dataio.SceneSample(dataio.load_image(p))) for p in pngs]


def cmd_detect(args) -> int:
    from .pipeline import detect

    model = _load_model(args.model)
    named = _input_samples(_need(args.input, "input"))
    size = model.config.input_size
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "class_id", "confidence", "x1", "y1", "x2", "y2"])
    total = 0
    for lo, hi in _chunks(len(named), 32):
        chunk = named[lo:hi]
        images, _, scales = _prepare([s for _, s in chunk], size)
        results = detect(model, images, nms_iou=args.nms_iou, min_conf=args.min_conf, n=args.n)
        for (iid, sample), res, k in zip(chunk, results, scales):
            h, wd = sample.image.shape[1:]
            hits = []
            for hit in res.hits:
                x1, y1, x2, y2 = np.array(hit.box) * k
                box = (min(x1, wd), min(y1, h), min(x2, wd), min(y2, h))
                hits.append((hit.class_id, hit.confidence, box))
                w.writerow([iid, hit.class_id, f"{hit.confidence:.6f}", *(f"{v:.3f}" for v in box)])
            total += len(hits)
            if args.figures:
                from .head import DetectionHit
                from .plotting import plot_detections

                shown = [DetectionHit(b, np.zeros(0), c, conf) for c, conf, b in hits]
                plot_detections(sample.image, shown, _sibling(out, f"_{iid}.png"), sample.annotations, dataio.CLASS_NAMES)
    out.write_text(buf.getvalue())
    print(f"{total} detections on {len(named)} images -> {out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate_hits
    from .pipeline import detect

    model = _load_model(args.model)
    named = dataio.load_dataset(_need(args.data, "data directory", directory=True))
    if not named:
        raise UsageError(f"no images in {args.data}")
    mc = model.config
    hits, gts, rois = [], [], []
    by_n = {n: [] for n in COVERAGE_NS}
    for lo, hi in _chunks(len(named), 32):
        images, gt, _ = _prepare([s for _, s in named[lo:hi]], mc.input_size)
        results = detect(model, images, nms_iou=args.nms_iou, min_conf=args.min_conf, n=args.n)
        hits += [r.hits for r in results]
        rois += [r.rois for r in results]
        gts += gt
        probs = model.forward_base(images, train=False).corner_probs.astype(np.float64)
        for i, g in enumerate(gt):
            for n in COVERAGE_NS:
                boxes, _ = search_boxes(probs[i], mc.lambda_thresh, mc.M, n)
                px = (boxes.astype(np.float64).reshape(-1, 4) + 0.5) * mc.corner_stride
                by_n[n].append((coverage(px, [b for _, b in g], 0.5), len(g)))
    report = evaluate_hits(hits, gts, rois, mc.class_count, interp=args.interp)
    cov_n = {n: sum(c * k for c, k in v) / max(sum(k for _, k in v), 1) for n, v in by_n.items()}
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_csv())
    table = report.to_table()
    _sibling(path, ".txt").write_text(table + "\n")
    if not args.no_figures:
        from .plotting import plot_coverage, plot_pr_curves

        plot_pr_curves(hits, gts, mc.class_count, _sibling(path, "_pr.png"), names=dataio.CLASS_NAMES)
        plot_coverage(report.coverage_at, _sibling(path, "_coverage.png"), cov_n)
    print(table)
    print("coverage@0.5 by N: " + ", ".join(f"{n}: {100 * v:.1f}%" for n, v in cov_n.items()))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, report

    errors, seconds = report(args.seed)
    width = max(len(k) for k in errors)
    for name, err in errors.items():
        print(f"{name.ljust(width)}  {err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    bad = [k for k, v in errors.items() if not v < TOLERANCE]
    print(f"{len(errors) - len(bad)}/{len(errors)} ops below {TOLERANCE:g} in {seconds:.1f} s")
    return 1 if bad else 0


def cmd_bench(args) -> int:
    from .evaluate import TIMING_STAGES
    from .pipeline import timing_run

    if args.full_scale:
        model = DeNet(full_scale_config(seed=args.seed))
    elif args.model:
        model = _load_model(args.model)
    else:
        raise UsageError("bench needs --model unless --full-scale is given")
    named = dataio.load_dataset(_need(args.data, "data directory", directory=True))[: args.images]
    if not named:
        raise UsageError(f"no images in {args.data}")
    images, _, _ = _prepare([s for _, s in named], model.config.input_size)
    timing = timing_run(model, images, args.batch_size, args.warmup)
    fr = timing.fractions()
    for k in TIMING_STAGES:
        print(f"{k:<20} {timing.stages[k]:9.3f} ms  {100 * fr[k]:5.1f}%")
    print(f"{'total':<20} {timing.total:9.3f} ms  (stage sum {sum(timing.stages.values()):.3f} ms, {timing.images} images)")
    if args.out:
        from .plotting import plot_timing

        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(timing.to_csv())
        plot_timing(timing, _sibling(path, ".png"))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"denet {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (dataio.FormatError, TrainingError, ValueError, OSError) as e:
        print(f"denet {args.command}: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
