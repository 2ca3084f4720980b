"""Command-line entry point.

Exit codes: 0 success, 1 runtime or data failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ddpnet import kernels
from ddpnet.errors import ConfigError, DDPNetError, UsageError

PRECISIONS = {"single": np.float32, "double": np.float64}
CHECKPOINT_NAME = "checkpoint.ddpck"
LOG_NAME = "train_log.tsv"

# training keys accepted in a config file, each prefixed with "train."
TRAIN_KEYS = {
    "seed": int, "epochs": int, "warmup": int, "lr": float, "batch_size": int, "steps_per_epoch": int,
    "weight_decay": float, "decoupled_decay": bool, "augment": bool, "flip_prob": float,
    "scale_min": float, "scale_max": float, "crop": str,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def parse_hw(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2 or not all(p.strip().isdigit() for p in parts):
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    h, w = (int(p) for p in parts)
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"extents must be positive, got {text!r}")
    return h, w


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low not in ("true", "false", "1", "0", "yes", "no"):
        raise ConfigError(f"expected a boolean, got {text!r}")
    return low in ("true", "1", "yes")


# ------------------------------------------------------------------- spec


def resolve_spec(args):
    from ddpnet.model import ModelSpec, parse_config, preset_spec

    if getattr(args, "spec", None):
        try:
            text = Path(args.spec).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read spec file {args.spec}: {exc.strerror}") from None
        spec = ModelSpec.from_text(text)
        train = {k[len("train."):]: v for k, v in parse_config(text).items() if k.startswith("train.")}
    else:
        spec = preset_spec(args.preset)
        train = {}
    for key in train:
        if key not in TRAIN_KEYS:
            raise ConfigError(f"unknown training key 'train.{key}'")
    train = {k: (_bool(v) if TRAIN_KEYS[k] is bool else TRAIN_KEYS[k](v)) for k, v in train.items()}
    return spec, train


def _add_model_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", default="cityscapes", help="cityscapes, camvid, tiny or calibrated")
    g.add_argument("--spec", metavar="PATH", help="model spec file of 'key = value' lines")
    p.add_argument("--precision", choices=sorted(PRECISIONS), default="single")


# --------------------------------------------------------------- commands


def cmd_describe(args) -> int:
    from ddpnet.analysis import cost_report
    from ddpnet.model import build_ddpnet

    spec, _ = resolve_spec(args)
    h, w = args.input or spec.input_size
    model = build_ddpnet(spec, rng=0)
    report = cost_report(model, (args.batch, spec.in_channels, h, w), np.dtype(PRECISIONS[args.precision]).itemsize)
    if args.format == "text":
        sys.stdout.write(report.to_text(layers=args.layers))
    else:
        sys.stdout.write(report.to_delimited("," if args.format == "csv" else "\t"))
    return 0


def cmd_check_grad(args) -> int:
    from ddpnet.gradcheck import CASES, TOLERANCE, check_model, run_suite

    cases = [c for c in CASES if not args.op or c.name in args.op]
    if args.op and len(cases) != len(set(args.op)):
        known = ", ".join(c.name for c in CASES)
        raise UsageError(f"unknown operator in {args.op}; known: {known}")
    results = run_suite(args.seed, args.trials, cases)
    if not args.skip_model:
        results["ddpnet[tiny, end to end]"] = max(check_model(args.seed, args.samples).values())
    failed = 0
    width = max(len(k) for k in results)
    for name, err in results.items():
        ok = err < TOLERANCE
        failed += not ok
        print(f"{name:<{width}}  worst rel err {err:.3e}  {'PASS' if ok else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} passed (tolerance {TOLERANCE:g})")
    return 1 if failed else 0


def _load_data(path: str, layout: str, split: str):
    from ddpnet.data import load_dataset

    return load_dataset(path, layout, split)


def _train_config(args, train: dict):
    from ddpnet.training import AugmentConfig, ScheduleConfig, TrainConfig

    def pick(key, cli_value, default):
        if cli_value is not None:
            return cli_value
        return train.get(key, default)

    epochs = pick("epochs", args.epochs, 350)
    warmup = pick("warmup", args.warmup, min(5, epochs - 1))
    crop_text = pick("crop", args.crop, None)
    crop = parse_hw(crop_text) if isinstance(crop_text, str) else crop_text
    augment = None
    if pick("augment", None if not args.no_augment else False, True):
        augment = AugmentConfig(
            flip_prob=pick("flip_prob", args.flip_prob, 0.5),
            scale_range=(pick("scale_min", args.scale_min, 0.75), pick("scale_max", args.scale_max, 2.0)),
            crop=crop,
        )
    return TrainConfig(
        schedule=ScheduleConfig(pick("lr", args.lr, 5e-4), epochs, warmup),
        batch_size=pick("batch_size", args.batch_size, 8),
        seed=pick("seed", args.seed, 0),
        augment=augment,
        weight_decay=pick("weight_decay", args.weight_decay, 2e-4),
        decoupled_decay=train.get("decoupled_decay", False),
        steps_per_epoch=train.get("steps_per_epoch"),
    )


def _describe_train(cfg) -> str:
    aug = cfg.augment
    lines = [
        f"train.seed = {cfg.seed}",
        f"train.epochs = {cfg.schedule.epochs}",
        f"train.warmup = {cfg.schedule.warmup}",
        f"train.lr = {cfg.schedule.base_lr!r}",
        f"train.batch_size = {cfg.batch_size}",
        f"train.weight_decay = {cfg.weight_decay!r}",
        f"train.decoupled_decay = {str(cfg.decoupled_decay).lower()}",
        f"train.augment = {str(aug is not None).lower()}",
    ]
    if aug is not None:
        lines += [f"train.flip_prob = {aug.flip_prob!r}", f"train.scale_min = {aug.scale_range[0]!r}",
                  f"train.scale_max = {aug.scale_range[1]!r}"]
        if aug.crop:
            lines.append(f"train.crop = {aug.crop[0]}x{aug.crop[1]}")
    return "\n".join(lines) + "\n"


def cmd_train(args) -> int:
    from ddpnet.checkpoint import load_checkpoint, save_checkpoint
    from ddpnet.data import check_labels, dataset_mean
    from ddpnet.model import build_ddpnet
    from ddpnet.training import STREAM_INIT, fit, substream

    spec, train = resolve_spec(args)
    cfg = _train_config(args, train)
    samples = _load_data(args.data, args.layout, "train")
    if not samples:
        raise UsageError(f"no training samples found under {args.data}")
    check_labels(samples, spec.num_classes)
    val = _load_data(args.val, args.layout, "val") if args.val else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        model, optimizer, mean = load_checkpoint(args.resume)
        start = args.start_epoch
    else:
        dtype = PRECISIONS[args.precision]
        model = build_ddpnet(spec, rng=substream(cfg.seed, STREAM_INIT), dtype=dtype)
        optimizer, mean, start = None, dataset_mean(samples), 0
    (out / "config.txt").write_text(model.spec.to_text() + _describe_train(cfg), encoding="utf-8")

    def report(rec):
        miou = "" if rec.val_miou is None else f"  val mIoU {rec.val_miou:.4f}"
        print(f"epoch {rec.epoch:4d}  lr {rec.lr:.3e}  loss {rec.loss:.5f}{miou}", flush=True)

    log, optimizer = fit(model, samples, cfg, val=val, mean=mean, optimizer=optimizer,
                         hooks=[report] if not args.quiet else [], log_path=out / LOG_NAME, start_epoch=start)
    save_checkpoint(out / CHECKPOINT_NAME, model, optimizer, mean)
    print(f"wrote {out / CHECKPOINT_NAME} and {out / LOG_NAME}")
    return 0


def _model_for_inference(args):
    from ddpnet.checkpoint import load_checkpoint
    from ddpnet.model import build_ddpnet

    if args.checkpoint:
        model, _, mean = load_checkpoint(args.checkpoint)
        return model, (np.zeros(3, np.float32) if mean is None else mean)
    spec, _ = resolve_spec(args)
    return build_ddpnet(spec, rng=args.seed, dtype=PRECISIONS[args.precision]), None


def cmd_eval(args) -> int:
    from ddpnet.data import check_labels, dataset_mean
    from ddpnet.training import evaluate

    model, mean = _model_for_inference(args)
    samples = _load_data(args.data, args.layout, args.split)
    if not samples:
        raise UsageError(f"no samples found under {args.data}")
    check_labels(samples, model.spec.num_classes)
    if mean is None:
        mean = dataset_mean(samples)
    cm = evaluate(model, samples, mean, args.batch_size)
    for c, iou in enumerate(cm.iou()):
        print(f"class {c:3d}  IoU {'undefined' if np.isnan(iou) else f'{iou:.4f}'}")
    print(f"pixel accuracy {cm.pixel_accuracy():.4f}")
    print(f"mIoU {cm.miou():.4f}")
    return 0


def cmd_infer(args) -> int:
    from ddpnet.data import colorize, read_image, write_pixels
    from ddpnet.tensor import Tensor
    from ddpnet.training import predict

    model, mean = _model_for_inference(args)
    mean = np.zeros(3, np.float32) if mean is None else mean
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        src = Path(path)
        image = read_image(src) - mean[:, None, None]
        pred = predict(model, Tensor.wrap(image[None].astype(model.dtype)))[0]
        dest = (out or src.parent) / f"{src.stem}_pred.{args.format}"
        write_pixels(dest, colorize(pred), args.format)
        print(f"{src} -> {dest}")
    return 0


def cmd_synth(args) -> int:
    from ddpnet.data import gen_synthetic

    h, w = args.size
    manifest = gen_synthetic(args.out, args.count, (h, w), args.classes, args.seed, args.format)
    print(f"wrote {args.count} samples and {manifest}")
    return 0


def cmd_bench(args) -> int:
    from ddpnet.analysis import benchmark_fps
    from ddpnet.model import build_ddpnet

    if args.frames < 1:
        raise UsageError("--frames must be at least 1")
    previous = kernels.use_backend(args.backend) if args.backend else None
    try:
        spec, _ = resolve_spec(args)
        h, w = args.input or spec.input_size
        model = build_ddpnet(spec, rng=0, dtype=PRECISIONS[args.precision])
        stats = benchmark_fps(model, (1, spec.in_channels, h, w), args.frames, args.warmup)
        print(f"backend {kernels.BACKEND}  input 1x{spec.in_channels}x{h}x{w}  precision {args.precision}")
    finally:
        if previous:
            kernels.use_backend(previous)
    print(stats.summary())
    return 0


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ddpnet", description="DDPNet segmentation kit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("describe", help="per-layer shapes, parameters and FLOPs")
    _add_model_args(d)
    d.add_argument("--input", type=parse_hw, help="input extents HxW (default: the model's configured input size)")
    d.add_argument("--batch", type=int, default=1)
    d.add_argument("--layers", action="store_true", help="list every primitive, not only block totals")
    d.add_argument("--format", choices=("text", "csv", "tsv"), default="text")
    d.set_defaults(func=cmd_describe)

    g = sub.add_parser("check-grad", help="finite-difference certification of every backward rule")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--trials", type=int, default=20, help="random cases per operator")
    g.add_argument("--samples", type=int, default=2, help="sampled coordinates per tensor in the model check")
    g.add_argument("--op", action="append", help="restrict to this operator (repeatable)")
    g.add_argument("--skip-model", action="store_true", help="operators only")
    g.set_defaults(func=cmd_check_grad)

    t = sub.add_parser("train", help="train on an image/label dataset")
    _add_model_args(t)
    t.add_argument("--data", required=True, help="dataset root or manifest file")
    t.add_argument("--layout", choices=("manifest", "cityscapes", "camvid"), default="manifest")
    t.add_argument("--val", help="validation dataset root or manifest")
    t.add_argument("--out", default="run", help="output directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--warmup", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--crop", help="crop size HxW (default: keep the image size)")
    t.add_argument("--flip-prob", type=float)
    t.add_argument("--scale-min", type=float)
    t.add_argument("--scale-max", type=float)
    t.add_argument("--no-augment", action="store_true", help="mean subtraction only")
    t.add_argument("--resume", metavar="CHECKPOINT")
    t.add_argument("--start-epoch", type=int, default=0, help="first epoch when resuming")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class IoU and mIoU on a dataset")
    _add_model_args(e)
    e.add_argument("--checkpoint", help="trained checkpoint (default: a freshly initialised model)")
    e.add_argument("--data", required=True)
    e.add_argument("--layout", choices=("manifest", "cityscapes", "camvid"), default="manifest")
    e.add_argument("--split", default="val")
    e.add_argument("--seed", type=int, default=0, help="initialisation seed without a checkpoint")
    e.add_argument("--batch-size", type=int, default=4)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="write colour-coded label maps for images")
    _add_model_args(i)
    i.add_argument("images", nargs="+")
    i.add_argument("--checkpoint")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", help="output directory (default: next to each input)")
    i.add_argument("--format", choices=("ppm", "png"), default="ppm")
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("synth", help="generate a synthetic shapes dataset with a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--size", type=parse_hw, default=(64, 64))
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=("ppm", "png"), default="ppm")
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("bench", help="mean forward latency and FPS")
    _add_model_args(b)
    b.add_argument("--input", type=parse_hw)
    b.add_argument("--frames", type=int, default=100)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--backend", choices=("compiled", "python"))
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"ddpnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DDPNetError, OSError, ValueError) as exc:
        print(f"ddpnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
