"""Batch command-line interface.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines named
after the long flags (``n-train = 20``); flags given on the command line win.
Exit status: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import shlex
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as bench_mod
from . import conventional as conv
from . import serialization
from .image import load_image, save_image
from .lut import SIZES, bake_lut, load_lut, save_lut, write_cube
from .metrics import MetricReport, evaluate
from .pixelnet import PixelNetConfig, init, load_checkpoint, parse_variant, save_checkpoint
from .synth import SynthSceneConfig, generate_dataset, parse_transform, render_scene, scene_seed
from .training import PairedDataset, TrainConfig, rng_stream, train

logger = logging.getLogger("stainnorm")

IMAGE_SUFFIXES = (".png",)
COMMANDS = {"synth", "fit", "normalize", "train", "eval", "bench", "bake-lut", "refsens"}


class UsageError(Exception):
    pass


def read_config(path: str | Path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _list_images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        raise FileNotFoundError(f"not a directory: {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    scene = SynthSceneConfig(size=args.size, cell_count=tuple(args.cells), seed=args.seed)
    if args.teacher_model:
        model = conv.load_model(args.teacher_model)
        if not isinstance(model, conv.StainModel):
            raise UsageError("--teacher-model must be a Macenko or Vahadane stain model")
        teacher = lambda img: conv.normalize_with("macenko", img, model)  # noqa: E731
    else:
        teacher = parse_transform(args.teacher)
    train_set, val_set = generate_dataset(scene, teacher, args.n_train, args.n_val, args.out)
    print(f"wrote {len(train_set)} train and {len(val_set)} val pairs to {args.out}")
    return 0


def cmd_fit(args) -> int:
    image = load_image(args.image)
    if args.method == "vahadane":
        model = conv.vahadane_fit(image, conv.VahadaneConfig(seed=args.seed))
    else:
        model = conv.fit_reference(args.method, image)
    conv.save_model(model, args.out)
    print(f"wrote {args.method} model to {args.out}")
    return 0


def _load_normalizer(args):
    if args.method in conv.METHODS:
        if args.model:
            model = conv.load_model(args.model)
        elif args.reference:
            model = conv.fit_reference(args.method, load_image(args.reference))
        else:
            raise UsageError(f"--method {args.method} needs --model or --reference")
        return lambda img: conv.normalize_with(args.method, img, model)
    if args.method == "pixelnet":
        if not args.checkpoint:
            raise UsageError("--method pixelnet needs --checkpoint")
        fn, _ = bench_mod.make_normalizer("pixelnet", net=load_checkpoint(args.checkpoint), precision=args.precision)
        return fn
    if not args.lut:
        raise UsageError("--method lut needs --lut")
    fn, _ = bench_mod.make_normalizer("lut", lut=load_lut(args.lut))
    return fn


def cmd_normalize(args) -> int:
    fn = _load_normalizer(args)
    paths = _list_images(Path(args.input))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=args.threads):
        outputs = _map(lambda p: fn(load_image(p)), paths, args.threads)
    for path, img in zip(paths, outputs):
        save_image(img, out_dir / path.name)
    print(f"normalized {len(paths)} images into {out_dir}")
    return 0


def cmd_train(args) -> int:
    if args.variant:
        config = parse_variant(args.variant, args.hidden_width)
    else:
        config = PixelNetConfig.default(args.hidden_width)
    cfg = TrainConfig(
        lr0=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        momentum=args.momentum,
        crop=args.crop,
        seed=args.seed,
        eval_every=args.eval_every,
        precision=args.precision,
    )
    train_set = PairedDataset.from_manifest(args.manifest, "train")
    val_set = PairedDataset.from_manifest(args.manifest, "val")
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("manifest needs both train and val pairs")
    net = init(config, rng_stream(args.seed, "init"))

    def progress(rec):
        logger.info("epoch %d loss %.6f lr %.6g psnr %s", rec.epoch, rec.loss, rec.lr, rec.psnr)

    with threadpool_limits(limits=args.threads):
        best, report = train(net, train_set, val_set, cfg, progress)
    save_checkpoint(best, args.out)
    if args.report:
        report.write_csv(args.report)
    print(f"best epoch {report.best_epoch} val PSNR {report.best_psnr:.3f} dB; checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    norm_paths = _list_images(Path(args.normalized))
    if not norm_paths:
        raise ValueError(f"no images in {args.normalized}")
    names = [p.name for p in norm_paths]
    for folder in (args.target, args.source):
        missing = [n for n in names if not (Path(folder) / n).is_file()]
        if missing:
            raise FileNotFoundError(f"{folder} lacks {missing[0]}")
    load = lambda folder: [load_image(Path(folder) / n) for n in names]  # noqa: E731
    row = evaluate(args.method, load(args.normalized), load(args.target), load(args.source), fps=args.fps)
    report = MetricReport([row])
    if args.out:
        report.write(args.out)
    print(report.table())
    return 0


def cmd_bench(args) -> int:
    if args.images:
        images = [load_image(p) for p in _list_images(Path(args.images))][: args.n_images]
        if not images:
            raise ValueError(f"no images in {args.images}")
    else:
        images = [
            render_scene(SynthSceneConfig(size=args.size, seed=scene_seed(args.seed, i)))
            for i in range(args.n_images)
        ]
    reference = load_image(args.reference) if args.reference else render_scene(
        SynthSceneConfig(size=args.size, seed=scene_seed(args.seed, 10**6))
    )
    net = None
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
    elif "pixelnet" in args.methods or "lut" in args.methods:
        logger.warning("no --checkpoint given; timing an untrained default network")
        net = init(PixelNetConfig.default(), rng_stream(args.seed, "init"))
    thread_modes = sorted({1, args.threads})
    results = []
    for threads in thread_modes:
        for method in args.methods:
            with threadpool_limits(limits=threads):
                t0 = time.perf_counter()
                lut = bake_lut(net, 256, args.precision) if method == "lut" else None
                bake_ms = (time.perf_counter() - t0) * 1e3
                fn, fit_ms = bench_mod.make_normalizer(method, reference=reference, net=net, lut=lut, precision=args.precision)
            precision = {"pixelnet": str(args.precision), "lut": "u8"}.get(method, "64")
            fit_ms += bake_ms
            res = bench_mod.measure_fps(fn, images, args.warmup, args.reps, method, fit_ms, threads, precision)
            results.append(res)
            logger.info("%s threads=%d fps=%.2f", method, threads, res.fps)
    if args.csv:
        bench_mod.append_csv(results, args.csv)
    print(bench_mod.format_table(results))
    return 0


def cmd_bake_lut(args) -> int:
    net = load_checkpoint(args.checkpoint)
    lut = bake_lut(net, args.size, args.precision)
    save_lut(lut, args.out)
    if args.cube:
        write_cube(lut, args.cube)
    print(f"wrote {args.size}^3 LUT to {args.out}")
    return 0


def cmd_refsens(args) -> int:
    source = load_image(args.source)
    references = [load_image(p) for p in args.references]
    report = conv.reference_sensitivity_report(source, references, args.method)
    if args.out:
        serialization.write_json(report.to_dict(), args.out)
    for row in report.psnr:
        print(" ".join("inf" if np.isinf(v) else f"{v:.3f}" for v in row))
    return 0


# --------------------------------------------------------------------------
# parser


def _int_pair(text):
    try:
        lo, hi = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'lo,hi'") from None
    return lo, hi


def _method_list(text):
    methods = [m.strip() for m in text.split(",") if m.strip()]
    allowed = set(conv.METHODS) | {"pixelnet", "lut"}
    bad = [m for m in methods if m not in allowed]
    if bad or not methods:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from {sorted(allowed)}")
    return methods


def _lut_size(text):
    value = int(text)
    if value not in SIZES:
        raise argparse.ArgumentTypeError(f"size must be one of {SIZES}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stainnorm", description="Stain normalization experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value file with defaults for the flags below")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "render a paired synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-val", type=int, default=5)
    p.add_argument("--teacher", default="identity", help="identity | gamma:a,b,c | linear:m11..m33[,o1,o2,o3]; '+' composes")
    p.add_argument("--teacher-model", help="stain model JSON; use Macenko normalization onto it as the teacher")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--cells", type=_int_pair, default=(4, 9))

    p = add("fit", cmd_fit, "fit a reference model")
    p.add_argument("--method", required=True, choices=conv.METHODS)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = add("normalize", cmd_normalize, "normalize every PNG in a directory")
    p.add_argument("--method", required=True, choices=conv.METHODS + ("pixelnet", "lut"))
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model")
    p.add_argument("--reference")
    p.add_argument("--checkpoint")
    p.add_argument("--lut")
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)

    p = add("train", cmd_train, "distill a network from a paired manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="per-epoch CSV path")
    p.add_argument("--variant", help="layer counts, e.g. 1x1:2,3x3:1")
    p.add_argument("--hidden-width", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--crop", type=int)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)

    p = add("eval", cmd_eval, "score normalized images against targets and sources")
    p.add_argument("--normalized", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--method", default="method")
    p.add_argument("--fps", type=float)
    p.add_argument("--out", help="report path (.csv or .json)")

    p = add("bench", cmd_bench, "measure per-image throughput")
    p.add_argument("--methods", type=_method_list, default=["pixelnet", "lut", "reinhard", "macenko", "vahadane"])
    p.add_argument("--checkpoint")
    p.add_argument("--reference")
    p.add_argument("--images", help="directory of PNGs; synthetic scenes when omitted")
    p.add_argument("--n-images", type=int, default=100)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)
    p.add_argument("--csv")

    p = add("bake-lut", cmd_bake_lut, "bake a fully 1x1 checkpoint into a 3D LUT")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--size", type=_lut_size, default=256)
    p.add_argument("--out", required=True)
    p.add_argument("--cube", help="also write a .cube text export")
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)

    p = add("refsens", cmd_refsens, "compare normalizations of one source against several references")
    p.add_argument("--source", required=True)
    p.add_argument("--references", nargs="+", required=True)
    p.add_argument("--method", choices=conv.METHODS, default="reinhard")
    p.add_argument("--out")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv`` with config-file values spliced in ahead of the real flags.

    Later occurrences of a flag override earlier ones, so anything given on
    the command line wins over the file.
    """
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    commands = COMMANDS & set(argv)
    if not known.config or not commands:
        return parser.parse_args(argv)
    pos = min(argv.index(c) for c in commands) + 1
    extra = []
    for key, value in read_config(known.config).items():
        extra.append(f"--{key.replace('_', '-')}")
        extra.extend(shlex.split(value))
    return parser.parse_args(argv[:pos] + extra + argv[pos:])


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError) as exc:
        print(f"stainnorm: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stainnorm: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"stainnorm: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
