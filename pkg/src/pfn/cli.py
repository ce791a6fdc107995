"""Command-line entry point: ``pfn <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import fileio
from .fileio import FormatError

logger = logging.getLogger("pfn")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def _size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)[xX](\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"{text} must be positive")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"{text} must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pfn", description="Proposal-free instance segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=_nonneg_int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--max-instances", type=int, default=4)
    g.add_argument("--size", type=_size, default=(64, 64), help="HxW")
    g.add_argument("--start", type=_nonneg_int, default=0, help="index of the first scene in the seeded stream")
    g.add_argument(
        "--max-same-class-box-iou",
        type=_fraction,
        default=None,
        help="reject placements whose box overlaps a same-category box by more than this IoU",
    )

    tc = sub.add_parser("train-category", help="stage 1: category segmentation network")
    tc.add_argument("--data", required=True)
    tc.add_argument("--out", required=True)
    tc.add_argument("--epochs", type=_nonneg_int, default=30)
    tc.add_argument("--seed", type=int, default=0)

    ti = sub.add_parser("train-instance", help="stage 2: instance network from a stage-1 model")
    ti.add_argument("--data", required=True)
    ti.add_argument("--init", required=True)
    ti.add_argument("--out", required=True)
    ti.add_argument("--epochs", type=_nonneg_int, default=60)
    ti.add_argument("--lambda", dest="lam", type=float, default=10.0)
    ti.add_argument("--seed", type=int, default=0)

    inf = sub.add_parser("infer", help="run both networks over a dataset")
    inf.add_argument("--category-model", required=True)
    inf.add_argument("--instance-model", required=True)
    inf.add_argument("--data", required=True)
    inf.add_argument("--out", required=True)

    d = sub.add_parser("decode", help="cluster predictions into instances")
    d.add_argument("--preds")
    d.add_argument("--out", required=True)
    d.add_argument("--sigma", type=_positive, default=0.5)
    d.add_argument("--tau", type=float, default=0.5)
    d.add_argument("--restarts", type=int, default=20)
    d.add_argument("--min-cluster-frac", type=_fraction, default=0.001)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--gt")
    d.add_argument("--mode", choices=("full", "upperbound_instnum", "upperbound_instloc"), default="full")

    e = sub.add_parser("eval", help="AP of decoded instances against ground truth")
    e.add_argument("--decoded", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--iou", type=_fraction, default=0.5)
    e.add_argument("--vol", action="store_true", help="also report the mean over IoU 0.1..0.9")
    e.add_argument("--report", help="write key=value results here")

    v = sub.add_parser("viz", help="dump PPM pictures of datasets, predictions or instances")
    v.add_argument("--input", required=True, nargs="+")
    v.add_argument("--out", required=True)
    return p


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(args) -> None:
    from .synth import GenConfig, generate_dataset

    h, w = args.size
    cfg = GenConfig(
        height=h,
        width=w,
        num_categories=args.classes,
        max_instances=args.max_instances,
        seed=args.seed,
        max_size=min(GenConfig.max_size, h, w),
        min_size=min(GenConfig.min_size, h, w),
        max_same_category_box_iou=args.max_same_class_box_iou,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    samples = generate_dataset(cfg, args.num, args.start)
    fileio.save_dataset(samples, args.out, cfg.num_categories)
    logger.info("wrote %d scenes to %s", len(samples), args.out)


def _checkpoint_dir(out: str) -> Path:
    p = Path(out)
    d = p.with_name(p.name + ".ckpt")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_manifest(out: str, manifest) -> None:
    Path(out + ".json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))


def cmd_train_category(args) -> None:
    from .net import NetConfig
    from .train import TrainConfig, train_category

    samples = fileio.load_dataset(args.data)
    if not samples:
        raise ValueError("dataset is empty")
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    net = NetConfig(num_categories=samples[0].num_categories)
    model, manifest = train_category(samples, cfg, net, out_dir=_checkpoint_dir(args.out))
    fileio.save_model(model, args.out)
    _write_manifest(args.out, manifest)
    logger.info("stage 1 done in %.1fs, final loss %s", manifest.wall_clock, manifest.epoch_losses[-1:])


def cmd_train_instance(args) -> None:
    from .train import TrainConfig, train_instance

    samples = fileio.load_dataset(args.data)
    if not samples:
        raise ValueError("dataset is empty")
    init = fileio.load_model(args.init)
    if args.lam < 0:
        raise UsageError("--lambda must be >= 0")
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, lam=args.lam)
    model, manifest = train_instance(samples, cfg, init, out_dir=_checkpoint_dir(args.out))
    fileio.save_model(model, args.out)
    _write_manifest(args.out, manifest)
    logger.info(
        "stage 2 done in %.1fs, initial loss %s, final loss %s",
        manifest.wall_clock,
        manifest.initial_loss,
        manifest.epoch_losses[-1:],
    )


def cmd_infer(args) -> None:
    from .pipeline import infer

    cat_model = fileio.load_model(args.category_model)
    inst_model = fileio.load_model(args.instance_model)
    samples = fileio.load_dataset(args.data)
    preds = infer(cat_model, inst_model, samples)
    fileio.save_predictions(preds, args.out)
    logger.info("wrote predictions for %d scenes to %s", len(preds), args.out)


def cmd_decode(args) -> None:
    from .decoder import DecodeParams
    from .pipeline import run_pipeline

    if args.mode != "full" and not args.gt:
        raise UsageError(f"--mode {args.mode} needs --gt")
    if args.mode != "upperbound_instloc" and not args.preds:
        raise UsageError(f"--mode {args.mode} needs --preds")
    if args.restarts < 1:
        raise UsageError("--restarts must be >= 1")
    preds = fileio.load_predictions(args.preds) if args.preds else None
    gts = fileio.load_dataset(args.gt) if args.gt else None
    params = DecodeParams(
        sigma=args.sigma,
        tau=args.tau,
        restarts=args.restarts,
        min_frac=args.min_cluster_frac,
        seed=args.seed,
    )
    t0 = time.perf_counter()
    results = run_pipeline(args.mode, preds, gts, params)
    fileio.save_instances(results, args.out)
    logger.info(
        "decoded %d scenes (%d instances) in %.1fs",
        len(results),
        sum(len(r) for r in results),
        time.perf_counter() - t0,
    )


def cmd_eval(args) -> None:
    from .metrics import ap_r, ap_r_vol
    from .pipeline import ground_truth_instances

    decoded = fileio.load_instances(args.decoded)
    gts = ground_truth_instances(fileio.load_dataset(args.gt))
    if len(decoded) != len(gts):
        raise ValueError(f"{len(decoded)} decoded scenes but {len(gts)} ground-truth scenes")
    report = ap_r(decoded, gts, args.iou)
    if args.vol:
        report.ap_vol = ap_r_vol(decoded, gts)
    sys.stdout.write(report.to_text())
    if args.report:
        Path(args.report).write_text(report.to_kv())


def cmd_viz(args) -> None:
    from .viz import export_ppm

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for src in args.input:
        stem = Path(src).stem
        data = fileio.read_file(src)
        magic = data[:4]
        if magic == b"PFND":
            for i, s in enumerate(fileio.dataset_from_bytes(data)):
                export_ppm(s.image, out / f"{stem}_{i:04d}_image.ppm")
                export_ppm(s.labels, out / f"{stem}_{i:04d}_labels.ppm")
                written += 2
                masks = [s.instance_ids == iid for iid in sorted(s.boxes)]
                if masks:
                    export_ppm(masks, out / f"{stem}_{i:04d}_instances.ppm")
                    written += 1
        elif magic == b"PFNP":
            for i, p in enumerate(fileio.predictions_from_bytes(data)):
                export_ppm(p.labels.astype("int64"), out / f"{stem}_{i:04d}_labels.ppm")
                written += 1
        elif magic == b"PFNI":
            for i, insts in enumerate(fileio.instances_from_bytes(data)):
                if insts:
                    export_ppm([inst.mask for inst in insts], out / f"{stem}_{i:04d}_instances.ppm")
                    written += 1
        elif magic == b"PFNT":
            export_ppm(fileio.tensor_from_bytes(data), out / f"{stem}.ppm")
            written += 1
        else:
            raise FormatError(f"{src}: unrecognised magic {magic!r}")
    logger.info("wrote %d pictures to %s", written, out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-category": cmd_train_category,
    "train-instance": cmd_train_instance,
    "infer": cmd_infer,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "viz": cmd_viz,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except (FormatError, ValueError, KeyError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
