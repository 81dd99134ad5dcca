"""Command-line entry point: ``nrd <command> ...``.

Exit codes: 0 success, 1 validation failure (bad config, missing or malformed
file, failed gradient check), 2 contract violation (shape or divisibility).
"""

import argparse
import csv
import functools
import io
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from . import core, datagen, evaluation, gradcheck, ops, tensors, training
from .ops import ContractError

log = logging.getLogger("nrd")

EVAL_HEADER = ["decoder", "miou", "trimap_miou", "decoder_macs", "total_macs"]
HELP_WIDTH = 88


class CommandError(Exception):
    """Validation failure with a one-line message for the operator."""


def _fmt(value):
    return "" if value is None else f"{value:.6f}"


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


def _need_file(path, what):
    if not os.path.isfile(path):
        raise CommandError(f"{what} not found: {path}")


def _split(images, labels, is_val):
    train = (images[~is_val], labels[~is_val])
    val = (images[is_val], labels[is_val])
    return train, val


# ------------------------------------------------------------------ commands


def cmd_gen_data(args):
    _need_file(args.spec, "spec file")
    spec = config_mod.load_config(args.spec, datagen.SynthSpec)
    datagen.gen_synthetic(spec, args.out)
    print(f"wrote {spec.count} samples ({spec.n_val} val) to {args.out}")


def cmd_train(args):
    _need_file(args.config, "config file")
    _need_file(args.data, "dataset")
    run_cfg = config_mod.load_config(args.config).validate()
    images, labels, is_val = datagen.load_dataset(args.data)
    (tr_i, tr_l), val = _split(images, labels, is_val)
    if args.resume:
        _need_file(args.resume, "checkpoint")
    training.train(run_cfg, tr_i, tr_l, args.out_dir, val=val, resume=args.resume)
    print(f"checkpoint: {os.path.join(args.out_dir, 'final.nrdb')}")


def cmd_eval(args):
    _need_file(args.checkpoint, "checkpoint")
    _need_file(args.data, "dataset")
    params, _, run_cfg = training.load_checkpoint(args.checkpoint)
    mcfg = run_cfg.model_config()
    images, labels, is_val = datagen.load_dataset(args.data)
    if is_val.any():
        images, labels = images[is_val], labels[is_val]
    width = args.trimap_width if args.trimap_width is not None else run_cfg.trimap_width
    m, tm, _, _ = training.evaluate(params, mcfg, images, labels, width)
    h = images.shape[1] + (-images.shape[1] % 32)
    w = images.shape[2] + (-images.shape[2] % 32)
    cost = evaluation.count_macs(mcfg, h, w)
    _write_csv(args.out, EVAL_HEADER, [[mcfg.decoder, _fmt(m), _fmt(tm), cost.decoder_macs, cost.total]])
    print(f"{mcfg.decoder}: mIoU={_fmt(m)} trimap mIoU={_fmt(tm)}")


def cmd_infer(args):
    _need_file(args.checkpoint, "checkpoint")
    _need_file(args.image, "image")
    params, _, run_cfg = training.load_checkpoint(args.checkpoint)
    mcfg = run_cfg.model_config()
    image = tensors.tensor_read(args.image)
    if image.ndim != 3 or image.shape[-1] != mcfg.encoder.in_channels:
        raise ContractError(f"image must be H x W x {mcfg.encoder.in_channels}, got {image.shape}")
    h, w = image.shape[:2]
    padded = np.pad(image, ((0, -h % 32), (0, -w % 32), (0, 0)), mode="edge")
    pred = training.model.predict(params, padded[None].astype(np.float32), mcfg)[0, :h, :w]
    tensors.pgm_write(pred, args.out_label)
    tensors.ppm_color_write(pred, args.out_color)


def cmd_fit_patch(args):
    _need_file(args.patch, "patch")
    patch = tensors.pgm_read(args.patch)
    if patch.shape[0] != patch.shape[1] or patch.shape[0] % core.LOW_LEVEL_RATIO:
        raise ContractError(f"patch must be square with side divisible by 4, got {patch.shape}")
    valid = patch[patch != tensors.IGNORE]
    if valid.size and valid.max() >= args.classes:
        raise CommandError(f"patch holds class {valid.max()} but --classes is {args.classes}")
    cfg = core.NrdConfig(
        r=patch.shape[0], num_classes=args.classes, hidden=args.hidden, guidance_channels=args.guidance_channels
    )
    _, acc, losses = training.fit_patch(patch, cfg, steps=args.steps, lr=args.lr, seed=args.seed)
    _write_csv(args.out, ["step", "accuracy", "loss"], [[k, f"{a:.6f}", f"{l:.6f}"] for k, (a, l) in enumerate(zip(acc, losses))])
    print(f"params={core.build_param_layout(cfg).total} final accuracy={acc[-1]:.4f}")


def cmd_count_flops(args):
    _need_file(args.config, "config file")
    run_cfg = config_mod.load_config(args.config).validate()
    try:
        h, w = (int(v) for v in args.hw.lower().split("x"))
    except ValueError:
        raise CommandError(f"--hw must look like 1024x2048, got {args.hw!r}") from None
    report = evaluation.count_macs(run_cfg.model_config(), h, w)
    with open(args.out, "w", newline="") as f:
        f.write(report.to_csv())
    print(report.pretty())


def cmd_gradcheck(args):
    try:
        reports = gradcheck.run_suite(args.op, trials=args.trials, seed=args.seed)
    except KeyError as e:
        raise CommandError(e.args[0]) from None
    ok = True
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.op:<24} trials={r.trials:<3} probes={r.probes:<5} max_rel_err={r.max_rel_error:.3e}  {status}")
        ok &= r.passed
    if not ok:
        return 1


# -------------------------------------------------------------------- parser


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults, except for required flags and flags without one."""

    def _get_help_string(self, action):
        if action.required or action.default is None:
            return action.help
        return super()._get_help_string(action)


def build_parser():
    fmt = functools.partial(_HelpFormatter, width=HELP_WIDTH)
    parser = argparse.ArgumentParser(prog="nrd", description="Neural representational decoders at desk scale.", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "Generate a synthetic shape dataset.")
    p.add_argument("--spec", required=True, help="key=value dataset spec file")
    p.add_argument("--out", required=True, help="output NRDB dataset")

    p = add("train", cmd_train, "Train a segmenter on the train split of a dataset.")
    p.add_argument("--config", required=True, help="key=value run config")
    p.add_argument("--data", required=True, help="NRDB dataset")
    p.add_argument("--out-dir", required=True, help="directory for checkpoints and metrics.csv")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = add("eval", cmd_eval, "Evaluate a checkpoint on the val split (or all samples).")
    p.add_argument("--checkpoint", required=True, help="NRDB checkpoint")
    p.add_argument("--data", required=True, help="NRDB dataset")
    p.add_argument("--trimap-width", type=int, default=None, help="trimap band width; default from the config")
    p.add_argument("--out", required=True, help="output CSV")

    p = add("infer", cmd_infer, "Segment one image.")
    p.add_argument("--checkpoint", required=True, help="NRDB checkpoint")
    p.add_argument("--image", required=True, help="H x W x 3 NRDT image")
    p.add_argument("--out-label", required=True, help="output PGM label map")
    p.add_argument("--out-color", required=True, help="output PPM visualisation")

    p = add("fit-patch", cmd_fit_patch, "Fit one representational network to a label patch.")
    p.add_argument("--patch", required=True, help="square PGM label patch")
    p.add_argument("--steps", type=int, default=500, help="gradient steps")
    p.add_argument("--lr", type=float, default=0.1, help="learning rate")
    p.add_argument("--seed", type=int, default=0, help="initialisation seed")
    p.add_argument("--classes", type=int, default=19, help="number of output classes")
    p.add_argument("--hidden", type=int, default=16, help="hidden width of the network")
    p.add_argument("--guidance-channels", type=int, default=0, help="zero-valued guidance inputs")
    p.add_argument("--out", required=True, help="output CSV of step,accuracy,loss")

    p = add("count-flops", cmd_count_flops, "Count per-component MACs of a configured model.")
    p.add_argument("--config", required=True, help="key=value run config")
    p.add_argument("--hw", default="1024x2048", help="input extent HxW")
    p.add_argument("--out", required=True, help="output CSV")

    p = add("gradcheck", cmd_gradcheck, "Run the finite-difference gradient suite.")
    p.add_argument("--op", default="all", help=f"one of: all, {', '.join(sorted(gradcheck.CASES))}")
    p.add_argument("--trials", type=int, default=20, help="random instances per op")
    p.add_argument("--seed", type=int, default=0, help="seed for the random instances")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args) or 0
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CommandError, config_mod.ConfigError, tensors.FormatError, training.TrainingDiverged, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
