"""Command-line entry point: ``msnn <subcommand> --config <path> ...``."""
import argparse
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .config import load_config


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="msnn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out-dir", required=True, type=Path)
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    add("init-kernels", "train the subspace bank and write kernels.asom")
    p = add("train", "train and evaluate a network")
    p.add_argument("--bank", type=Path,
                   help="module bank file (default: <out-dir>/kernels.asom, trained if absent)")
    p = add("sweep", "one run per value of a network parameter")
    p.add_argument("--axis", required=True, choices=sorted(ex.SWEEP_AXES))
    p.add_argument("--values", required=True, type=_ints)
    p = add("noise", "test error under Gaussian noise on kernel weights")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--levels", type=_floats, default=[0.1, 0.2, 0.3])
    p.add_argument("--stds", type=_floats, default=[0.5, 0.75, 1.0])
    p.add_argument("--mean", type=float, default=0.0)
    p.add_argument("--trials", type=int, default=5)
    p = add("dump-visuals", "write kernels and feature maps of one block as PGM")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--sample", type=int, default=0, help="test-set index of the input image")
    p.add_argument("--block", type=int, default=0)
    p = add("dump-errors", "write misclassified test images as PGM")
    p.add_argument("--checkpoint", required=True, type=Path)
    return parser


def run(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    out = args.out_dir
    if args.command == "init-kernels":
        res = ex.run_kernel_init(cfg, out)
        print(f"wrote {res.path} (mean residual {res.residual_before:.5f} -> "
              f"{res.residual_after:.5f})")
    elif args.command == "train":
        splits = ex.load_splits(cfg)
        bank = None
        if cfg.kernel_init == "subspace":
            bank = args.bank or out / ex.BANK_FILE
            if not Path(bank).exists():
                if args.bank is not None:
                    raise FileNotFoundError(f"module bank {bank} not found")
                bank = ex.run_kernel_init(cfg, out, train=splits[0]).bank
        report, _ = ex.run_train(cfg, out, bank=bank, splits=splits)
        print(f"train error {report.train_error:.4%}, test error {report.test_error:.4%}")
    elif args.command == "sweep":
        rows = ex.run_sweep(cfg, args.axis, args.values, out)
        for value, te, _, status in rows:
            print(f"{args.axis}={value}: " + (f"{te:.4%}" if te is not None else status))
    elif args.command == "noise":
        net = ex.load_net(args.checkpoint, cfg)
        _, test = ex.load_splits(cfg)
        clean, rows = ex.run_noise(net, test, args.levels, args.stds, args.mean, args.trials,
                                   cfg.seed, out)
        print(f"clean {clean:.4%}")
        for r in rows:
            print(f"level {r.level:.0%} N({r.mean:g},{r.std:g}): "
                  f"{r.error_mean:.4%} +- {r.error_std:.4%}")
    elif args.command == "dump-visuals":
        net = ex.load_net(args.checkpoint, cfg)
        _, test = ex.load_splits(cfg)
        files = ex.dump_visuals(net, test.images[args.sample], out, args.block)
        print(f"wrote {len(files)} files to {out}")
    elif args.command == "dump-errors":
        net = ex.load_net(args.checkpoint, cfg)
        _, test = ex.load_splits(cfg)
        wrong = ex.misclassified_of(net, test)
        ex.dump_errors(wrong, test, out, ex.one_based_labels(cfg), ex.pixel_range(cfg))
        print(f"wrote {len(wrong)} misclassified images to {out}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"msnn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
