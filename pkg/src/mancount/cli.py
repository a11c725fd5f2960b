"""Command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import errors
from .config import load_config
from .gradcheck import gradcheck_cmd
from .harness import ablate, delta_sweep, evaluate, infer, train
from .model import summary
from .synthcrowd import SceneParams, generate_splits

log = logging.getLogger("mancount")


def _probe(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'x,y', got {text!r}") from None
    return x, y


def _deltas(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mancount", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write train/test splits of synthetic scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--count-min", type=int, default=5)
    p.add_argument("--count-max", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="report MAE/MSE of a checkpoint on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", help="per-image CSV (default: eval.csv next to the checkpoint)")

    p = sub.add_parser("delta-sweep", help="train and evaluate one model per delta")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--deltas", type=_deltas, default=[0.7, 0.8, 0.9, 1.0])
    p.add_argument("--out", default="delta_sweep")

    p = sub.add_parser("ablate", help="train the LRA x LAR x IAL on/off grid")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", default="ablation")

    p = sub.add_parser("gradcheck", help="finite-difference gate over all ops and the model")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("infer", help="predict a density map for one PGM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--probe", type=_probe, action="append", default=[],
                   help="token x,y whose last-layer region map is exported (repeatable)")

    p = sub.add_parser("summary", help="parameter count and forward cost")
    p.add_argument("--config")
    p.add_argument("--size", type=int, default=64)
    return parser


def run(args) -> int:
    if args.command == "generate":
        params = SceneParams(size=args.size, n_min=args.count_min, n_max=args.count_max)
        generate_splits(args.out, args.train, args.test, params, args.seed)
        print(f"wrote {args.train} train / {args.test} test scenes to {args.out}")
    elif args.command == "train":
        config = load_config(args.config)

        def progress(step, parts):
            if step % 100 == 0 or step == config.steps:
                log.info("step %d  l_ia=%.4f  r_lra=%.3e  total=%.4f",
                         step, parts.l_ia, parts.r_lra, parts.total)

        ckpt = train(args.data, config, args.out, progress)
        print(f"checkpoint: {ckpt}")
    elif args.command == "eval":
        report = evaluate(args.data, args.ckpt)
        out = Path(args.out) if args.out else Path(args.ckpt).with_name("eval.csv")
        report.write_csv(out)
        print(report.line())
    elif args.command == "delta-sweep":
        rows = delta_sweep(args.data, load_config(args.config), args.deltas, args.out)
        print(f"{'delta':>6} {'MAE':>10} {'MSE':>10}")
        for delta, mae, mse in rows:
            print(f"{delta:>6.2f} {mae:>10.4f} {mse:>10.4f}")
    elif args.command == "ablate":
        rows = ablate(args.data, load_config(args.config), args.out)
        print(f"{'LRA':>4} {'LAR':>4} {'IAL':>4} {'MAE':>10} {'MSE':>10}")
        for r in rows:
            print(f"{int(r['lra']):>4} {int(r['lar']):>4} {int(r['ial']):>4} "
                  f"{r['mae']:>10.4f} {r['mse']:>10.4f}")
    elif args.command == "gradcheck":
        return gradcheck_cmd(args.seed)
    elif args.command == "infer":
        count = infer(args.ckpt, args.image, args.out, args.probe)
        print(f"count={count!r}")
    elif args.command == "summary":
        info = summary(load_config(args.config).model_config(), args.size)
        for k, v in info.items():
            print(f"{k}: {v}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return run(args)
    except errors.UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (errors.ParseError, errors.ConfigurationError, errors.TrainingDiverged,
            errors.DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
