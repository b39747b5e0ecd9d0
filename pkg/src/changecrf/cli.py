"""Command-line entry point: ``changecrf {synth,train,infer,eval,sweep}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config
from .em import TAU_GRID
from .synth import SynthConfig, write_corpus


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    if "manifest" in names:
        p.add_argument("--manifest", required=True, help="JSON-lines dataset manifest")
    if "config" in names:
        p.add_argument("--config", help="JSON run configuration")
    if "model" in names:
        p.add_argument("--model", help="checkpoint written by 'train'")
    if "seed" in names:
        p.add_argument("--seed", type=int)
    if "tau" in names:
        p.add_argument("--tau", type=float, help="fix tau instead of the KNN estimate")
        p.add_argument("--knn-k", type=int, dest="knn_k")
    if "rounds" in names:
        p.add_argument("--rounds", type=int)
    if "threads" in names:
        p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="changecrf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus and its manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100, help="number of pairs")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--change-rate", type=float, default=0.5, dest="change_rate")
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--prefix", default="pair")
    _common(p, "seed")

    p = sub.add_parser("train", help="run EM training and write a checkpoint")
    p.add_argument("--out", required=True, help="checkpoint path")
    _common(p, "manifest", "config", "seed", "tau", "rounds", "threads")

    p = sub.add_parser("infer", help="predict labels and change masks")
    p.add_argument("--out", required=True, help="output directory")
    _common(p, "manifest", "config", "model", "tau", "threads")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--predictions", required=True, help="directory written by 'infer'")
    p.add_argument("--out", required=True, help="report directory")
    _common(p, "manifest", "config")

    p = sub.add_parser("sweep", help="pooled mIOU for a grid of fixed tau values")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--taus", default=",".join(str(t) for t in TAU_GRID))
    _common(p, "manifest", "config", "model", "threads")
    return parser


def _config(args):
    overrides = {k: getattr(args, k, None) for k in ("seed", "tau", "knn_k", "rounds", "threads")}
    return load_config(getattr(args, "config", None)).with_overrides(**overrides)


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "synth":
        cfg = SynthConfig(
            n_pairs=args.n,
            size=args.size,
            change_rate=args.change_rate,
            noise=args.noise,
            seed=0 if args.seed is None else args.seed,
        )
        print(write_corpus(cfg, args.out, args.prefix))
        return 0

    config = _config(args)
    if args.command == "train":
        model = pipeline.train_cmd(args.manifest, config, args.out)
        rates = " ".join(f"{r:.4f}" for r in model.change_rates)
        print(f"wrote {args.out}: tau_train={model.tau_train} rounds={model.rounds} change_rates={rates}")
    elif args.command == "infer":
        model = pipeline.load_model(args.model) if args.model else None
        preds = pipeline.infer(args.manifest, config, model, args.out)
        print(f"wrote {len(preds)} predictions to {args.out}")
    elif args.command == "eval":
        report = pipeline.eval_cmd(args.manifest, args.predictions, config, args.out)
        for key in sorted(report.summary):
            print(f"{key},{report.summary[key]}")
    elif args.command == "sweep":
        if not args.model:
            raise pipeline.ConfigurationError("sweep needs --model")
        taus = [float(t) for t in args.taus.split(",") if t.strip()]
        rows = pipeline.tau_sweep(args.manifest, config, pipeline.load_model(args.model), taus, args.out)
        print("tau,miou")
        for tau, score in rows:
            print(f"{tau},{score.miou}")
    return 0


def main() -> None:
    try:
        sys.exit(run())
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(2)


if __name__ == "__main__":
    main()
