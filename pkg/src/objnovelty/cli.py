"""Command-line entry point: ``objnovelty <verb> --config run.yaml [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ObjNoveltyError


def _add_common(p):
    p.add_argument("--config", "-c", help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. defend.epochs=1 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--no-defend", action="store_true", help="skip stage one (MKD-only ablation)")
    p.add_argument("--normal", help="comma-separated normal class ids, or 'each'")


def _config(args):
    from .runner import load_config

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if args.no_defend:
        overrides.append("defend_enabled=false")
    if args.normal:
        value = args.normal if args.normal == "each" else "[" + args.normal + "]"
        overrides.append(f"split.normal={value}")
    return load_config(args.config, overrides)


def _run_until(args, stage):
    from .runner import Experiment

    exp = Experiment(_config(args))
    table = exp.run(stop_after=stage)
    if table is not None:
        for split, auc in table.rows:
            print(f"{table.method}\t{split}\t{auc:.4f}")
        print(f"{table.method}\tAVG\t{table.mean:.4f}")
    else:
        print(f"completed through stage '{stage}' in {exp.out}")
    return 0


def cmd_eval(args):
    if args.scores:
        from .scoring import evaluate, read_scores_csv

        report = evaluate(read_scores_csv(args.scores), metadata={"scores": args.scores})
        if args.out:
            report.to_json(args.out)
        print(json.dumps({"auroc": report.auroc, "counts": report.counts}))
        return 0
    return _run_until(args, "eval")


def cmd_report(args):
    from .runner import ResultTable, report_per_class

    tables = [ResultTable.read(p) for p in args.tables]
    rep = report_per_class(tables)
    if args.csv:
        rep.to_csv(args.csv)
    text = rep.to_text(scale=100.0 if args.percent else 1.0)
    if args.text:
        Path(args.text).write_text(text)
    print(text, end="")
    return 0


def cmd_pretrain_toy(args):
    from .pretrain import pretrain_toy_backbone, save_backbone

    model, acc = pretrain_toy_backbone(steps=args.steps, seed=args.seed)
    save_backbone(model, args.out)
    print(f"saved {args.out} (exact-match accuracy {acc:.3f})")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="objnovelty", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, stage, help_ in (
        ("split", "split", "build split manifests"),
        ("defend", "defend", "run through dense fine-tuning"),
        ("distill", "distill", "run through masked distillation"),
        ("score", "score", "run through test-set scoring"),
        ("run", "eval", "full pipeline"),
    ):
        p = sub.add_parser(verb, help=help_)
        _add_common(p)
        p.set_defaults(func=lambda a, s=stage: _run_until(a, s))
    p = sub.add_parser("eval", help="AUROC report from a scores CSV, or run through eval")
    _add_common(p)
    p.add_argument("--scores", help="scores CSV (sample_id, score, label)")
    p.add_argument("--out", help="write the EvalReport JSON here")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("report", help="per-class table from result CSVs")
    p.add_argument("tables", nargs="+")
    p.add_argument("--csv")
    p.add_argument("--text")
    p.add_argument("--percent", action="store_true", help="print AUROC x100")
    p.set_defaults(func=cmd_report)
    p = sub.add_parser("pretrain-toy", help="pretrain the vit_toy backbone on synthetic glyphs")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=1000)
    p.set_defaults(func=cmd_pretrain_toy)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ObjNoveltyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
