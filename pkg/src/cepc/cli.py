"""Command-line surface.

Subcommands mirror the pipeline stages so any stage can be cached to disk and
resumed: gen-synth, coordinate, train, predict, eval, bench. Exit codes:
0 success, 2 validation problem (bad inputs, malformed files, bad usage),
1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import coordination as co
from . import pipeline as pl
from . import reliability as rel
from . import trainer as tr
from .config import load_config
from .data import load_dataset, load_manifest, load_synth_spec, write_benchmark
from .errors import CepcError, DataError, FormatError, StageError, ValidationError
from .metrics import f1_metrics


def cmd_gen_synth(args: argparse.Namespace) -> int:
    manifest = write_benchmark(load_synth_spec(args.spec), args.out)
    print(manifest)
    return 0


def cmd_coordinate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.seed)
    sources, target, _ = load_manifest(args.manifest)
    plan = co.coordinate(sources, target, cfg)
    co.save_plan(plan, args.out)
    for name in sorted(plan.lambda_star):
        print(f"{name}: lambda*={plan.lambda_star[name]:g}")
    print(f"groups: {plan.groups}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.seed)
    sources, target, _ = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.plan is None:
        plan = co.coordinate(sources, target, cfg)
        co.save_plan(plan, out / "plan.json")
    else:
        plan = co.load_plan(args.plan)
    if args.reliability is None:
        table = rel.build_table(sources, target, plan, cfg)
        rel.save_table(table, out / "reliability.csv")
    else:
        table = rel.load_table(args.reliability)
    model, trace = tr.train_cepc(sources, target, plan, table, cfg)
    tr.save_checkpoint(model, out / "model.ckpt")
    tr.save_trace(trace, out / "trace.csv")
    print(f"trained {len(model.source_names)} sources, {len(trace)} steps -> {out}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = tr.load_checkpoint(args.model)
    target = load_dataset(args.target, role="target")
    det = tr.predict_details(model, target.features)
    pl.write_predictions(det, target, model.source_names, args.out)
    print(f"{target.n} predictions -> {args.out}")
    return 0


def read_predictions(path: str | Path) -> dict[str, int]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["doc_id", "pred"]:
            raise FormatError(f"{path}: expected a doc_id,pred,... header")
        preds: dict[str, int] = {}
        for row in reader:
            if len(row) < 2:
                raise FormatError(f"{path}: short row {row!r}")
            if row[0] in preds:
                raise FormatError(f"{path}: duplicate doc_id {row[0]!r}")
            try:
                preds[row[0]] = int(row[1])
            except ValueError as e:
                raise FormatError(f"{path}: bad label for {row[0]!r} ({e})") from e
    if not preds:
        raise FormatError(f"{path}: no prediction rows")
    return preds


def cmd_eval(args: argparse.Namespace) -> int:
    gold = load_dataset(args.gold)
    if (gold.labels == -1).any():
        raise DataError(f"{args.gold}: gold file must be fully labeled")
    preds = read_predictions(args.pred)
    missing = [doc_id for doc_id in gold.ids if doc_id not in preds]
    if missing:
        raise DataError(f"{args.pred}: no prediction for {len(missing)} gold ids")
    pred = np.array([preds[doc_id] for doc_id in gold.ids], dtype=np.int8)
    f1, precision, recall = f1_metrics(gold.labels, pred)
    print(json.dumps({"f1": f1, "precision": precision, "recall": recall}, sort_keys=True))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.seed)
    text, _ = pl.run_bench(
        args.manifest,
        cfg,
        args.seeds,
        args.out,
        baselines=args.baselines,
        ablations=args.ablations,
    )
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cepc", description="coordinated-encoder multi-source adaptation"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic benchmark")
    p.add_argument("--spec", required=True, help="generator spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("coordinate", help="grid-search lambdas and group encoders")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="config JSON (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="plan JSON path")
    p.set_defaults(func=cmd_coordinate)

    p = sub.add_parser("train", help="train the joint model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--plan", help="cached plan JSON (computed when omitted)")
    p.add_argument("--reliability", help="cached reliability CSV (computed when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="label a target file with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against gold labels")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run the pipeline over several seeds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--ablations", action="store_true")
    p.add_argument("--baselines", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if isinstance(e.original, (ValidationError, OSError)) else 1
    except (ValidationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CepcError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())
