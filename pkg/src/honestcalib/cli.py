"""Command-line driver: metrics, mine, train, infer, synth, gradcheck."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .gradcheck import gradient_check
from .metrics import MetricError, build_report
from .mining import compute_eligibility, dump_triplets, mine_triplets, thread_count
from .policy import decide
from .records import RecordError, dump_records, load_records
from .synth import SynthConfig, generate
from .training import TrainingError, batch_seed, load_checkpoint, save_checkpoint, train
from .transport import TransportError

log = logging.getLogger("honestcalib")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_VALIDATION = 2

VALIDATION_ERRORS = (RecordError, ConfigError, MetricError, TransportError, ValueError)


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _write(path: Optional[str], text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _run_config(args, **overrides) -> RunConfig:
    return load_config(getattr(args, "config", None), overrides)


def _scaler_from(checkpoint: Optional[str]):
    if checkpoint is None:
        return None
    state, _, _ = load_checkpoint(checkpoint)
    return state.scaler


def cmd_metrics(args) -> int:
    cfg = _run_config(
        args,
        c_min=args.c_min,
        u_max_frac=args.u_max_frac,
        report_format=args.format,
        input=args.input,
        output=args.out,
        checkpoint=args.checkpoint,
    )
    records = load_records(cfg.input)
    scaler = _scaler_from(cfg.checkpoint)
    conf = None if scaler is None else scaler.confidences(records)
    abstained = [decide(r, cfg.c_min, cfg.u_max_frac, scaler).abstained for r in records]
    report = build_report(records, confidences=conf, abstained=abstained)
    _write(cfg.output, report.to_json() if cfg.report_format == "json" else report.to_csv())
    return EXIT_OK


def cmd_mine(args) -> int:
    cfg = _run_config(args, seed=args.seed, batch_size=args.batch_size, input=args.input, output=args.out)
    records = load_records(cfg.input)
    hp = cfg.hyper
    eligibility = compute_eligibility(records, hp)
    triplets = []
    for bi, start in enumerate(range(0, len(records), hp.batch_size)):
        batch = records[start : start + hp.batch_size]
        triplets.extend(mine_triplets(batch, hp, batch_seed(hp.seed, 0, bi), eligibility))
    if cfg.output is None:
        for t in triplets:
            sys.stdout.write(json.dumps(t.to_json()) + "\n")
    else:
        dump_triplets(triplets, cfg.output)
    log.info("mined %d triplets from %d records", len(triplets), len(records))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(
        args,
        epochs=args.epochs,
        learning_rate=args.lr,
        seed=args.seed,
        input=args.input,
        output=args.out,
    )
    if cfg.output is None:
        raise ConfigError("train requires --out <checkpoint>")
    records = load_records(cfg.input)
    state = train(records, cfg.hyper)
    save_checkpoint(state, cfg.hyper, cfg.output, run_config=cfg.to_dict())
    loss_csv = args.loss_csv or str(Path(cfg.output).with_name(Path(cfg.output).stem + "_loss.csv"))
    with open(loss_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_total_loss"])
        for epoch, loss in enumerate(state.loss_history):
            writer.writerow([epoch, repr(loss)])
    log.info("trained %d steps; temperature %.4f", state.step, state.scaler.temperature)
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _run_config(
        args,
        c_min=args.c_min,
        u_max_frac=args.u_max_frac,
        input=args.input,
        output=args.out,
        checkpoint=args.checkpoint,
    )
    records = load_records(cfg.input)
    scaler = _scaler_from(cfg.checkpoint)
    lines = [
        json.dumps(decide(r, cfg.c_min, cfg.u_max_frac, scaler).to_json(r.record_id)) + "\n"
        for r in records
    ]
    _write(cfg.output, "".join(lines))
    return EXIT_OK


def cmd_synth(args) -> int:
    values = {f.name: getattr(args, f.name) for f in fields(SynthConfig) if getattr(args, f.name) is not None}
    dump_records(generate(SynthConfig(**values)), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    result = gradient_check(seed=args.seed, n_configs=args.configs)
    _write(args.out, result.summary() + "\n")
    return EXIT_OK if result.passed else EXIT_INTERNAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="honestcalib", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("metrics", parents=[common], help="honesty report for a prediction log")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", help="apply the learned temperature before scoring")
    p.add_argument("--format", choices=("json", "csv"))
    p.add_argument("--out")
    p.add_argument("--c-min", type=float)
    p.add_argument("--u-max-frac", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("mine", parents=[common], help="emit contrastive triplets as JSONL")
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", parents=[common], help="fit the projection head and temperature")
    p.add_argument("--input", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", help="default: <out stem>_loss.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="answer-or-abstain decisions as JSONL")
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.add_argument("--checkpoint")
    p.add_argument("--c-min", type=float)
    p.add_argument("--u-max-frac", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic prediction log")
    p.add_argument("--out", required=True)
    for f in fields(SynthConfig):
        kind = _bool if isinstance(f.default, bool) else type(f.default)
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_VALIDATION
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        thread_count()
        return args.func(args)
    except TrainingError as exc:
        log.error("%s", exc)
        return EXIT_INTERNAL
    except VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except Exception:  # pragma: no cover
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
