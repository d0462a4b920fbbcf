"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

import yaml

from . import pipeline
from .policy import ANCHORS

log = logging.getLogger("thinkroute")


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"override must look like key=value, got {text!r}")
    return key.strip(), yaml.safe_load(value)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--workdir", help="working directory for all artifacts")
    common.add_argument("--seed", type=int)
    common.add_argument("--set", dest="overrides", action="append", type=_parse_override, default=[],
                        metavar="KEY=VALUE", help="override a config value, e.g. policy.anchor=knee")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="thinkroute", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic workload")
    p.add_argument("--n", type=int, dest="n_instances", help="number of instances")
    p.add_argument("--task", choices=("Rec", "IR"))
    sub.add_parser("ingest", parents=[common], help="validate inputs and assign splits")
    p = sub.add_parser("collect", parents=[common], help="query both modes through the gateway")
    p.add_argument("--backend", choices=("stub", "http"))
    sub.add_parser("label", parents=[common], help="compute advantage labels")
    p = sub.add_parser("probe", parents=[common], help="run the checklist probes")
    p.add_argument("--backend", choices=("stub", "http"))
    p.add_argument("--checklist", help="checklist JSONL file")
    sub.add_parser("features", parents=[common], help="extract routing features")
    sub.add_parser("select", parents=[common], help="select features")
    sub.add_parser("train", parents=[common], help="train the router")
    sub.add_parser("sweep", parents=[common], help="sweep eta on the validation split")
    p = sub.add_parser("policy", parents=[common], help="choose an anchor and freeze eta")
    p.add_argument("--anchor", choices=ANCHORS)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--eta", type=float, help="eta for the manual anchor")
    p = sub.add_parser("route", parents=[common], help="route a split with the frozen policy")
    p.add_argument("--split", choices=pipeline.SPLITS)
    sub.add_parser("eval", parents=[common], help="evaluate all arms on logged outcomes")
    p = sub.add_parser("report", parents=[common], help="write report.json / report.md")
    p.add_argument("--baseline", choices=pipeline.ARMS)
    p = sub.add_parser("run", parents=[common], help="run every stage from ingest to report")
    p.add_argument("--synth", action="store_true", help="generate a synthetic workload first")
    p.add_argument("--n", type=int, dest="n_instances")
    return parser


_FLAG_KEYS = {
    "workdir": "workdir",
    "seed": "seed",
    "n_instances": "synth.n_instances",
    "task": "synth.task",
    "backend": "backend",
    "checklist": "checklist",
    "anchor": "policy.anchor",
    "epsilon": "policy.epsilon",
    "eta": "policy.eta",
    "split": "eval.split",
    "baseline": "eval.baseline",
}


def config_from_args(args: argparse.Namespace) -> pipeline.PipelineConfig:
    overrides = dict(args.overrides)
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return pipeline.load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
        cfg.workdir.mkdir(parents=True, exist_ok=True)
        if args.command == "run":
            outputs = pipeline.run_pipeline(cfg, with_synth=args.synth)
        else:
            outputs = pipeline.STAGES[args.command](cfg)
    except Exception as exc:  # reported as one structured line, never a traceback
        if args.verbose:
            log.exception("stage failed")
        err = {"status": "error", "command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, "outputs": [str(p) for p in outputs]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
