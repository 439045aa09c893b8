"""Command-line entry point: ``cirm <subcommand> [--config PATH] [--out DIR] ...``.

Errors are reported as one JSON line on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import CirmError, StageError

SUBCOMMANDS = {
    "gen-corpus": "generate train/val/test preference pairs and annotation candidate sets",
    "init-model": "initialize the toy reward model from its seed",
    "train": "train the reward model on the training pairs",
    "collect": "record last-token activations over the validation responses",
    "identify": "rank every neuron against every bias feature",
    "tune": "search per-bias k and write the intervention manifest",
    "score": "score the test pairs with every method",
    "annotate": "best-vs-worst annotation of the candidate sets",
    "eval": "subset accuracies per method",
    "report": "assemble report.json and the neuron histograms",
    "run-all": "run every stage in order",
}

_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    common.add_argument("--threads", type=int, default=1, help="cap on worker threads (default 1)")
    common.add_argument("--out", metavar="DIR", help="work directory for all artifacts")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config value, e.g. --set train.epochs=5",
    )
    parser = argparse.ArgumentParser(prog="cirm", description="Causal intervention on toy reward models.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name, help_text in SUBCOMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def _cap_threads(n: int) -> None:
    if n < 1:
        raise CirmError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _fail(exc: BaseException, command: str | None) -> int:
    doc = {"error": type(exc).__name__, "command": command, "message": str(exc)}
    if isinstance(exc, StageError) and exc.producer:
        doc["producer"] = exc.producer
    print(json.dumps(doc), file=sys.stderr)
    return 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = os.environ.get("CIRM_LOG", "info").lower()
    logging.basicConfig(
        level=_LEVELS.get(level, logging.INFO), format="%(name)s %(levelname)s %(message)s", stream=sys.stderr
    )
    log = logging.getLogger("cirm")
    try:
        _cap_threads(args.threads)
        # heavy imports after the thread cap is in place
        from .config import describe, load_config
        from .pipeline import STAGES, run_stage

        cfg, sources = load_config(args.config, args.overrides, args.seed, args.out)
        for line in describe(cfg, sources):
            log.info("config %s", line)
        stages = STAGES if args.command == "run-all" else (args.command,)
        for stage in stages:
            log.info("stage %s", stage)
            run_stage(cfg, stage)
    except (CirmError, OSError, ValueError) as exc:
        return _fail(exc, args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
