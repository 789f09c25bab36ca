"""``metapt`` command line: one subcommand per pipeline stage.

Exit codes:
    0  success
    2  configuration error (bad file, unknown key, invalid value)
    3  missing or corrupt upstream artifact
    4  numeric failure (NaN/Inf in a forward or backward pass)
    5  artifact directory locked by another run
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import pipeline
from .autodiff import NonFiniteError
from .checkpoint import CheckpointError
from .config import SMOKE_CONFIG, ConfigError, dump_config, load_config
from .data import DataError
from .downstream import MissingArtifact

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC, EXIT_LOCKED = 0, 2, 3, 4, 5

log = logging.getLogger("metapt")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metapt", description="Meta-learned prompt tuning pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("-c", "--config", help="YAML config (defaults apply when omitted)")
        sp.add_argument("--smoke", action="store_true", help="use the bundled smoke config")
        sp.add_argument("-o", "--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted override, e.g. maml.inner_lr=0.05")
        return sp

    add("pretrain-backbone", "MLM-pretrain and freeze the mini backbone")
    add("pseudo-label", "train the annotator and pseudo-label the pool")
    add("cluster", "split the pseudo-labelled pool into meta tasks")
    add("meta-train", "prompt-MAML over the meta tasks")
    add("ppt-train", "PPT baseline: prompt tuning on the pooled data")
    t = add("tune", "tune one prompt on one few-shot split")
    t.add_argument("--method", default="MetaPT", choices=["PT", "PPT", "MetaPT"])
    t.add_argument("--dataset", required=True)
    t.add_argument("--seed", type=int, default=0)
    add("eval", "run every method x dataset x seed cell and write EvalReports")
    a = add("ablate", "data-size, cluster-count and clustering-method sweeps")
    a.add_argument("--sweep", action="append", choices=["datasize", "clusters", "methods"])
    add("run-all", "every stage from pretrain-backbone to eval")
    add("show-config", "print the fully resolved config")
    return p


def _run(args, cfg) -> dict:
    cmd = args.command
    if cmd == "tune":
        return pipeline.stage_tune(cfg, args.method, args.dataset, args.seed)
    if cmd == "ablate":
        return pipeline.stage_ablate(cfg, args.sweep)
    if cmd == "run-all":
        return pipeline.run_all(cfg)
    fn = {"pretrain-backbone": pipeline.stage_pretrain_backbone, "pseudo-label": pipeline.stage_pseudo_label,
          "cluster": pipeline.stage_cluster, "meta-train": pipeline.stage_meta_train,
          "ppt-train": pipeline.stage_ppt_train, "eval": pipeline.stage_eval}[cmd]
    return fn(cfg)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        path = SMOKE_CONFIG if args.smoke else args.config
        if path is not None and not Path(path).exists():
            raise ConfigError(f"config file {path} does not exist")
        cfg = load_config(path, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "show-config":
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    root = cfg.artifacts
    root.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(root / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        print(f"artifact directory {root} is locked by another run", file=sys.stderr)
        return EXIT_LOCKED
    try:
        (root / "resolved_config.yaml").write_text(dump_config(cfg))
        result = _run(args, cfg)
    except (MissingArtifact, CheckpointError, FileNotFoundError) as exc:
        print(f"missing or invalid artifact: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        lock.release()
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
