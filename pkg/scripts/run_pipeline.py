#!/usr/bin/env python3
"""Run every pipeline stage for a config and print the per-method summary.

    python3 scripts/run_pipeline.py configs/desk.yaml [-o key=value ...]
"""
import argparse
import json
import logging

from metapt import pipeline
from metapt.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("-o", "--set", dest="overrides", action="append", default=[])
    ap.add_argument("--stages", nargs="*", default=list(pipeline.STAGES))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = load_config(args.config, args.overrides)
    out = pipeline.run_all(cfg, args.stages)
    print(json.dumps({k: v.get("seconds") for k, v in out.items()}, indent=2))
    if "eval" in args.stages:
        for method, s in pipeline.summarize(pipeline.load_reports(cfg)).items():
            print(f"{method:7s} mean {s['mean']:.4f}  std {s['std']:.4f}")


if __name__ == "__main__":
    main()
