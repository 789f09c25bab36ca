#!/usr/bin/env python3
"""Data-size, cluster-count and clustering-method sweeps on an existing artifact directory.

Needs the backbone and pseudo-label stages of the same config to have run.

    python3 scripts/run_ablations.py configs/desk.yaml --sweep clusters
"""
import argparse
import csv
import logging

from metapt import pipeline
from metapt.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("-o", "--set", dest="overrides", action="append", default=[])
    ap.add_argument("--sweep", action="append", choices=["datasize", "clusters", "methods"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = load_config(args.config, args.overrides)
    done = pipeline.stage_ablate(cfg, args.sweep)
    for name in done:
        print(f"== {name}")
        for row in csv.DictReader((cfg.artifacts / "ablation" / f"{name}.csv").open()):
            print(f"  {row['setting']:>8}  {row['method']:7s} {float(row['mean']):.4f} +- {float(row['std']):.4f}")


if __name__ == "__main__":
    main()
