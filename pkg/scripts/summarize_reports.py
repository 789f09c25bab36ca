#!/usr/bin/env python3
"""Print every EvalReport under an artifact directory as a method x dataset table."""
import sys
from pathlib import Path

from metapt.downstream import EvalReport


def main(root):
    reps = [EvalReport.from_json(p.read_text()) for p in sorted(Path(root, "reports").glob("*_*.json"))]
    datasets = sorted({r.dataset for r in reps})
    print("method   " + "  ".join(f"{d:>16s}" for d in datasets))
    for method in dict.fromkeys(r.method for r in reps):
        cells = {r.dataset: r for r in reps if r.method == method}
        print(f"{method:8s} " + "  ".join(f"{cells[d].mean:7.4f} +- {cells[d].std:.4f}" if d in cells else " " * 16
                                         for d in datasets))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "artifacts/desk")
