"""Few-shot adaptation, multi-seed evaluation, and the ablation sweep drivers."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import sample_fewshot
from .data import Dataset
from .metatrain import MamlConfig, PptConfig, meta_train, ppt_train
from .model import SoftPrompt, init_prompt
from .taskgen import ClusterConfig, cluster_pool
from .tuning import TuneConfig, Workbench, accuracy_counts, tune_full, tune_prompt

log = logging.getLogger(__name__)

METHODS = ("PT", "PPT", "MetaPT", "FT")


class MissingArtifact(RuntimeError):
    """An upstream prompt or task set needed by a method is absent."""


class HeldOut:
    """The test remainder; every read is recorded so tuning code can be audited."""

    def __init__(self, ds: Dataset):
        self._ds = ds
        self.accesses: list[str] = []

    def __len__(self):
        return len(self._ds)

    def open(self, purpose: str) -> Dataset:
        self.accesses.append(purpose)
        return self._ds


# ------------------------------------------------------------------ tuning

def prompt_tune(P_init: SoftPrompt, wb: Workbench, train: Dataset, valid: Dataset,
                cfg: TuneConfig) -> tuple[SoftPrompt, list[float]]:
    return tune_prompt(P_init, wb, train, valid, cfg)


@dataclass
class FullTuneResult:
    valid_acc: float
    workbench: Workbench
    curve: list[float]


def full_tune(wb: Workbench, train: Dataset, valid: Dataset, cfg: TuneConfig) -> FullTuneResult:
    """Tune all backbone weights on a private copy; the shared backbone is never written."""
    bb, best, curve = tune_full(wb.backbone.copy(), wb, train, valid, cfg)
    return FullTuneResult(best, wb.with_backbone(bb), curve)


def evaluate(model: SoftPrompt | FullTuneResult | None, wb: Workbench, test: Dataset | HeldOut) -> float:
    """Accuracy on the test split, computed as an exact ratio before the float conversion."""
    ds = test.open("evaluate") if isinstance(test, HeldOut) else test
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if isinstance(model, FullTuneResult):
        c, n = accuracy_counts(None, model.workbench, ds)
    else:
        c, n = accuracy_counts(None if model is None else model.P, wb, ds)
    return float(Fraction(c, n))


# ----------------------------------------------------------------- reports

def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    method: str
    dataset: str
    seeds: list[int]
    accuracies: list[float]
    mean: float
    std: float
    fingerprint: str
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, method, dataset, seeds, accuracies, fp, extra=None) -> "EvalReport":
        a = np.asarray(accuracies, dtype=np.float64)
        return cls(method, dataset, list(seeds), [float(x) for x in a], float(a.mean()),
                   float(a.std(ddof=0)), fp, dict(extra or {}))

    def consistent(self) -> bool:
        a = np.asarray(self.accuracies, dtype=np.float64)
        return self.mean == float(a.mean()) and self.std == float(a.std(ddof=0))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


@dataclass
class CellConfig:
    n_shot: int = 40
    tune: TuneConfig = field(default_factory=TuneConfig)
    ft: TuneConfig = field(default_factory=lambda: TuneConfig(lr=1e-3))


def run_cell(method: str, name: str, ds: Dataset, wb: Workbench, seeds: Sequence[int],
             cfg: CellConfig, init: SoftPrompt | None = None) -> EvalReport:
    """Per seed: resample the few-shot splits, tune, and score on the untouched remainder."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method in ("PPT", "MetaPT") and init is None:
        raise MissingArtifact(f"{method} needs a pre-trained prompt")
    if not seeds:
        raise ValueError("run_cell needs at least one seed")
    accs, details = [], []
    for s in seeds:
        train, valid, rest = sample_fewshot(ds, cfg.n_shot, s)
        test = HeldOut(rest)
        if method == "FT":
            res = full_tune(wb, train, valid, replace(cfg.ft, seed=s))
            acc, curve = evaluate(res, wb, test), res.curve
        else:
            P0 = init if method != "PT" else init_prompt(wb.backbone.config, "random-normal", s)
            P, curve = prompt_tune(P0, wb, train, valid, replace(cfg.tune, seed=s))
            acc = evaluate(P, wb, test)
        if test.accesses != ["evaluate"]:
            raise RuntimeError(f"test split touched outside evaluation: {test.accesses}")
        accs.append(acc)
        details.append({"seed": s, "epochs": len(curve) - 1, "best_valid": max(curve)})
        log.info("%s on %s seed %d: %.4f", method, name, s, acc)
    fp = fingerprint({
        "method": method, "dataset": name, "n": len(ds), "cell": asdict(cfg),
        "backbone": wb.backbone.content_hash(),
        "init": None if init is None or method in ("PT", "FT") else fingerprint(init.P.tobytes().hex()),
    })
    return EvalReport.build(method, name, seeds, accs, fp, {"runs": details})


# --------------------------------------------------------------- ablations

CSV_FIELDS = ["sweep", "setting", "method", "dataset", "seeds", "accuracies", "mean", "std",
              "fingerprint", "pool_size", "n_tasks", "meta_steps", "inertia", "silhouette"]


@dataclass
class AblationContext:
    """Everything the sweeps share: backbone, pseudo-labelled pool, target set and configs."""

    wb: Workbench
    pool: Dataset
    target_name: str
    target: Dataset
    seeds: list[int]
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    maml: MamlConfig = field(default_factory=MamlConfig)
    ppt: PptConfig = field(default_factory=PptConfig)
    cell: CellConfig = field(default_factory=CellConfig)


def _metapt_row(ctx: AblationContext, pool: Dataset, ccfg: ClusterConfig, sweep: str, setting) -> dict:
    tasks, info = cluster_pool(pool, ccfg, ctx.wb.backbone, ctx.wb.tokenizer)
    P, st = meta_train(tasks, ctx.wb, ctx.maml)
    rep = run_cell("MetaPT", ctx.target_name, ctx.target, ctx.wb, ctx.seeds, ctx.cell, P)
    return _row(sweep, setting, rep, pool_size=len(pool), n_tasks=len(tasks), meta_steps=st.step,
                inertia=info.get("inertia"), silhouette=info.get("silhouette"))


def _row(sweep, setting, rep: EvalReport, **extra) -> dict:
    row = {"sweep": sweep, "setting": setting, "method": rep.method, "dataset": rep.dataset,
           "seeds": " ".join(map(str, rep.seeds)),
           "accuracies": " ".join(f"{a:.6f}" for a in rep.accuracies),
           "mean": f"{rep.mean:.6f}", "std": f"{rep.std:.6f}", "fingerprint": rep.fingerprint}
    row.update({k: ("" if v is None else v) for k, v in extra.items()})
    return row


def ablate_datasize(ctx: AblationContext, sizes: Sequence[int]) -> list[dict]:
    """Subsample the pool to each size (capped at the pool) and rerun cluster, meta-train, tune."""
    rows = []
    for size in sizes:
        rng = np.random.default_rng(ctx.cluster.seed)
        n = min(int(size), len(ctx.pool))
        if n < size:
            log.warning("pool has %d examples; size %d is capped", len(ctx.pool), size)
        pool = ctx.pool.subset(sorted(rng.choice(len(ctx.pool), n, replace=False)), f"pool{n}")
        rows.append(_metapt_row(ctx, pool, ctx.cluster, "datasize", size))
    return rows


def ablate_clusters(ctx: AblationContext, Ks: Sequence[int]) -> list[dict]:
    return [_metapt_row(ctx, ctx.pool, replace(ctx.cluster, K=int(K)), "clusters", K) for K in Ks]


def ablate_methods(ctx: AblationContext, strategies: Sequence[str] = ("kmeans", "lda", "random", "label")
                   ) -> list[dict]:
    rows = [_metapt_row(ctx, ctx.pool, replace(ctx.cluster, strategy=s), "methods", s) for s in strategies]
    P, _ = ppt_train(ctx.pool, ctx.wb, ctx.ppt)
    rep = run_cell("PPT", ctx.target_name, ctx.target, ctx.wb, ctx.seeds, ctx.cell, P)
    rows.append(_row("methods", "ppt", rep, pool_size=len(ctx.pool)))
    return rows


def write_csv(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS, extrasaction="raise")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in CSV_FIELDS})
    return path


def write_svg(path, xs: Sequence[float], ys: Sequence[float], title: str, xlabel: str,
              width: int = 420, height: int = 280) -> Path:
    """A bare line chart of one sweep, good enough to eyeball a trend."""
    pad = 40
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    xr = (xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1)
    yr = (min(ys.min(), 0.0), max(ys.max(), 1e-9))

    def px(x):
        return pad + (x - xr[0]) / (xr[1] - xr[0]) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - yr[0]) / (yr[1] - yr[0]) * (height - 2 * pad)

    pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
    dots = "".join(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3"/>' for x, y in zip(xs, ys))
    labels = "".join(f'<text x="{px(x):.1f}" y="{height - pad + 16}" font-size="10" '
                     f'text-anchor="middle">{x:g}</text>' for x in xs)
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>'
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>'
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>'
           f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/>{dots}{labels}'
           f'<text x="{width / 2}" y="{height - 6}" text-anchor="middle" font-size="11">{xlabel}</text>'
           f'<text x="{pad - 4}" y="{py(yr[1]):.1f}" text-anchor="end" font-size="10">{yr[1]:.2f}</text>'
           f'<text x="{pad - 4}" y="{py(yr[0]):.1f}" text-anchor="end" font-size="10">{yr[0]:.2f}</text>'
           "</svg>")
    path = Path(path)
    path.write_text(svg)
    return path
