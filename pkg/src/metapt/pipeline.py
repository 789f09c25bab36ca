"""Pipeline stages over an artifact directory; the CLI subcommands are thin wrappers.

Every stage reads verified upstream artifacts, writes its own outputs plus a
``manifest.json`` naming the hashes of what it consumed and produced, and never
modifies an upstream file.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .corpus import (
    Annotator,
    balance,
    make_synthetic_benchmark,
    pseudo_label,
    sample_fewshot,
    train_annotator,
    write_pseudo_labels,
)
from .data import Dataset, load_jsonl
from .downstream import (
    AblationContext,
    CellConfig,
    EvalReport,
    MissingArtifact,
    ablate_clusters,
    ablate_datasize,
    ablate_methods,
    prompt_tune,
    run_cell,
    write_csv,
    write_svg,
)
from .metatrain import meta_train, ppt_train
from .model import (
    SENTIMENT5,
    BackboneParams,
    ModelConfig,
    SoftPrompt,
    Tokenizer,
    Verbalizer,
    init_prompt,
    pretrain_backbone,
)
from .taskgen import cluster_pool, read_tasks, write_tasks
from .tuning import Workbench

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ corpora

@dataclass
class Corpora:
    source: Dataset
    pool: Dataset                 # unlabeled for the pipeline's purposes
    downstream: dict[str, Dataset]
    lm_texts: list[str]
    n_classes: int
    label_words: tuple[str, ...]


def load_corpora(cfg: ExperimentConfig, pool_per_domain: int = 0) -> Corpora:
    c = cfg.corpus
    spec = c.benchmark
    if pool_per_domain:
        spec = replace(spec, pretrain_per_domain=pool_per_domain)
    bm = make_synthetic_benchmark(spec, c.benchmark_seed)
    n = spec.n_classes
    words = SENTIMENT5 if n == 5 else ("bad", "good")
    source, pool, downstream, lm = bm.source, bm.pretrain, dict(bm.downstream), list(bm.lm_texts)
    if c.source_path:
        source = load_jsonl(c.source_path, n, "source")
    if c.pool_path:
        pool = load_jsonl(c.pool_path, n, "pool")
    if c.downstream_paths:
        downstream = {k: load_jsonl(p, n, k) for k, p in sorted(c.downstream_paths.items())}
    if c.source_path or c.pool_path or c.downstream_paths:
        lm = source.texts + pool.texts + [t for d in downstream.values() for t in d.texts]
    # the pipeline never reads generator labels of the pool
    pool = Dataset([type(e)(e.text, None) for e in pool], n, pool.name)
    return Corpora(source, pool, downstream, lm, n, words)


# -------------------------------------------------------------- provenance

def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, stage: str, cfg: ExperimentConfig, inputs: dict, outputs: dict,
                   extra: dict | None = None) -> Path:
    m = {"stage": stage, "config_fingerprint": cfg.fingerprint(), "config": cfg.to_dict(),
         "inputs": inputs, "outputs": outputs}
    m.update(extra or {})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(m, indent=2, sort_keys=True, default=str))
    return path


def read_manifest(out_dir: Path) -> dict:
    p = out_dir / "manifest.json"
    if not p.exists():
        raise MissingArtifact(f"missing manifest {p}")
    return json.loads(p.read_text())


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing upstream artifact {path}")
    return path


class JsonlLog:
    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("")

    def write(self, event: str, **fields) -> None:
        with self.path.open("a") as f:
            f.write(json.dumps({"event": event, **fields}, sort_keys=True, default=float) + "\n")


# --------------------------------------------------------------- workbench

def load_workbench(cfg: ExperimentConfig) -> tuple[Workbench, str]:
    path = _require(cfg.artifacts / "backbone" / "backbone.ckpt")
    ckpt = load_checkpoint(path, "backbone")
    tok = Tokenizer(ckpt.meta["vocab"])
    bb = BackboneParams.from_checkpoint(ckpt)
    words = ckpt.meta["label_words"]
    return Workbench(bb, tok, Verbalizer.from_words(words, tok)), ckpt.content_hash


def load_prompt(cfg: ExperimentConfig, name: str, wb: Workbench) -> tuple[SoftPrompt, str]:
    path = _require(cfg.artifacts / "prompts" / f"{name}.ckpt")
    ckpt = load_checkpoint(path, "prompt")
    shape = (wb.backbone.config.prompt_len, wb.backbone.config.d_model)
    return SoftPrompt.from_checkpoint(ckpt, shape), ckpt.content_hash


# ------------------------------------------------------------------ stages

def stage_pretrain_backbone(cfg: ExperimentConfig) -> dict:
    corp = load_corpora(cfg)
    m = cfg.model
    tok = Tokenizer.build(corp.lm_texts + corp.source.texts, m.max_vocab, force=corp.label_words)
    mc = ModelConfig(vocab_size=len(tok), d_model=m.d_model, n_layers=m.n_layers, n_heads=m.n_heads,
                     d_ff=m.d_ff, max_seq_len=m.max_seq_len, prompt_len=m.prompt_len)
    p = cfg.pretrain
    bb = pretrain_backbone([tok.encode(t) for t in corp.lm_texts], mc, p.steps, cfg.seed,
                           p.batch_size, p.lr, p.warmup)
    out = cfg.artifacts / "backbone"
    out.mkdir(parents=True, exist_ok=True)
    h = save_checkpoint(out / "backbone.ckpt", bb.to_checkpoint(
        {"vocab": tok.vocab, "label_words": list(corp.label_words), "config_fingerprint": cfg.fingerprint()}))
    write_manifest(out, "pretrain-backbone", cfg, {}, {"backbone.ckpt": h},
                   {"vocab_size": len(tok), "lm_sentences": len(corp.lm_texts)})
    return {"backbone_hash": h, "vocab_size": len(tok)}


def stage_pseudo_label(cfg: ExperimentConfig) -> dict:
    wb, bb_hash = load_workbench(cfg)
    corp = load_corpora(cfg)
    ann = train_annotator(corp.source, wb, replace(cfg.corpus.annotator, seed=cfg.seed))
    return _label_pool(cfg, wb, bb_hash, ann, corp.pool, cfg.artifacts / "pseudo")


def _label_pool(cfg, wb, bb_hash, ann: Annotator, pool: Dataset, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    ann_hash = save_checkpoint(out / "annotator.ckpt", _annotator_ckpt(ann))
    res = pseudo_label(pool.texts, ann, cfg.corpus.threshold)
    bal = balance(res.records, pool.n_classes, cfg.seed, "pseudo")
    write_pseudo_labels(out, res, bal, cfg.seed, {"annotator_valid_accuracy": ann.valid_accuracy})
    write_manifest(out, "pseudo-label", cfg, {"backbone.ckpt": bb_hash},
                   {"annotator.ckpt": ann_hash,
                    "pseudo_balanced.jsonl": file_hash(out / "pseudo_balanced.jsonl")},
                   {"input": res.n_input, "retained": len(res.records), "dropped": res.dropped,
                    "balanced": len(bal), "annotator_valid_accuracy": ann.valid_accuracy})
    return {"retained": len(res.records), "dropped": res.dropped, "balanced": len(bal),
            "annotator_valid_accuracy": ann.valid_accuracy}


def _annotator_ckpt(ann: Annotator):
    bb = ann.workbench.backbone
    return Checkpoint("annotator", dict(bb.arrays),
                      {"config": asdict(bb.config), "frozen": True, "valid_accuracy": ann.valid_accuracy})


def load_pool(cfg: ExperimentConfig, sub: str = "pseudo") -> tuple[Dataset, str]:
    path = _require(cfg.artifacts / sub / "pseudo_balanced.jsonl")
    n = cfg.corpus.benchmark.n_classes
    return load_jsonl(path, n, "pseudo"), file_hash(path)


def stage_cluster(cfg: ExperimentConfig) -> dict:
    wb, bb_hash = load_workbench(cfg)
    pool, pool_hash = load_pool(cfg)
    tasks, info = cluster_pool(pool, cfg.taskgen, wb.backbone, wb.tokenizer)
    out = cfg.artifacts / "tasks"
    if out.exists():
        for old in out.glob("task_*.jsonl"):
            old.unlink()
    write_tasks(out, tasks, {"n_classes": pool.n_classes, "strategy": cfg.taskgen.strategy,
                             "K": cfg.taskgen.K, "seed": cfg.taskgen.seed, "info": info,
                             "inputs": {"backbone.ckpt": bb_hash, "pseudo_balanced.jsonl": pool_hash},
                             "config_fingerprint": cfg.fingerprint()})
    return {"n_tasks": len(tasks), **{k: info[k] for k in ("inertia", "silhouette") if k in info}}


def stage_meta_train(cfg: ExperimentConfig) -> dict:
    wb, bb_hash = load_workbench(cfg)
    tdir = cfg.artifacts / "tasks"
    _require(tdir / "manifest.json")
    tasks, tman = read_tasks(tdir)
    logf = JsonlLog(cfg.artifacts / "logs" / "meta_train.jsonl")
    P0 = init_prompt(wb.backbone.config, "random-normal", cfg.maml.seed)
    P, st = meta_train(tasks, wb, cfg.maml, P_init=P0)
    for row in st.log:
        logf.write("outer_step", **row)
    meta = {"method": "MetaPT", "best_step": st.best_step, "best_valid": st.best_acc,
            "steps": st.step, "backbone": bb_hash}
    h = _save_prompt(cfg, "metapt", P, meta, {"backbone.ckpt": bb_hash,
                                              "tasks/manifest.json": file_hash(tdir / "manifest.json")})
    if load_workbench(cfg)[1] != bb_hash:
        raise RuntimeError("backbone changed during meta-training")
    return {"prompt_hash": h, "best_valid": st.best_acc, "steps": st.step, "best_step": st.best_step}


def stage_ppt_train(cfg: ExperimentConfig) -> dict:
    wb, bb_hash = load_workbench(cfg)
    pool, pool_hash = load_pool(cfg)
    logf = JsonlLog(cfg.artifacts / "logs" / "ppt_train.jsonl")
    P0 = init_prompt(wb.backbone.config, "random-normal", cfg.ppt.seed)
    P, st = ppt_train(pool, wb, cfg.ppt, P_init=P0)
    for row in st.log:
        logf.write("step", **row)
    meta = {"method": "PPT", "best_step": st.best_step, "best_valid": st.best_acc, "steps": st.step,
            "backbone": bb_hash}
    h = _save_prompt(cfg, "ppt", P, meta, {"backbone.ckpt": bb_hash, "pseudo_balanced.jsonl": pool_hash})
    return {"prompt_hash": h, "best_valid": st.best_acc, "steps": st.step}


def _save_prompt(cfg, name, P: SoftPrompt, meta: dict, inputs: dict) -> str:
    out = cfg.artifacts / "prompts"
    out.mkdir(parents=True, exist_ok=True)
    h = save_checkpoint(out / f"{name}.ckpt", P.to_checkpoint(dict(meta, config_fingerprint=cfg.fingerprint())))
    (out / f"{name}.manifest.json").write_text(json.dumps(
        {"stage": name, "inputs": inputs, "outputs": {f"{name}.ckpt": h},
         "config_fingerprint": cfg.fingerprint()}, indent=2, sort_keys=True))
    return h


def _datasets(cfg: ExperimentConfig, corp: Corpora) -> dict[str, Dataset]:
    names = cfg.eval.datasets or sorted(corp.downstream)
    missing = [n for n in names if n not in corp.downstream]
    if missing:
        raise MissingArtifact(f"unknown downstream dataset(s) {missing}")
    return {n: corp.downstream[n] for n in names}


def _cell_config(cfg: ExperimentConfig) -> CellConfig:
    return CellConfig(n_shot=cfg.eval.n_shot, tune=cfg.tune, ft=cfg.ft)


def _init_for(cfg, method, wb):
    if method == "PPT":
        return load_prompt(cfg, "ppt", wb)
    if method == "MetaPT":
        return load_prompt(cfg, "metapt", wb)
    return None, None


def stage_tune(cfg: ExperimentConfig, method: str, dataset: str, seed: int) -> dict:
    """Tune one prompt on one few-shot split and save it (no test access)."""
    wb, bb_hash = load_workbench(cfg)
    ds = _datasets(cfg, load_corpora(cfg))
    if dataset not in ds:
        raise MissingArtifact(f"unknown downstream dataset {dataset!r}")
    if method not in ("PT", "PPT", "MetaPT"):
        raise ValueError("tune supports the prompt methods PT, PPT and MetaPT")
    init, init_hash = _init_for(cfg, method, wb)
    if init is None:
        init = init_prompt(wb.backbone.config, "random-normal", seed)
    train, valid, _ = sample_fewshot(ds[dataset], cfg.eval.n_shot, seed)
    P, curve = prompt_tune(init, wb, train, valid, replace(cfg.tune, seed=seed))
    name = f"tuned_{method}_{dataset}_s{seed}"
    h = _save_prompt(cfg, name, P, {"method": method, "dataset": dataset, "seed": seed, "curve": curve},
                     {"backbone.ckpt": bb_hash, "init": init_hash})
    return {"prompt_hash": h, "curve": curve}


def stage_eval(cfg: ExperimentConfig) -> dict:
    wb, bb_hash = load_workbench(cfg)
    corp = load_corpora(cfg)
    out = cfg.artifacts / "reports"
    out.mkdir(parents=True, exist_ok=True)
    reports, inputs = [], {"backbone.ckpt": bb_hash}
    for method in cfg.eval.methods:
        init, h = _init_for(cfg, method, wb)
        if h:
            inputs[method] = h
        for name, ds in _datasets(cfg, corp).items():
            rep = run_cell(method, name, ds, wb, list(cfg.eval.seeds), _cell_config(cfg), init)
            (out / f"{method}_{name}.json").write_text(rep.to_json())
            reports.append(rep)
    if load_workbench(cfg)[1] != bb_hash:
        raise RuntimeError("backbone changed during evaluation")
    rows = [{"sweep": "eval", "setting": "", "method": r.method, "dataset": r.dataset,
             "seeds": " ".join(map(str, r.seeds)), "accuracies": " ".join(f"{a:.6f}" for a in r.accuracies),
             "mean": f"{r.mean:.6f}", "std": f"{r.std:.6f}", "fingerprint": r.fingerprint} for r in reports]
    write_csv(out / "summary.csv", rows)
    write_manifest(out, "eval", cfg, inputs, {"summary.csv": file_hash(out / "summary.csv")})
    return {"reports": [{"method": r.method, "dataset": r.dataset, "mean": r.mean, "std": r.std}
                        for r in reports]}


def summarize(reports: list[EvalReport]) -> dict[str, dict]:
    """Method -> mean and std of the per-dataset means and per-dataset stds."""
    out: dict[str, dict] = {}
    for r in reports:
        d = out.setdefault(r.method, {"means": [], "stds": []})
        d["means"].append(r.mean)
        d["stds"].append(r.std)
    return {m: {"mean": float(np.mean(v["means"])), "std": float(np.mean(v["stds"]))} for m, v in out.items()}


def load_reports(cfg: ExperimentConfig) -> list[EvalReport]:
    out = cfg.artifacts / "reports"
    return [EvalReport.from_json(p.read_text()) for p in sorted(out.glob("*.json")) if p.name != "manifest.json"]


def stage_ablate(cfg: ExperimentConfig, sweeps=None) -> dict:
    wb, bb_hash = load_workbench(cfg)
    a = cfg.ablation
    sweeps = list(sweeps or a.sweeps)
    corp = load_corpora(cfg)
    name = a.dataset or sorted(corp.downstream)[0]
    pool, _ = load_pool(cfg)
    ctx = AblationContext(wb, pool, name, corp.downstream[name], list(a.seeds), cfg.taskgen, cfg.maml,
                          cfg.ppt, _cell_config(cfg))
    out = cfg.artifacts / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    done = {}
    if "datasize" in sweeps:
        big = ctx
        if a.pool_per_domain:
            # a larger unlabeled pool, labelled by the same annotator
            ckpt = load_checkpoint(_require(cfg.artifacts / "pseudo" / "annotator.ckpt"), "annotator")
            ann = Annotator(wb.with_backbone(BackboneParams.from_checkpoint(ckpt)),
                            ckpt.meta.get("valid_accuracy", 0.0))
            _label_pool(cfg, wb, bb_hash, ann, load_corpora(cfg, a.pool_per_domain).pool, out / "pool")
            big = replace(ctx, pool=load_pool(cfg, "ablation/pool")[0])
        rows = ablate_datasize(big, a.sizes)
        write_csv(out / "datasize.csv", rows)
        if a.svg:
            write_svg(out / "datasize.svg", [float(r["setting"]) for r in rows], [float(r["mean"]) for r in rows],
                      "MetaPT accuracy vs pool size", "pre-training examples")
        done["datasize"] = len(rows)
    if "clusters" in sweeps:
        rows = ablate_clusters(ctx, a.Ks)
        write_csv(out / "clusters.csv", rows)
        if a.svg:
            write_svg(out / "clusters.svg", [float(r["setting"]) for r in rows], [float(r["mean"]) for r in rows],
                      "MetaPT accuracy vs K", "clusters")
        done["clusters"] = len(rows)
    if "methods" in sweeps:
        rows = ablate_methods(ctx, a.strategies)
        write_csv(out / "methods.csv", rows)
        done["methods"] = len(rows)
    write_manifest(out, "ablate", cfg, {"backbone.ckpt": bb_hash},
                   {p.name: file_hash(p) for p in sorted(out.glob("*.csv"))})
    return done


STAGES = ("pretrain-backbone", "pseudo-label", "cluster", "meta-train", "ppt-train", "eval")


def run_all(cfg: ExperimentConfig, stages=STAGES) -> dict:
    fns = {"pretrain-backbone": stage_pretrain_backbone, "pseudo-label": stage_pseudo_label,
           "cluster": stage_cluster, "meta-train": stage_meta_train, "ppt-train": stage_ppt_train,
           "eval": stage_eval, "ablate": stage_ablate}
    out = {}
    for s in stages:
        t0 = time.perf_counter()
        out[s] = fns[s](cfg)
        # wall time goes to the summary only, never into an artifact
        out[s]["seconds"] = round(time.perf_counter() - t0, 1)
        log.info("stage %s done in %.1fs", s, out[s]["seconds"])
    return out
