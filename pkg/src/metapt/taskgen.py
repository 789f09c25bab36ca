"""Turn a pre-training pool into meta tasks: K-means, LDA, random, or label split."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .data import Dataset, DataError, Example, save_jsonl
from .model import BackboneParams, Tokenizer, encode, split_words

log = logging.getLogger(__name__)

STRATEGIES = ("kmeans", "lda", "random", "label")


# ---------------------------------------------------------------- embeddings

@dataclass
class EmbeddingMatrix:
    data: np.ndarray
    method: str


def _l2_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def embed(ds: Dataset, method: str = "mean-pooled-backbone", backbone: BackboneParams | None = None,
          tokenizer: Tokenizer | None = None, chunk: int = 128) -> EmbeddingMatrix:
    if len(ds) == 0:
        raise DataError("cannot embed an empty dataset")
    if method == "tf-idf":
        return EmbeddingMatrix(tfidf(ds.texts), method)
    if method != "mean-pooled-backbone":
        raise ValueError(f"unknown embedding method {method!r}")
    if backbone is None or tokenizer is None or not backbone.frozen:
        raise ValueError("mean-pooled embeddings need a frozen backbone and its tokenizer")
    w = backbone.constants()
    limit = backbone.config.max_seq_len
    rows = []
    for s in range(0, len(ds), chunk):
        seqs = [tokenizer.encode(t)[:limit] or [tokenizer.unk_id] for t in ds.texts[s:s + chunk]]
        T = max(map(len, seqs))
        ids = np.zeros((len(seqs), T), dtype=np.int64)
        for i, q in enumerate(seqs):
            ids[i, :len(q)] = q
        lengths = np.array([len(q) for q in seqs])
        with ad.no_grad():
            h = ad.layer_norm(encode(None, backbone, ids, lengths, w), w["lnf_g"], w["lnf_b"]).data
        valid = (np.arange(T)[None, :] < lengths[:, None])[..., None]
        rows.append((h * valid).sum(axis=1) / lengths[:, None])
    return EmbeddingMatrix(_l2_rows(np.concatenate(rows)), method)


def tfidf(texts: Sequence[str]) -> np.ndarray:
    """(1 + log tf) * smoothed idf over the corpus vocabulary, rows L2-normalised."""
    docs = [Counter(split_words(t)) for t in texts]
    vocab = sorted({w for d in docs for w in d})
    index = {w: i for i, w in enumerate(vocab)}
    X = np.zeros((len(docs), len(vocab)))
    for r, d in enumerate(docs):
        for w, c in d.items():
            X[r, index[w]] = 1.0 + math.log(c)
    df = (X > 0).sum(axis=0)
    idf = np.log((1 + len(docs)) / (1 + df)) + 1.0
    return _l2_rows(X * idf)


# -------------------------------------------------------------------- k-means

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia_history: list[float]
    n_iter: int

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [int(rng.integers(n))]
    closest = _sq_dists(X, X[centers])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen center; fall back to unused rows
            rest = np.setdiff1d(np.arange(n), centers)
            centers.append(int(rng.choice(rest)))
        else:
            centers.append(int(rng.choice(n, p=closest / total)))
        closest = np.minimum(closest, _sq_dists(X, X[centers[-1:]])[:, 0])
    return X[centers].copy()


def kmeans(E: EmbeddingMatrix | np.ndarray, K: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations until the assignment is stable."""
    X = np.asarray(E.data if isinstance(E, EmbeddingMatrix) else E, dtype=np.float64)
    n = len(X)
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > n:
        raise ValueError(f"K={K} exceeds the number of rows {n}")
    rng = np.random.default_rng(seed)
    C = kmeans_pp_init(X, K, rng)
    assign = np.argmin(_sq_dists(X, C), axis=1)
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        C = np.stack([X[assign == k].mean(0) if np.any(assign == k) else C[k] for k in range(K)])
        d = _sq_dists(X, C)
        new = np.argmin(d, axis=1)
        new = _repair_empty(X, C, new, d)
        inertia = float(d[np.arange(n), new].sum())
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased at iteration {it}")
        history.append(inertia)
        stable = np.array_equal(new, assign)
        assign = new
        if stable:
            break
    C = np.stack([X[assign == k].mean(0) for k in range(K)])
    return KMeansResult(assign, C, history, it)


def _repair_empty(X, C, assign, d):
    K = len(C)
    for k in range(K):
        if np.any(assign == k):
            continue
        own = d[np.arange(len(X)), assign]
        sizes = np.bincount(assign, minlength=K)
        own = np.where(sizes[assign] > 1, own, -1.0)
        far = int(np.argmax(own))
        assign[far] = k
        C[k] = X[far]
        d[:, k] = _sq_dists(X, C[k:k + 1])[:, 0]
    return assign


# ------------------------------------------------------------------------ LDA

@dataclass
class LdaModel:
    K: int
    vocab: list[str]
    docs: list[np.ndarray]          # word ids per document
    z: list[np.ndarray]             # topic per token
    topic_word: np.ndarray          # K x V counts
    doc_topic: np.ndarray           # D x K counts
    alpha: float
    beta: float
    loglik: list[float] = field(default_factory=list)
    doc_keys: list[str] = field(default_factory=list)

    def top_words(self, k: int, n: int = 5) -> list[str]:
        order = np.lexsort((np.arange(len(self.vocab)), -self.topic_word[k]))
        return [self.vocab[i] for i in order[:n]]


def lda_tokens(texts: Sequence[str], stop_fraction: float = 0.01) -> tuple[list[list[str]], set[str]]:
    docs = [[w for w in split_words(t) if any(ch.isalnum() for ch in w)] for t in texts]
    counts = Counter(w for d in docs for w in d)
    n_stop = int(math.ceil(stop_fraction * len(counts)))
    stop = {w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n_stop]}
    return [[w for w in d if w not in stop] for d in docs], stop


def joint_loglik(topic_word, doc_topic, alpha, beta) -> float:
    K, V = topic_word.shape
    nk = topic_word.sum(1)
    nd = doc_topic.sum(1)
    lw = K * (gammaln(V * beta) - V * gammaln(beta)) + float(
        gammaln(topic_word + beta).sum() - gammaln(nk + V * beta).sum())
    lz = len(doc_topic) * (gammaln(K * alpha) - K * gammaln(alpha)) + float(
        gammaln(doc_topic + alpha).sum() - gammaln(nd + K * alpha).sum())
    return lw + lz


def _gibbs_sweep_py(words, docs, z, nkw, ndk, nk, alpha, beta, V, u):
    K = nkw.shape[0]
    for i in range(len(words)):
        w, d, k = words[i], docs[i], z[i]
        nkw[k, w] -= 1
        ndk[d, k] -= 1
        nk[k] -= 1
        p = (nkw[:, w] + beta) / (nk + V * beta) * (ndk[d] + alpha)
        c = np.cumsum(p)
        k = min(int(np.searchsorted(c, u[i] * c[-1], side="right")), K - 1)
        z[i] = k
        nkw[k, w] += 1
        ndk[d, k] += 1
        nk[k] += 1


try:
    import numba

    _gibbs_sweep = numba.njit(cache=True)(_gibbs_sweep_py)
except ImportError:  # pragma: no cover
    _gibbs_sweep = _gibbs_sweep_py


def lda_fit(ds: Dataset | Sequence[str], K: int, iterations: int = 200, seed: int = 0,
            alpha: float | None = None, beta: float = 0.01, stop_fraction: float = 0.01) -> LdaModel:
    """Collapsed Gibbs sampling; joint log-likelihood recorded after every sweep."""
    texts = ds.texts if isinstance(ds, Dataset) else list(ds)
    if K < 2:
        raise ValueError("LDA needs K >= 2")
    if len(texts) < K:
        raise DataError(f"LDA with K={K} needs at least {K} documents, got {len(texts)}")
    alpha = 50.0 / K if alpha is None else alpha
    tokens, _ = lda_tokens(texts, stop_fraction)
    vocab = sorted({w for d in tokens for w in d})
    index = {w: i for i, w in enumerate(vocab)}
    docs = [np.array([index[w] for w in d], dtype=np.int64) for d in tokens]
    V, D = max(len(vocab), 1), len(docs)
    words = np.concatenate(docs) if docs else np.zeros(0, np.int64)
    doc_of = np.concatenate([np.full(len(d), i, dtype=np.int64) for i, d in enumerate(docs)])
    rng = np.random.default_rng(seed)
    z = rng.integers(K, size=len(words)).astype(np.int64)
    nkw = np.zeros((K, V), dtype=np.int64)
    ndk = np.zeros((D, K), dtype=np.int64)
    np.add.at(nkw, (z, words), 1)
    np.add.at(ndk, (doc_of, z), 1)
    nk = nkw.sum(1)
    loglik = []
    for _ in range(iterations):
        u = rng.random(len(words))
        _gibbs_sweep(words, doc_of, z, nkw, ndk, nk, float(alpha), float(beta), V, u)
        loglik.append(joint_loglik(nkw, ndk, alpha, beta))
    offsets = np.cumsum([0] + [len(d) for d in docs])
    zs = [z[offsets[i]:offsets[i + 1]].copy() for i in range(D)]
    return LdaModel(K, vocab, docs, zs, nkw, ndk, alpha, beta, loglik, list(texts))


def assign_by_lda(model: LdaModel, ds: Dataset | Sequence[str]) -> np.ndarray:
    """Each document's argmax posterior topic (ties go to the smallest topic id)."""
    texts = ds.texts if isinstance(ds, Dataset) else list(ds)
    if len(texts) != len(model.doc_keys) or any(a != b for a, b in zip(texts, model.doc_keys)):
        raise DataError("dataset documents do not match the fitted LDA model")
    theta = model.doc_topic + model.alpha
    return np.argmax(theta, axis=1)


# ---------------------------------------------------------- other strategies

def split_random(n: int, K: int, seed: int) -> np.ndarray:
    if not 1 <= K <= n:
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={n}")
    out = np.empty(n, dtype=np.int64)
    out[np.random.default_rng(seed).permutation(n)] = np.arange(n) % K
    return out


def split_by_label(ds: Dataset, K: int, seed: int = 0) -> np.ndarray:
    """Cluster = label; with K above the label count, labels are split into random subgroups."""
    labels = np.array(ds.labels)
    if any(y is None for y in ds.labels):
        raise DataError("label split needs a labelled dataset")
    present = sorted(set(labels.tolist()))
    L = len(present)
    if K < L:
        raise ValueError(f"K={K} is smaller than the number of labels {L}")
    groups = [K // L + (1 if i < K % L else 0) for i in range(L)]
    rng = np.random.default_rng(seed)
    out = np.empty(len(labels), dtype=np.int64)
    base = 0
    for lab, g in zip(present, groups):
        idx = np.flatnonzero(labels == lab)
        if g > len(idx):
            raise ValueError(f"label {lab} has {len(idx)} examples, cannot form {g} groups")
        out[idx[rng.permutation(len(idx))]] = base + np.arange(len(idx)) % g
        base += g
    return out


# ------------------------------------------------------------------ tasks

@dataclass
class MetaTask:
    task_id: int
    train: Dataset
    valid: Dataset
    origin: dict = field(default_factory=dict)


def _merge_small(assign: np.ndarray, min_size: int, E: np.ndarray | None) -> tuple[np.ndarray, list[dict]]:
    assign = assign.copy()
    merges = []
    while True:
        ids, sizes = np.unique(assign, return_counts=True)
        small = [(s, k) for k, s in zip(ids, sizes) if s < min_size]
        if not small:
            return assign, merges
        if len(small) == len(ids):
            raise DataError(f"every cluster is smaller than the minimum task size {min_size}")
        size, k = min(small)
        others = [j for j in ids if j != k]
        if E is not None:
            c = E[assign == k].mean(0)
            dist = [float(((E[assign == j].mean(0) - c) ** 2).sum()) for j in others]
            target, rule = others[int(np.argmin(dist))], "nearest-centroid"
        else:
            target, rule = max(others, key=lambda j: (int((assign == j).sum()), -j)), "largest"
        assign[assign == k] = target
        merges.append({"cluster": int(k), "size": int(size), "into": int(target), "rule": rule})
        log.info("merged cluster %d (%d examples) into %d by %s", k, size, target, rule)


def make_tasks(ds: Dataset, assignments: Sequence[int], val_fraction: float = 0.2, seed: int = 0,
               min_size: int = 8, embeddings: EmbeddingMatrix | np.ndarray | None = None,
               origin: dict | None = None) -> tuple[list[MetaTask], list[dict]]:
    """Split each cluster into train/validation; undersized clusters are merged first."""
    assign = np.asarray(assignments, dtype=np.int64)
    if len(assign) != len(ds):
        raise ValueError("assignments must cover the dataset")
    if not 0 < val_fraction <= 0.5:
        raise ValueError("val_fraction must lie in (0, 0.5]")
    E = embeddings.data if isinstance(embeddings, EmbeddingMatrix) else embeddings
    assign, merges = _merge_small(assign, max(min_size, 2), E)
    rng = np.random.default_rng(seed)
    tasks = []
    for tid, k in enumerate(np.unique(assign)):
        idx = np.flatnonzero(assign == k)
        perm = idx[rng.permutation(len(idx))]
        n_val = min(max(1, int(round(val_fraction * len(idx)))), len(idx) - 1)
        valid = ds.subset(sorted(perm[:n_val]), f"task{tid}-valid")
        train = ds.subset(sorted(perm[n_val:]), f"task{tid}-train")
        tasks.append(MetaTask(tid, train, valid, dict(origin or {}, cluster=int(k))))
    return tasks, merges


def write_tasks(out_dir, tasks: Sequence[MetaTask], manifest: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t in tasks:
        rows = ([{"text": e.text, "label": e.label, "split": "train"} for e in t.train]
                + [{"text": e.text, "label": e.label, "split": "valid"} for e in t.valid])
        save_jsonl(out_dir / f"task_{t.task_id:03d}.jsonl", rows)
    m = dict(manifest)
    m["tasks"] = [{"task_id": t.task_id, "file": f"task_{t.task_id:03d}.jsonl", "train": len(t.train),
                   "valid": len(t.valid), "origin": t.origin} for t in tasks]
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(m, indent=2, sort_keys=True))
    return path


def read_tasks(out_dir) -> tuple[list[MetaTask], dict]:
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    n_classes = int(manifest["n_classes"])
    tasks = []
    for entry in manifest["tasks"]:
        rows = [json.loads(l) for l in (out_dir / entry["file"]).read_text().splitlines() if l.strip()]
        tr = [Example(r["text"], r["label"]) for r in rows if r["split"] == "train"]
        va = [Example(r["text"], r["label"]) for r in rows if r["split"] == "valid"]
        tid = entry["task_id"]
        tasks.append(MetaTask(tid, Dataset(tr, n_classes, f"task{tid}-train"),
                              Dataset(va, n_classes, f"task{tid}-valid"), entry["origin"]))
    return tasks, manifest


def cluster_quality(E: np.ndarray, assign: np.ndarray, truth: Sequence[int] | None = None) -> dict:
    """Inertia, silhouette and (when ground truth is known) adjusted Rand index."""
    from sklearn.metrics import adjusted_rand_score, silhouette_score

    ks = np.unique(assign)
    inertia = float(sum(((E[assign == k] - E[assign == k].mean(0)) ** 2).sum() for k in ks))
    out = {"inertia": inertia, "n_clusters": int(len(ks))}
    if 1 < len(ks) < len(E):
        # exact silhouette is quadratic in n; large pools use a fixed subsample
        sample = {"sample_size": 4000, "random_state": 0} if len(E) > 4000 else {}
        out["silhouette"] = float(silhouette_score(E, assign, **sample))
    if truth is not None:
        out["ari"] = float(adjusted_rand_score(truth, assign))
    return out


@dataclass
class ClusterConfig:
    strategy: str = "kmeans"
    K: int = 10
    embed_method: str = "mean-pooled-backbone"
    val_fraction: float = 0.2
    min_size: int = 8
    lda_iterations: int = 200
    max_iter: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown clustering strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.K < 1:
            raise ValueError("K must be >= 1")


def cluster_pool(ds: Dataset, cfg: ClusterConfig, backbone: BackboneParams | None = None,
                 tokenizer=None) -> tuple[list[MetaTask], dict]:
    """Assign the pool to K groups with the configured strategy and cut meta tasks.

    Returns the tasks plus an info dict (merges, and cluster-quality metrics
    whenever embeddings were computed).
    """
    info: dict = {"strategy": cfg.strategy, "K": cfg.K, "n_pool": len(ds)}
    E = None
    if cfg.strategy == "kmeans":
        E = embed(ds, cfg.embed_method, backbone, tokenizer)
        res = kmeans(E, cfg.K, cfg.seed, cfg.max_iter)
        assign = res.assignments
        info["kmeans_iterations"] = res.n_iter
    elif cfg.strategy == "lda":
        model = lda_fit(ds, cfg.K, cfg.lda_iterations, cfg.seed)
        assign = assign_by_lda(model, ds)
        info["lda_top_words"] = [model.top_words(k, 5) for k in range(cfg.K)]
    elif cfg.strategy == "random":
        assign = split_random(len(ds), cfg.K, cfg.seed)
    else:
        assign = split_by_label(ds, cfg.K, cfg.seed)
    origin = {"strategy": cfg.strategy}
    tasks, merges = make_tasks(ds, assign, cfg.val_fraction, cfg.seed, cfg.min_size, E, origin)
    info["merges"] = merges
    info["n_tasks"] = len(tasks)
    if E is not None and cfg.K > 1:
        info.update(cluster_quality(E.data, np.asarray(assign)))
    return tasks, info
