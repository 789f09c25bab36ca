"""Few-shot sampling, the pseudo-label pipeline, and the synthetic benchmark.

Pseudo-labelling: fully tune a copy of the backbone on a labelled source set
(the annotator), score an unlabelled corpus, keep texts whose top class
probability clears a threshold, then downsample every class to the size of
the rarest one.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, DataError, Example, save_jsonl
from .model import class_probs
from .tuning import TuneConfig, Workbench, tune_full

log = logging.getLogger(__name__)


def sample_fewshot(ds: Dataset, n: int, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Two disjoint uniform samples of ``n`` examples plus the untouched remainder."""
    if len(ds) < 2 * n:
        raise DataError(f"{ds.name}: need at least {2 * n} examples, have {len(ds)}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    train = ds.subset(sorted(perm[:n]), f"{ds.name}-train")
    valid = ds.subset(sorted(perm[n:2 * n]), f"{ds.name}-valid")
    test = ds.subset(sorted(perm[2 * n:]), f"{ds.name}-test")
    return train, valid, test


# ------------------------------------------------------------ annotator

@dataclass
class Annotator:
    """A fully tuned classifier exposing class-probability scores."""

    workbench: Workbench
    valid_accuracy: float = 0.0

    def scores(self, texts: Sequence[str], chunk: int = 64) -> np.ndarray:
        wb = self.workbench
        out = [class_probs(None, wb.backbone, wb.batch(texts[s:s + chunk]), wb.verbalizer)
               for s in range(0, len(texts), chunk)]
        return np.concatenate(out) if out else np.zeros((0, wb.verbalizer.n_classes))


@dataclass
class AnnotatorConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 10
    warmup: int = 20
    patience: int = 3
    valid_fraction: float = 0.1
    seed: int = 0


def train_annotator(source: Dataset, wb: Workbench, config: AnnotatorConfig | None = None) -> Annotator:
    cfg = config or AnnotatorConfig()
    present = {e.label for e in source if e.label is not None}
    if len(present) < source.n_classes:
        raise DataError(f"annotator source covers {len(present)} of {source.n_classes} classes")
    perm = np.random.default_rng(cfg.seed).permutation(len(source))
    n_val = max(1, int(round(cfg.valid_fraction * len(source))))
    valid = source.subset(sorted(perm[:n_val]))
    train = source.subset(sorted(perm[n_val:]))
    tune = TuneConfig(lr=cfg.lr, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
                      warmup=cfg.warmup, patience=cfg.patience, seed=cfg.seed)
    bb, acc, _ = tune_full(wb.backbone.copy(), wb, train, valid, tune)
    log.info("annotator validation accuracy %.4f", acc)
    return Annotator(wb.with_backbone(bb), acc)


@dataclass
class PseudoRecord:
    text: str
    pseudo_label: int
    confidence: float


@dataclass
class PseudoLabelResult:
    records: list[PseudoRecord]
    dropped: int
    threshold: float

    @property
    def n_input(self) -> int:
        return len(self.records) + self.dropped


def pseudo_label(texts: Sequence[str], annotator: Annotator, threshold: float = 0.95) -> PseudoLabelResult:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    probs = annotator.scores(list(texts))
    records, dropped = [], 0
    for text, p in zip(texts, probs):
        conf = float(p.max())
        if conf >= threshold:
            records.append(PseudoRecord(text, int(np.argmax(p)), conf))
        else:
            dropped += 1
    return PseudoLabelResult(records, dropped, threshold)


def balance(records: Sequence[PseudoRecord], n_classes: int, seed: int, name: str = "pseudo") -> Dataset:
    """Downsample each class uniformly to the rarest class count; input order kept."""
    by_class: list[list[int]] = [[] for _ in range(n_classes)]
    for i, r in enumerate(records):
        by_class[r.pseudo_label].append(i)
    missing = [c for c, idx in enumerate(by_class) if not idx]
    if missing:
        raise DataError(f"classes {missing} have no pseudo-labelled records")
    k = min(len(idx) for idx in by_class)
    rng = np.random.default_rng(seed)
    keep = sorted(i for idx in by_class for i in rng.choice(idx, size=k, replace=False))
    return Dataset([Example(records[i].text, records[i].pseudo_label) for i in keep], n_classes, name)


def write_pseudo_labels(out_dir, result: PseudoLabelResult, balanced: Dataset, seed: int,
                        extra: dict | None = None) -> None:
    out_dir = Path(out_dir)
    save_jsonl(out_dir / "pseudo_all.jsonl",
               [{"text": r.text, "pseudo_label": r.pseudo_label, "label": r.pseudo_label,
                 "confidence": r.confidence} for r in result.records])
    save_jsonl(out_dir / "pseudo_balanced.jsonl", balanced)
    manifest = {
        "threshold": result.threshold, "seed": seed, "input": result.n_input,
        "retained": len(result.records), "dropped": result.dropped,
        "balanced": len(balanced), "per_class": balanced.class_counts(),
    }
    manifest.update(extra or {})
    (out_dir / "pseudo_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# ---------------------------------------------------- synthetic benchmark

SHARED_SENTIMENT = (
    ("awful", "horrid", "dreadful", "abysmal", "atrocious", "appalling"),
    ("poor", "weak", "flawed", "shoddy", "lacking", "subpar"),
    ("okay", "average", "passable", "middling", "ordinary", "fair"),
    ("nice", "solid", "pleasant", "decent", "enjoyable", "likable"),
    ("superb", "excellent", "brilliant", "wonderful", "amazing", "outstanding"),
)
FILLERS = ("the", "a", "and", "but", "really", "very", "quite", "this", "that", "i",
           "we", "felt", "seemed", "overall", "honestly", "still", "with", "of")
TEMPLATES = (
    "the {d0} was {s0} and the {d1} felt {s1}",
    "{s0} {d0} , {f0} {d1} {f1} {s1}",
    "i found the {d0} {s0} though the {d1} {f0} {s1}",
    "{f0} {d0} {d1} {f1} {s0} , {d2} {s1}",
    "we thought the {d0} {f0} {s0} with {d1} {d2} {s1}",
)
_SYLLABLES = ("ka", "lo", "mi", "ru", "ze", "to", "na", "vi", "po", "sa", "de", "fu",
              "gi", "ho", "ju", "ne", "qi", "wo", "xa", "yo", "be", "ci", "du", "ma")


@dataclass
class BenchmarkSpec:
    n_classes: int = 5
    pretrain_domains: int = 10
    downstream_domains: int = 2
    topic_words: int = 16          # per domain
    domain_sentiment_words: int = 2  # per class per domain
    shared_sentiment_prob: float = 0.6
    adjacent_noise: float = 0.1    # chance the second sentiment word comes from a neighbouring class
    source_size: int = 2000
    pretrain_per_domain: int = 300
    downstream_size: int = 400
    lm_template_rate: float = 0.5  # share of LM sentences followed by "it was <word>"
    lm_label_agreement: float = 0.5
    domains: list[str] = field(default_factory=list)  # optional explicit domain names


@dataclass
class Benchmark:
    spec: BenchmarkSpec
    source: Dataset                 # labelled annotator training set (single domain)
    pretrain: Dataset               # open-domain pool; labels are the generator's truth
    pretrain_domain: list[int]      # domain id per pretrain example
    downstream: dict[str, Dataset]
    lm_texts: list[str]             # unlabelled text for backbone pretraining
    lexicon: dict[str, dict]        # domain -> {"topic": [...], "sentiment": [[...] per class]}

    @property
    def label_words(self) -> tuple[str, ...]:
        from .model import SENTIMENT5
        return SENTIMENT5[:self.spec.n_classes] if self.spec.n_classes <= 5 else tuple(
            f"label{i}" for i in range(self.spec.n_classes))


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str], syl: int = 3) -> list[str]:
    out = []
    while len(out) < n:
        w = "".join(rng.choice(_SYLLABLES, size=syl))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def build_lexicon(spec: BenchmarkSpec, seed: int) -> dict[str, dict]:
    n_dom = spec.pretrain_domains + spec.downstream_domains + 1
    names = list(spec.domains) or (["source"] + [f"open{i}" for i in range(spec.pretrain_domains)]
                                   + [f"target{i}" for i in range(spec.downstream_domains)])
    if len(names) != n_dom:
        raise ValueError(f"expected {n_dom} domain names, got {len(names)}")
    rng = np.random.default_rng(seed)
    taken = set(FILLERS) | {w for c in SHARED_SENTIMENT for w in c}
    lex = {}
    for name in names:
        lex[name] = {
            "topic": _pseudo_words(rng, spec.topic_words, taken),
            "sentiment": [_pseudo_words(rng, spec.domain_sentiment_words, taken, syl=2)
                          for _ in range(spec.n_classes)],
        }
    check_disjoint(lex)
    return lex


def check_disjoint(lex: dict[str, dict]) -> None:
    seen: dict[str, str] = {}
    for name, entry in lex.items():
        words = entry["topic"] + [w for c in entry["sentiment"] for w in c]
        for w in words:
            if w in seen and seen[w] != name:
                raise ValueError(f"lexicon collision: {w!r} in both {seen[w]} and {name}")
            seen[w] = name


def shared_sentiment(n_classes: int) -> list[tuple[str, ...]]:
    if n_classes == 5:
        return list(SHARED_SENTIMENT)
    if n_classes == 2:
        return [SHARED_SENTIMENT[0] + SHARED_SENTIMENT[1], SHARED_SENTIMENT[3] + SHARED_SENTIMENT[4]]
    raise ValueError("synthetic benchmark supports 2 or 5 classes")


def generate_sentence(lex_entry: dict, cls: int, spec: BenchmarkSpec, rng: np.random.Generator) -> str:
    shared = shared_sentiment(spec.n_classes)

    def sentiment_word(c):
        if rng.random() < spec.shared_sentiment_prob:
            return str(rng.choice(shared[c]))
        return str(rng.choice(lex_entry["sentiment"][c]))

    c1 = cls
    if rng.random() < spec.adjacent_noise:
        c1 = int(np.clip(cls + rng.choice([-1, 1]), 0, spec.n_classes - 1))
    d = rng.choice(lex_entry["topic"], size=3, replace=False)
    f = rng.choice(FILLERS, size=2)
    tpl = TEMPLATES[rng.integers(len(TEMPLATES))]
    return tpl.format(d0=d[0], d1=d[1], d2=d[2], f0=f[0], f1=f[1],
                      s0=sentiment_word(cls), s1=sentiment_word(c1))


def lexical_class(text: str, lex: dict[str, dict], n_classes: int) -> int | None:
    """Majority class of the sentiment words in ``text`` (ties to the lower class)."""
    votes = np.zeros(n_classes)
    table = {}
    for c, words in enumerate(shared_sentiment(n_classes)):
        table.update({w: c for w in words})
    for entry in lex.values():
        for c, words in enumerate(entry["sentiment"]):
            table.update({w: c for w in words})
    for w in text.split():
        if w in table:
            votes[table[w]] += 1
    return int(np.argmax(votes)) if votes.any() else None


def make_synthetic_benchmark(spec: BenchmarkSpec, seed: int) -> Benchmark:
    lex = build_lexicon(spec, seed)
    names = list(lex)
    source_name, open_names = names[0], names[1:1 + spec.pretrain_domains]
    target_names = names[1 + spec.pretrain_domains:]
    rng = np.random.default_rng(seed + 1)

    def sample(name, n):
        labels = np.arange(n) % spec.n_classes
        rng.shuffle(labels)
        return [Example(generate_sentence(lex[name], int(y), spec, rng), int(y)) for y in labels]

    source = Dataset(sample(source_name, spec.source_size), spec.n_classes, source_name)
    pre, dom = [], []
    for k, name in enumerate(open_names):
        exs = sample(name, spec.pretrain_per_domain)
        pre += exs
        dom += [k] * len(exs)
    order = rng.permutation(len(pre))
    pretrain = Dataset([pre[i] for i in order], spec.n_classes, "open")
    pretrain_domain = [dom[i] for i in order]
    downstream = {n: Dataset(sample(n, spec.downstream_size), spec.n_classes, n) for n in target_names}

    from .model import SENTIMENT5
    label_words = SENTIMENT5 if spec.n_classes == 5 else ("bad", "good")
    lm_texts = []
    for name in names:
        for ex in sample(name, spec.pretrain_per_domain):
            text = ex.text
            if rng.random() < spec.lm_template_rate:
                if rng.random() < spec.lm_label_agreement:
                    word = label_words[ex.label]
                else:
                    word = str(rng.choice(label_words))
                text = f"{text} it was {word} ."
            lm_texts.append(text)
    lm_texts = [lm_texts[i] for i in rng.permutation(len(lm_texts))]
    return Benchmark(spec, source, pretrain, pretrain_domain, downstream, lm_texts, lex)


def spec_dict(spec: BenchmarkSpec) -> dict:
    return asdict(spec)
