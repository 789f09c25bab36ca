import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metapt.corpus import (
    Annotator,
    AnnotatorConfig,
    BenchmarkSpec,
    PseudoRecord,
    balance,
    build_lexicon,
    check_disjoint,
    generate_sentence,
    lexical_class,
    make_synthetic_benchmark,
    pseudo_label,
    sample_fewshot,
    shared_sentiment,
    train_annotator,
    write_pseudo_labels,
)
from metapt.data import Dataset, DataError, Example, load_jsonl, save_jsonl
from metapt.model import ModelConfig, Tokenizer, Verbalizer, init_backbone
from metapt.tuning import Workbench


def test_load_three_lines_in_order(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"text": "a", "label": 0}\n{"text": "b"}\n{"text": "c", "label": 4}\n')
    ds = load_jsonl(p, n_classes=5)
    assert ds.texts == ["a", "b", "c"]
    assert ds.labels == [0, None, 4]


def test_load_label_out_of_range_names_line(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"text": "a", "label": 0}\n{"text": "b", "label": 7}\n')
    with pytest.raises(DataError, match=":2:"):
        load_jsonl(p, n_classes=5)


def test_load_malformed_json_names_line(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"text": "a"}\n{"text": \n')
    with pytest.raises(DataError, match=":2:"):
        load_jsonl(p, n_classes=2)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_jsonl(tmp_path / "nope.jsonl", 2)


def test_crlf_equals_lf(tmp_path):
    lines = ['{"text": "x y", "label": 1}', '{"text": "z", "label": 0}']
    (tmp_path / "lf.jsonl").write_bytes(("\n".join(lines) + "\n").encode())
    (tmp_path / "crlf.jsonl").write_bytes(("\r\n".join(lines) + "\r\n").encode())
    a = load_jsonl(tmp_path / "lf.jsonl", 2)
    b = load_jsonl(tmp_path / "crlf.jsonl", 2)
    assert a.examples == b.examples


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.text(min_size=1).filter(lambda s: s.strip()),
                          st.one_of(st.none(), st.integers(0, 4))), min_size=1, max_size=20))
def test_save_load_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("rt") / "d.jsonl"
    ds = Dataset([Example(t, y) for t, y in rows], 5, "d")
    save_jsonl(path, ds)
    assert load_jsonl(path, 5, "d").examples == ds.examples


def _ds(n, k=5):
    return Dataset([Example(f"text {i}", i % k) for i in range(n)], k, "toy")


def test_fewshot_deterministic_and_disjoint():
    ds = _ds(200)
    a = sample_fewshot(ds, 40, seed=1)
    b = sample_fewshot(ds, 40, seed=1)
    assert [x.examples for x in a] == [x.examples for x in b]
    train, valid, test = a
    assert len(train) == len(valid) == 40 and len(test) == 120
    assert not set(train.texts) & set(valid.texts)
    assert set(train.texts) | set(valid.texts) | set(test.texts) == set(ds.texts)


def test_fewshot_too_small():
    with pytest.raises(DataError):
        sample_fewshot(_ds(50), 40, 0)


def test_fewshot_uniform_inclusion():
    # each example lands in train with probability n/N; 3-sigma binomial band
    ds = _ds(100)
    n, trials = 10, 1000
    counts = Counter()
    for s in range(trials):
        counts.update(sample_fewshot(ds, n, s)[0].texts)
    p = n / len(ds)
    sigma = np.sqrt(trials * p * (1 - p))
    freq = np.array([counts[t] for t in ds.texts])
    assert np.all(np.abs(freq - trials * p) <= 3 * sigma + 1)


# ------------------------------------------------------------ pseudo labels

class FixedAnnotator(Annotator):
    def __init__(self, probs):
        self.probs = probs

    def scores(self, texts, chunk=64):
        return self.probs[: len(texts)]


def test_pseudo_label_threshold_bounds():
    ann = FixedAnnotator(np.full((1, 2), 0.5))
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            pseudo_label(["a"], ann, bad)


def test_pseudo_label_above_max_is_empty():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(5), size=50)
    res = pseudo_label([f"t{i}" for i in range(50)], FixedAnnotator(probs), float(probs.max()) + 1e-9)
    assert res.records == [] and res.dropped == 50


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.25, 0.99))
def test_pseudo_label_filter_property(seed, thr):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.full(5, 0.3), size=1000)
    res = pseudo_label([f"t{i}" for i in range(1000)], FixedAnnotator(probs), thr)
    assert all(r.confidence >= thr for r in res.records)
    assert len(res.records) + res.dropped == 1000
    for r in res.records:
        i = int(r.text[1:])
        assert r.pseudo_label == int(np.argmax(probs[i])) and r.confidence == probs[i].max()


def _records(counts):
    return [PseudoRecord(f"{c}-{i}", c, 0.99) for c, n in enumerate(counts) for i in range(n)]


def test_balance_already_balanced_unchanged():
    recs = _records([10, 10])
    ds = balance(recs, 2, seed=0)
    assert ds.texts == [r.text for r in recs]


def test_balance_min_count():
    ds = balance(_records([100, 10, 55]), 3, seed=0)
    assert ds.class_counts() == [10, 10, 10] and len(ds) == 30


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=2, max_size=6), st.integers(0, 999))
def test_balance_uniform_subset_no_duplicates(counts, seed):
    recs = _records(counts)
    ds = balance(recs, len(counts), seed)
    assert len(set(ds.class_counts())) == 1
    assert len(set(ds.texts)) == len(ds)
    assert set(ds.texts) <= {r.text for r in recs}
    assert ds.examples == balance(recs, len(counts), seed).examples


def test_balance_missing_class():
    with pytest.raises(DataError):
        balance(_records([3, 0, 2]), 3, 0)


def test_write_pseudo_labels_manifest(tmp_path):
    recs = _records([3, 2])
    from metapt.corpus import PseudoLabelResult
    res = PseudoLabelResult(recs, 4, 0.95)
    write_pseudo_labels(tmp_path, res, balance(recs, 2, 0), seed=7)
    m = json.loads((tmp_path / "pseudo_manifest.json").read_text())
    assert m["retained"] + m["dropped"] == m["input"] == 9
    assert m["threshold"] == 0.95 and m["seed"] == 7
    first = json.loads((tmp_path / "pseudo_all.jsonl").read_text().splitlines()[0])
    assert {"text", "pseudo_label", "confidence"} <= set(first)


# --------------------------------------------------------------- annotator

def test_annotator_separable_two_word_task():
    texts = ["alpha"] * 20 + ["omega"] * 20
    ds = Dataset([Example(t, int(t == "omega")) for t in texts], 2, "sep")
    tok = Tokenizer.build(texts, force=("bad", "good"))
    cfg = ModelConfig(vocab_size=len(tok), d_model=16, n_heads=2, d_ff=32, max_seq_len=24, prompt_len=4)
    wb = Workbench(init_backbone(cfg, 0).freeze(), tok, Verbalizer.from_words(["bad", "good"], tok))
    acfg = AnnotatorConfig(lr=3e-3, batch_size=8, max_epochs=30, patience=30, valid_fraction=0.5, seed=1)
    ann = train_annotator(ds, wb, acfg)
    probs = ann.scores(texts)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert (probs.argmax(1) == np.array(ds.labels)).mean() >= 0.99
    again = train_annotator(ds, wb, acfg).scores(texts)
    assert np.array_equal(probs, again)
    assert wb.backbone.frozen


def test_annotator_needs_all_classes():
    ds = Dataset([Example("a", 0), Example("b", 0)], 2)
    with pytest.raises(DataError):
        train_annotator(ds, None)


# --------------------------------------------------------------- benchmark

SMALL = BenchmarkSpec(pretrain_domains=3, downstream_domains=2, source_size=100,
                      pretrain_per_domain=50, downstream_size=100)


def test_benchmark_deterministic():
    a = make_synthetic_benchmark(SMALL, 3)
    b = make_synthetic_benchmark(SMALL, 3)
    assert a.pretrain.examples == b.pretrain.examples
    assert a.lm_texts == b.lm_texts
    assert a.downstream["target0"].examples == b.downstream["target0"].examples


def test_benchmark_domains_disjoint_and_targets_unseen():
    bm = make_synthetic_benchmark(SMALL, 0)
    lex = bm.lexicon
    names = list(lex)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            assert not set(lex[a]["topic"]) & set(lex[b]["topic"])
    target_topics = set(lex["target0"]["topic"])
    assert not any(target_topics & set(t.split()) for t in bm.pretrain.texts)


def test_lexicon_collision_detected():
    lex = build_lexicon(SMALL, 0)
    names = list(lex)
    lex[names[1]]["topic"][0] = lex[names[0]]["topic"][0]
    with pytest.raises(ValueError, match="collision"):
        check_disjoint(lex)


def test_class_word_swap_flips_label():
    lex = build_lexicon(SMALL, 0)
    spec = BenchmarkSpec(adjacent_noise=0.0)
    rng = np.random.default_rng(0)
    shared = shared_sentiment(5)
    entry = lex["open0"]
    for _ in range(50):
        text = generate_sentence(entry, 1, spec, rng)
        assert lexical_class(text, lex, 5) == 1
        table = {w: shared[4][i] for i, w in enumerate(shared[1])}
        table.update({w: entry["sentiment"][4][i] for i, w in enumerate(entry["sentiment"][1])})
        swapped = " ".join(table.get(w, w) for w in text.split())
        assert lexical_class(swapped, lex, 5) == 4


def test_bag_of_words_learnability():
    from sklearn.feature_extraction.text import CountVectorizer
    from sklearn.linear_model import LogisticRegression

    spec = BenchmarkSpec(pretrain_domains=2, downstream_domains=1, source_size=1500,
                         pretrain_per_domain=10, downstream_size=10, adjacent_noise=0.0)
    ds = make_synthetic_benchmark(spec, 1).source
    vec = CountVectorizer(token_pattern=r"\S+")
    X = vec.fit_transform(ds.texts)
    y = np.array(ds.labels)
    clf = LogisticRegression(max_iter=2000).fit(X[:1000], y[:1000])
    assert clf.score(X[1000:], y[1000:]) > 0.95
