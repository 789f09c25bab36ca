import csv

import numpy as np
import pytest

from metapt.data import Dataset, Example
from metapt.downstream import (
    AblationContext,
    CellConfig,
    EvalReport,
    HeldOut,
    MissingArtifact,
    ablate_clusters,
    ablate_datasize,
    ablate_methods,
    evaluate,
    full_tune,
    prompt_tune,
    run_cell,
    write_csv,
    write_svg,
)
from metapt.metatrain import MamlConfig, PptConfig
from metapt.model import Tokenizer, Verbalizer, init_backbone, init_prompt, predict
from metapt.taskgen import ClusterConfig
from metapt.tuning import TuneConfig, Workbench

from conftest import TOY_PAIRS, WORDS


@pytest.fixture(scope="module")
def wb(frozen_backbone, tokenizer, verbalizer):
    return Workbench(frozen_backbone, tokenizer, verbalizer)


def _toy(n, seed=0):
    rng = np.random.default_rng(seed)
    ex = []
    for i in range(n):
        k = i % 5
        words = rng.choice(WORDS, size=4)
        ex.append(Example(" ".join(words) + f" {TOY_PAIRS[k][0]}", k))
    return Dataset(ex, 5, "toy")


# ---------------------------------------------------------------- evaluate

def test_evaluate_all_correct(wb):
    ds = _toy(30)
    P = init_prompt(wb.backbone.config, seed=1)
    pred = predict(P.P, wb.backbone, wb.batch(ds.texts), wb.verbalizer)
    relabelled = Dataset([Example(e.text, int(p)) for e, p in zip(ds, pred)], 5)
    assert evaluate(P, wb, relabelled) == 1.0


def test_evaluate_chance_level(wb):
    rng = np.random.default_rng(3)
    ds = _toy(500)
    labels = rng.permutation(np.arange(500) % 5)
    ds = Dataset([Example(e.text, int(y)) for e, y in zip(ds, labels)], 5)
    acc = evaluate(init_prompt(wb.backbone.config, seed=2), wb, ds)
    assert abs(acc - 0.2) <= 3 * np.sqrt(0.2 * 0.8 / 500)


def test_evaluate_pure_and_rejects_empty(wb):
    ds = _toy(20)
    P = init_prompt(wb.backbone.config, seed=1)
    assert evaluate(P, wb, ds) == evaluate(P, wb, ds)
    with pytest.raises(ValueError):
        evaluate(P, wb, Dataset([], 5))


def test_heldout_records_reads(wb):
    h = HeldOut(_toy(10))
    evaluate(None, wb, h)
    assert h.accesses == ["evaluate"]


# ------------------------------------------------------------------ tuning

def test_prompt_tune_zero_epochs_is_identity(wb):
    P = init_prompt(wb.backbone.config, seed=5)
    out, curve = prompt_tune(P, wb, _toy(10), _toy(10, 1), TuneConfig(max_epochs=0))
    assert np.array_equal(out.P, P.P) and len(curve) == 1


def test_prompt_tune_best_not_worse_than_start(pretrained_backbone, tokenizer, verbalizer):
    wbp = Workbench(pretrained_backbone, tokenizer, verbalizer)
    train, valid = _toy(40, 1), _toy(40, 2)
    before = wbp.backbone.content_hash()
    _, curve = prompt_tune(init_prompt(wbp.backbone.config, seed=0), wbp, train, valid,
                           TuneConfig(max_epochs=5, seed=0))
    assert max(curve) >= curve[0]
    assert wbp.backbone.content_hash() == before


def test_full_tune_separable_and_copy_semantics():
    texts = ["alpha"] * 20 + ["omega"] * 20
    ds = Dataset([Example(t, int(t == "omega")) for t in texts], 2)
    tok = Tokenizer.build(texts, force=("bad", "good"))
    from metapt.model import ModelConfig
    cfg = ModelConfig(vocab_size=len(tok), d_model=16, n_heads=2, d_ff=32, max_seq_len=24, prompt_len=4)
    wb2 = Workbench(init_backbone(cfg, 0).freeze(), tok, Verbalizer.from_words(["bad", "good"], tok))
    before = wb2.backbone.content_hash()
    res = full_tune(wb2, ds, ds, TuneConfig(lr=3e-3, batch_size=8, max_epochs=30, patience=30, seed=1))
    assert evaluate(res, wb2, ds) >= 0.99
    assert wb2.backbone.content_hash() == before
    again = full_tune(wb2, ds, ds, TuneConfig(lr=3e-3, batch_size=8, max_epochs=30, patience=30, seed=1))
    assert again.workbench.backbone.content_hash() == res.workbench.backbone.content_hash()


# ----------------------------------------------------------------- reports

def test_report_single_seed_zero_std():
    r = EvalReport.build("PT", "d", [1], [0.4], "fp")
    assert r.std == 0.0 and r.mean == 0.4


def test_report_round_trip_and_recompute():
    accs = [0.1, 0.35, 0.2, 0.9, 0.55]
    r = EvalReport.build("MetaPT", "d", [0, 1, 2, 3, 4], accs, "fp")
    assert abs(r.mean - sum(accs) / 5) < 1e-12
    assert r.std == float(np.std(accs)) and r.consistent()
    back = EvalReport.from_json(r.to_json())
    assert back == r


SMALL_CELL = CellConfig(n_shot=10, tune=TuneConfig(max_epochs=2, patience=1), ft=TuneConfig(max_epochs=1))


def test_run_cell_protocol(wb):
    ds = _toy(60)
    before = wb.backbone.content_hash()
    a = run_cell("PT", "toy", ds, wb, [0, 1, 2, 3, 4], SMALL_CELL)
    b = run_cell("PT", "toy", ds, wb, [0, 1, 2, 3, 4], SMALL_CELL)
    assert a == b and len(a.accuracies) == 5 and a.consistent()
    assert wb.backbone.content_hash() == before
    ppt = run_cell("PPT", "toy", ds, wb, [0], SMALL_CELL, init_prompt(wb.backbone.config, seed=9))
    assert ppt.std == 0.0
    ft = run_cell("FT", "toy", ds, wb, [0], SMALL_CELL)
    assert 0.0 <= ft.accuracies[0] <= 1.0
    assert wb.backbone.content_hash() == before


def test_run_cell_errors(wb):
    with pytest.raises(MissingArtifact):
        run_cell("MetaPT", "toy", _toy(60), wb, [0], SMALL_CELL)
    with pytest.raises(ValueError):
        run_cell("XX", "toy", _toy(60), wb, [0], SMALL_CELL)


# --------------------------------------------------------------- ablations

@pytest.fixture(scope="module")
def ctx(wb):
    pool = _toy(60, 7)
    return AblationContext(
        wb, pool, "toy", _toy(40, 8), [0],
        cluster=ClusterConfig(K=5, min_size=4, embed_method="tf-idf", lda_iterations=5),
        maml=MamlConfig(max_outer_steps=2, eval_every=1, m=2),
        ppt=PptConfig(max_epochs=1, eval_every=5),
        cell=CellConfig(n_shot=10, tune=TuneConfig(max_epochs=1, patience=1)))


def test_ablation_rows_and_csv(ctx, tmp_path):
    rows = ablate_datasize(ctx, [20, 1000]) + ablate_clusters(ctx, [1, 3])
    assert [r["setting"] for r in rows] == [20, 1000, 1, 3]
    assert rows[1]["pool_size"] == len(ctx.pool)  # capped at the pool
    methods = ablate_methods(ctx)
    assert [r["setting"] for r in methods] == ["kmeans", "lda", "random", "label", "ppt"]
    assert methods[0]["inertia"] != "" and methods[0]["silhouette"] != ""
    path = write_csv(tmp_path / "a.csv", rows + methods)
    back = list(csv.DictReader(path.open()))
    assert len(back) == 9 and all(0 <= float(r["mean"]) <= 1 for r in back)
    svg = write_svg(tmp_path / "a.svg", [1, 2, 3], [0.2, 0.3, 0.25], "t", "x").read_text()
    assert svg.startswith("<svg") and "polyline" in svg
