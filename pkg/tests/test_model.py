import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metapt import autodiff as ad
from metapt.autodiff import Tensor
from metapt.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from metapt.model import (
    SENTIMENT5,
    BackboneParams,
    FrozenBackboneError,
    ModelConfig,
    Tokenizer,
    Verbalizer,
    apply_template,
    collate,
    forward,
    init_backbone,
    init_prompt,
    label_loss,
    mask_tokens,
    mlm_loss,
    pick_class,
    predict,
    pretrain_backbone,
)


def test_template_basic(tokenizer, small_config):
    x = apply_template("I love this movie", tokenizer, small_config)
    assert tokenizer.decode(x.ids) == "i love this movie it was <mask> ."
    assert x.mask_pos == 6


def test_template_empty(tokenizer, small_config):
    x = apply_template("", tokenizer, small_config)
    assert tokenizer.decode(x.ids) == "it was <mask> ."
    assert x.mask_pos == 2


def test_template_truncates_text_keeps_suffix(tokenizer, small_config):
    x = apply_template(" ".join(["movie"] * 500), tokenizer, small_config)
    assert len(x.ids) == small_config.max_seq_len - small_config.prompt_len
    assert tokenizer.decode(x.ids[-4:]) == "it was <mask> ."
    assert x.ids[x.mask_pos] == tokenizer.mask_id


def test_unknown_words_map_to_unk(tokenizer):
    assert tokenizer.encode("zzzqqq") == [tokenizer.unk_id]


def test_collate_rejects_missing_or_double_mask(tokenizer, small_config):
    x = apply_template("fun", tokenizer, small_config)
    bad = type(x)(x.ids[:-2] + [tokenizer.index["."]], 0)
    with pytest.raises(ValueError):
        collate([bad])
    double = type(x)([tokenizer.mask_id] + x.ids, 0)
    with pytest.raises(ValueError):
        collate([double])


def _batch(tokenizer, cfg, texts):
    return collate([apply_template(t, tokenizer, cfg) for t in texts])


def test_forward_is_distribution(tokenizer, small_config, frozen_backbone, rng):
    P = rng.normal(0, 0.02, (small_config.prompt_len, small_config.d_model))
    lp = forward(P, frozen_backbone, _batch(tokenizer, small_config, ["i love this movie", "boring"]))
    np.testing.assert_allclose(np.exp(lp.data).sum(axis=1), 1.0, atol=1e-12)


def test_forward_too_long(tokenizer, small_config, frozen_backbone):
    x = apply_template("fun", tokenizer, small_config)
    P = np.zeros((small_config.max_seq_len, small_config.d_model))
    with pytest.raises(ValueError):
        forward(P, frozen_backbone, x)


def test_permutation_symmetry_without_positions(tokenizer, small_config, rng):
    bb = init_backbone(small_config, seed=5)
    bb.arrays["pos_emb"][:] = 0.0
    bb.freeze()
    P = rng.normal(0, 0.5, (small_config.prompt_len, small_config.d_model))
    a = forward(P, bb, _batch(tokenizer, small_config, ["the food was cold"])).data
    b = forward(P, bb, _batch(tokenizer, small_config, ["the cold was food"])).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_prompt_gradient_matches_finite_differences(tokenizer, small_config, frozen_backbone,
                                                   verbalizer, rng):
    batch = _batch(tokenizer, small_config, ["i love this movie", "slow service"])
    P0 = rng.normal(0, 0.3, (small_config.prompt_len, small_config.d_model))

    def f(v):
        return label_loss(v, frozen_backbone, batch, [4, 1], verbalizer).item()

    P = Tensor(P0, requires_grad=True)
    (g,) = ad.grad(label_loss(P, frozen_backbone, batch, [4, 1], verbalizer), [P])
    num = ad.finite_diff_grad(f, P0, 1e-5)
    assert np.max(np.abs(g.data - num)) / np.max(np.abs(num)) < 1e-5


def test_uniform_backbone_loss_is_log_vocab(tokenizer, small_config, verbalizer):
    bb = init_backbone(small_config, 0)
    for k in bb.arrays:
        bb.arrays[k][:] = 0.0
    bb.freeze()
    batch = _batch(tokenizer, small_config, ["fun", "awful plot"])
    loss = label_loss(np.zeros((4, 16)), bb, batch, [0, 3], verbalizer)
    assert abs(loss.item() - np.log(small_config.vocab_size)) < 1e-12
    assert list(predict(np.zeros((4, 16)), bb, batch, verbalizer)) == [0, 0]


def test_duplicate_batch_loss_equals_single(tokenizer, small_config, frozen_backbone, verbalizer, rng):
    P = rng.normal(0, 0.02, (4, 16))
    one = label_loss(P, frozen_backbone, _batch(tokenizer, small_config, ["nice story"]), [3], verbalizer)
    two = label_loss(P, frozen_backbone, _batch(tokenizer, small_config, ["nice story"] * 2), [3, 3], verbalizer)
    assert abs(one.item() - two.item()) < 1e-14


def test_label_out_of_range(tokenizer, small_config, frozen_backbone, verbalizer):
    with pytest.raises(ValueError):
        label_loss(None, frozen_backbone, _batch(tokenizer, small_config, ["fun"]), [5], verbalizer)


def test_prompt_only_descent_decreases_loss(tokenizer, small_config, frozen_backbone, verbalizer, rng):
    batch = _batch(tokenizer, small_config, ["i love this movie", "awful plot", "fine film", "boring actor"])
    labels = [4, 0, 2, 1]
    P = rng.normal(0, 0.02, (4, 16))
    losses = []
    for _ in range(50):
        t = Tensor(P, requires_grad=True)
        loss = label_loss(t, frozen_backbone, batch, labels, verbalizer)
        (g,) = ad.grad(loss, [t])
        losses.append(loss.item())
        P = P - 0.5 * g.data
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_predict_after_saturation(tokenizer, small_config, pretrained_backbone, verbalizer, rng):
    # the pretrained backbone reads this text as "bad"; the prompt must override it
    batch = _batch(tokenizer, small_config, ["the food was cold"])
    P = rng.normal(0, 0.02, (4, 16))
    state = ad.AdamWState(lr=0.05, weight_decay=0.0)
    for _ in range(100):
        t = Tensor(P, requires_grad=True)
        (g,) = ad.grad(label_loss(t, pretrained_backbone, batch, [4], verbalizer), [t])
        (P,) = ad.adamw_step([P], [g.data], state)
    assert predict(P, pretrained_backbone, batch, verbalizer)[0] == 4


def test_verbalizer_round_trip(tokenizer):
    v = Verbalizer.from_words(SENTIMENT5, tokenizer)
    for c, w in enumerate(SENTIMENT5):
        assert tokenizer.vocab[v.token_for(c)] == w
        assert v.class_for(v.token_for(c)) == c
    with pytest.raises(ValueError):
        Verbalizer.from_words(["good", "good"], tokenizer)
    with pytest.raises(KeyError):
        Verbalizer.from_words(["notaword"], tokenizer)


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, (3, 5), elements=st.integers(-50, 50)), st.floats(0.1, 10), st.floats(-3, 3))
def test_pick_class_monotone_invariance(scores, a, b):
    scores = scores / 10.0
    assert np.array_equal(pick_class(scores), pick_class(a * scores + b))
    assert np.array_equal(pick_class(scores), pick_class(np.exp(scores)))


def test_pick_class_ties_to_smallest():
    assert pick_class(np.array([[1.0, 3.0, 3.0, 0.0]]))[0] == 1


def test_frozen_backbone_refuses_training(frozen_backbone):
    with pytest.raises(FrozenBackboneError):
        frozen_backbone.trainable()


def test_frozen_hash_unchanged_by_prompt_tuning(tokenizer, small_config, frozen_backbone, verbalizer, rng):
    before = frozen_backbone.content_hash()
    batch = _batch(tokenizer, small_config, ["fun"])
    P = Tensor(rng.normal(size=(4, 16)), requires_grad=True)
    ad.grad(label_loss(P, frozen_backbone, batch, [2], verbalizer), [P])
    assert frozen_backbone.content_hash() == before


# ----------------------------------------------------------- pretraining

def test_pretrain_zero_steps_is_seeded_init(toy_corpus, small_config):
    bb = pretrain_backbone(toy_corpus, small_config, steps=0, seed=9)
    assert bb.frozen
    assert bb.content_hash() == init_backbone(small_config, 9).content_hash()


def test_pretrain_empty_corpus(small_config):
    with pytest.raises(ValueError):
        pretrain_backbone([], small_config, steps=1, seed=0)


def test_pretrain_deterministic(toy_corpus, small_config):
    a = pretrain_backbone(toy_corpus, small_config, steps=5, seed=2)
    b = pretrain_backbone(toy_corpus, small_config, steps=5, seed=2)
    assert a.content_hash() == b.content_hash()


def test_pretrain_reduces_heldout_mlm_loss(toy_corpus, small_config):
    train, held = toy_corpus[:150], toy_corpus[150:]

    def heldout(bb):
        rng = np.random.default_rng(77)
        ids, lengths, rows, targets = mask_tokens(held, rng, small_config.vocab_size)
        with ad.no_grad():
            return mlm_loss(bb, bb.constants(), ids, lengths, rows, targets).item()

    start = heldout(init_backbone(small_config, 4).freeze())
    trained = pretrain_backbone(train, small_config, steps=2000, seed=4, lr=3e-3)
    assert heldout(trained) < start


# ----------------------------------------------------------- prompt init

def test_init_prompt_random_normal(small_config):
    a = init_prompt(small_config, "random-normal", seed=3)
    b = init_prompt(small_config, "random-normal", seed=3)
    assert a.shape == (4, 16)
    assert np.array_equal(a.P, b.P)
    big = init_prompt(ModelConfig(vocab_size=10, d_model=64, n_heads=4, prompt_len=100), seed=1)
    assert abs(big.P.std() - 0.02) < 0.002


def test_init_prompt_sample_vocab(small_config, frozen_backbone):
    p = init_prompt(small_config, "sample-vocab", seed=1, backbone=frozen_backbone)
    emb = frozen_backbone.arrays["tok_emb"]
    for row in p.P:
        assert np.any(np.all(emb == row, axis=1))


def test_init_prompt_checkpoint_round_trip(small_config, tmp_path):
    p = init_prompt(small_config, seed=8)
    save_checkpoint(tmp_path / "p.ckpt", p.to_checkpoint())
    q = init_prompt(small_config, "load-checkpoint", path=tmp_path / "p.ckpt")
    assert np.array_equal(p.P, q.P)
    wrong = ModelConfig(vocab_size=10, d_model=16, n_heads=2, prompt_len=6)
    with pytest.raises(CheckpointError, match=r"\(4, 16\).*\(6, 16\)"):
        init_prompt(wrong, "load-checkpoint", path=tmp_path / "p.ckpt")


def test_backbone_checkpoint_round_trip(frozen_backbone, tmp_path):
    save_checkpoint(tmp_path / "b.ckpt", frozen_backbone.to_checkpoint())
    bb = BackboneParams.from_checkpoint(load_checkpoint(tmp_path / "b.ckpt"))
    assert bb.frozen and bb.content_hash() == frozen_backbone.content_hash()
    assert bb.config == frozen_backbone.config


def test_tokenizer_forces_label_words():
    tok = Tokenizer.build(["a b c"] * 3, max_vocab=8, force=SENTIMENT5)
    for w in SENTIMENT5:
        tok.token_id(w)
