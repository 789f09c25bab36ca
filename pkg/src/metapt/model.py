"""Tiny bidirectional transformer MLM with soft-prompt injection.

The classifier is the masked-token head read at the ``<mask>`` slot of the
hybrid template ``<text> it was <mask> .`` with a soft prompt matrix prepended
to the token embeddings.
"""
from __future__ import annotations

import copy
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, CheckpointError, arrays_hash, load_checkpoint

log = logging.getLogger(__name__)

PAD, UNK, MASK = "<pad>", "<unk>", "<mask>"
RESERVED = (PAD, UNK, MASK)
TEMPLATE_PREFIX = "it was"
TEMPLATE_END = "."
_TOKEN_RE = re.compile(r"<pad>|<unk>|<mask>|\w+|[^\w\s]")
_NEG_INF = -1e9


class FrozenBackboneError(RuntimeError):
    """Raised when trainable weights are requested from a frozen backbone."""


# ---------------------------------------------------------------- tokenizer

def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Tokenizer:
    def __init__(self, vocab: Sequence[str]):
        if tuple(vocab[:3]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        if len(set(vocab)) != len(vocab):
            raise ValueError("duplicate vocabulary entries")
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.pad_id, self.unk_id, self.mask_id = 0, 1, 2

    @classmethod
    def build(cls, texts: Iterable[str], max_vocab: int = 2000,
              force: Sequence[str] = ()) -> "Tokenizer":
        counts = Counter()
        for t in texts:
            counts.update(split_words(t))
        forced = [w for w in dict.fromkeys(list(force) + split_words(TEMPLATE_PREFIX) + [TEMPLATE_END])
                  if w not in RESERVED]
        budget = max_vocab - len(RESERVED) - len(forced)
        # ties in frequency broken alphabetically so the vocabulary is stable
        ranked = sorted((w for w in counts if w not in forced and w not in RESERVED),
                        key=lambda w: (-counts[w], w))
        return cls(list(RESERVED) + forced + ranked[:max(budget, 0)])

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)

    def token_id(self, word: str) -> int:
        pieces = split_words(word)
        if len(pieces) != 1 or pieces[0] not in self.index:
            raise KeyError(f"{word!r} is not a single vocabulary entry")
        return self.index[pieces[0]]


# ------------------------------------------------------------------ configs

@dataclass
class ModelConfig:
    vocab_size: int = 0
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 160
    prompt_len: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.prompt_len + 4 > self.max_seq_len:
            raise ValueError("prompt_len leaves no room for the template")


@dataclass
class Verbalizer:
    words: list[str]
    token_ids: list[int] = field(default_factory=list)

    @classmethod
    def from_words(cls, words: Sequence[str], tokenizer: Tokenizer) -> "Verbalizer":
        words = list(words)
        if len(set(words)) != len(words):
            raise ValueError("verbalizer words must be distinct")
        return cls(words, [tokenizer.token_id(w) for w in words])

    @property
    def n_classes(self) -> int:
        return len(self.words)

    def token_for(self, cls_idx: int) -> int:
        if not 0 <= cls_idx < len(self.token_ids):
            raise ValueError(f"class {cls_idx} outside verbalizer of {len(self.token_ids)} classes")
        return self.token_ids[cls_idx]

    def class_for(self, token_id: int) -> int:
        return self.token_ids.index(token_id)


SENTIMENT5 = ("terrible", "bad", "maybe", "good", "great")


# ----------------------------------------------------------------- backbone

class BackboneParams:
    """Named weight arrays of the encoder plus a frozen flag."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray], frozen: bool = False):
        self.config = config
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        self.frozen = frozen
        self._const: dict[str, Tensor] | None = None

    def freeze(self) -> "BackboneParams":
        self.frozen = True
        for a in self.arrays.values():
            a.setflags(write=False)
        return self

    def copy(self, frozen: bool = False) -> "BackboneParams":
        out = BackboneParams(copy.deepcopy(self.config), {k: v.copy() for k, v in self.arrays.items()})
        return out.freeze() if frozen else out

    def content_hash(self) -> str:
        return arrays_hash(self.arrays)

    def constants(self) -> dict[str, Tensor]:
        if self._const is None or not self.frozen:
            consts = {k: Tensor(v) for k, v in self.arrays.items()}
            if not self.frozen:
                return consts
            self._const = consts
        return self._const

    def trainable(self) -> dict[str, Tensor]:
        if self.frozen:
            raise FrozenBackboneError("backbone is frozen; its weights cannot be trained")
        return {k: Tensor(v, requires_grad=True) for k, v in self.arrays.items()}

    def to_checkpoint(self, meta: dict | None = None) -> Checkpoint:
        m = {"config": asdict(self.config), "frozen": self.frozen}
        m.update(meta or {})
        return Checkpoint("backbone", dict(self.arrays), m)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "BackboneParams":
        if ckpt.kind not in ("backbone", "annotator"):
            raise CheckpointError(f"expected a backbone checkpoint, found {ckpt.kind}")
        bb = cls(ModelConfig(**ckpt.meta["config"]), ckpt.arrays)
        return bb.freeze() if ckpt.meta.get("frozen", True) else bb


def init_backbone(config: ModelConfig, seed: int) -> BackboneParams:
    rng = np.random.default_rng(seed)
    d, ff, V = config.d_model, config.d_ff, config.vocab_size
    if V <= len(RESERVED):
        raise ValueError("vocab_size must be set before initializing the backbone")

    def normal(*shape):
        return rng.normal(0.0, 0.02, size=shape)

    arrays = {"tok_emb": normal(V, d), "pos_emb": normal(config.max_seq_len, d)}
    for l in range(config.n_layers):
        p = f"l{l}."
        arrays.update({
            p + "ln1_g": np.ones(d), p + "ln1_b": np.zeros(d),
            p + "wq": normal(d, d), p + "wk": normal(d, d),
            p + "wv": normal(d, d), p + "wo": normal(d, d), p + "bo": np.zeros(d),
            p + "ln2_g": np.ones(d), p + "ln2_b": np.zeros(d),
            p + "w1": normal(d, ff), p + "b1": np.zeros(ff),
            p + "w2": normal(ff, d), p + "b2": np.zeros(d),
        })
    arrays.update({"lnf_g": np.ones(d), "lnf_b": np.zeros(d), "out_b": np.zeros(V)})
    return BackboneParams(config, arrays)


# ------------------------------------------------------------------ inputs

@dataclass
class TemplatedInput:
    ids: list[int]
    mask_pos: int


def apply_template(text: str, tokenizer: Tokenizer, config: ModelConfig) -> TemplatedInput:
    """``<text> it was <mask> .``, truncating the text from the right to fit."""
    suffix = tokenizer.encode(TEMPLATE_PREFIX) + [tokenizer.mask_id] + tokenizer.encode(TEMPLATE_END)
    room = config.max_seq_len - config.prompt_len - len(suffix)
    if room < 0:
        raise ValueError("template does not fit in max_seq_len")
    body = [i for i in tokenizer.encode(text) if i != tokenizer.mask_id][:room]
    ids = body + suffix
    return TemplatedInput(ids, len(body) + len(suffix) - 2)


@dataclass
class Batch:
    ids: np.ndarray        # (B, T) int, right-padded with pad id 0
    lengths: np.ndarray    # (B,)
    mask_pos: np.ndarray   # (B,) position of <mask> within ids

    def __len__(self) -> int:
        return len(self.ids)


def collate(items: Sequence[TemplatedInput], mask_id: int = 2) -> Batch:
    if not items:
        raise ValueError("empty batch")
    T = max(len(x.ids) for x in items)
    ids = np.zeros((len(items), T), dtype=np.int64)
    for i, x in enumerate(items):
        n_masks = sum(1 for t in x.ids if t == mask_id)
        if n_masks != 1 or x.ids[x.mask_pos] != mask_id:
            raise ValueError(f"example {i} must contain exactly one mask, found {n_masks}")
        ids[i, :len(x.ids)] = x.ids
    return Batch(ids, np.array([len(x.ids) for x in items]), np.array([x.mask_pos for x in items]))


# ----------------------------------------------------------------- forward

def _prompt_tensor(P) -> Tensor | None:
    if P is None:
        return None
    if isinstance(P, SoftPrompt):
        return Tensor(P.P)
    return P if isinstance(P, Tensor) else Tensor(P)


def encode(P, backbone: BackboneParams, ids: np.ndarray, lengths: np.ndarray,
           weights: dict[str, Tensor] | None = None) -> Tensor:
    """Final-layer hidden states (before the output layer norm), shape (B, L+T, d).

    ``P`` is None, a (L, d) prompt shared by the batch, or (B, L, d) per-example.
    Positional embeddings index the text tokens from 0 so the backbone sees
    the same positions with or without a prompt.
    """
    cfg = backbone.config
    w = weights if weights is not None else backbone.constants()
    B, T = ids.shape
    P = _prompt_tensor(P)
    L = 0 if P is None else P.shape[-2]
    if L + T > cfg.max_seq_len:
        raise ValueError(f"sequence of {L + T} exceeds max_seq_len {cfg.max_seq_len}")
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H

    x = ad.gather_rows(w["tok_emb"], ids) + ad.slice_axis(w["pos_emb"], 0, 0, T)
    if P is not None:
        P3 = ad.broadcast_to(P, (B, L, d)) if P.ndim == 2 else P
        x = ad.concat([P3, x], axis=1)
    S = L + T
    valid = np.concatenate([np.ones((B, L), bool), np.arange(T)[None, :] < lengths[:, None]], axis=1)
    bias = Tensor(np.where(valid, 0.0, _NEG_INF)[:, None, None, :])
    scale = 1.0 / np.sqrt(dh)

    for l in range(cfg.n_layers):
        p = f"l{l}."
        h = ad.layer_norm(x, w[p + "ln1_g"], w[p + "ln1_b"])

        def heads(t):
            return t.reshape(B, S, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(h @ w[p + "wq"]), heads(h @ w[p + "wk"]), heads(h @ w[p + "wv"])
        att = ad.softmax((q @ ad.swap_last(k)) * scale + bias, -1)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
        x = x + (o @ w[p + "wo"] + w[p + "bo"])
        h = ad.layer_norm(x, w[p + "ln2_g"], w[p + "ln2_b"])
        x = x + (ad.gelu(h @ w[p + "w1"] + w[p + "b1"]) @ w[p + "w2"] + w[p + "b2"])
    return x


def lm_head(h: Tensor, w: dict[str, Tensor]) -> Tensor:
    """Log-probabilities over the vocabulary for rows of ``h`` (N, d)."""
    h = ad.layer_norm(h, w["lnf_g"], w["lnf_b"])
    return ad.log_softmax(h @ ad.swap_last(w["tok_emb"]) + w["out_b"], -1)


def forward(P, backbone: BackboneParams, batch: Batch | TemplatedInput,
            weights: dict[str, Tensor] | None = None) -> Tensor:
    """Log-probability vectors (B, V) over the vocabulary at each mask slot."""
    if isinstance(batch, TemplatedInput):
        batch = collate([batch])
    w = weights if weights is not None else backbone.constants()
    x = encode(P, backbone, batch.ids, batch.lengths, w)
    B, S, d = x.shape
    L = S - batch.ids.shape[1]
    rows = np.arange(B) * S + L + batch.mask_pos
    return lm_head(ad.gather_rows(x.reshape(B * S, d), rows), w)


def label_loss(P, backbone: BackboneParams, batch: Batch, labels: Sequence[int],
               verbalizer: Verbalizer, weights: dict[str, Tensor] | None = None) -> Tensor:
    """Mean negative log-likelihood of each label's verbalizer token, full vocabulary."""
    targets = [verbalizer.token_for(int(y)) for y in labels]
    logp = forward(P, backbone, batch, weights)
    return ad.neg(ad.mean(ad.take_along_last(logp, targets)))


def verbalizer_logprobs(P, backbone, batch: Batch, verbalizer: Verbalizer,
                        weights=None) -> np.ndarray:
    with ad.no_grad():
        logp = forward(P, backbone, batch, weights).data
    return logp[:, verbalizer.token_ids]


def predict(P, backbone: BackboneParams, batch: Batch, verbalizer: Verbalizer,
            weights=None) -> np.ndarray:
    """Class indices by argmax over verbalizer tokens; ties go to the smaller index."""
    return pick_class(verbalizer_logprobs(P, backbone, batch, verbalizer, weights))


def pick_class(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal entry, which is the tie rule we want
    return np.argmax(scores, axis=-1)


def class_probs(P, backbone, batch: Batch, verbalizer: Verbalizer, weights=None) -> np.ndarray:
    """Softmax over the verbalizer tokens only; rows sum to one."""
    lp = verbalizer_logprobs(P, backbone, batch, verbalizer, weights)
    lp = lp - lp.max(axis=1, keepdims=True)
    e = np.exp(lp)
    return e / e.sum(axis=1, keepdims=True)


# ------------------------------------------------------------- soft prompt

@dataclass
class SoftPrompt:
    P: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.P.ndim != 2 or not np.all(np.isfinite(self.P)):
            raise ValueError("soft prompt must be a finite 2-D matrix")

    @property
    def shape(self):
        return self.P.shape

    def to_checkpoint(self, meta: dict | None = None) -> Checkpoint:
        return Checkpoint("prompt", {"P": self.P}, dict(meta or {}))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, expect_shape=None) -> "SoftPrompt":
        if ckpt.kind != "prompt":
            raise CheckpointError(f"expected a prompt checkpoint, found {ckpt.kind}")
        P = ckpt.arrays["P"]
        if expect_shape is not None and tuple(P.shape) != tuple(expect_shape):
            raise CheckpointError(f"prompt checkpoint has shape {tuple(P.shape)}, "
                                  f"model config expects {tuple(expect_shape)}")
        return cls(P)


def init_prompt(config: ModelConfig, mode: str = "random-normal", seed: int = 0,
                backbone: BackboneParams | None = None, path=None) -> SoftPrompt:
    shape = (config.prompt_len, config.d_model)
    rng = np.random.default_rng(seed)
    if mode == "random-normal":
        return SoftPrompt(rng.normal(0.0, 0.02, size=shape))
    if mode == "sample-vocab":
        if backbone is None:
            raise ValueError("sample-vocab initialization needs a backbone")
        emb = backbone.arrays["tok_emb"]
        rows = rng.integers(len(RESERVED), emb.shape[0], size=config.prompt_len)
        return SoftPrompt(emb[rows].copy())
    if mode == "load-checkpoint":
        return SoftPrompt.from_checkpoint(load_checkpoint(path, "prompt"), shape)
    raise ValueError(f"unknown prompt init mode {mode!r}")


# ------------------------------------------------------------ pretraining

def mask_tokens(seqs: Sequence[Sequence[int]], rng: np.random.Generator, vocab_size: int,
                rate: float = 0.15, mask_id: int = 2):
    """BERT-style corruption: of the selected positions 80% mask, 10% random, 10% kept."""
    B = len(seqs)
    T = max(len(s) for s in seqs)
    ids = np.zeros((B, T), dtype=np.int64)
    lengths = np.array([len(s) for s in seqs])
    rows, targets = [], []
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        pick = np.flatnonzero(rng.random(len(s)) < rate)
        if pick.size == 0:
            pick = np.array([rng.integers(len(s))])
        for j in pick:
            targets.append(s[j])
            rows.append(i * T + j)
            r = rng.random()
            if r < 0.8:
                ids[i, j] = mask_id
            elif r < 0.9:
                ids[i, j] = rng.integers(len(RESERVED), vocab_size)
    return ids, lengths, np.array(rows), np.array(targets)


def mlm_loss(backbone: BackboneParams, weights: dict[str, Tensor], ids, lengths, rows, targets) -> Tensor:
    x = encode(None, backbone, ids, lengths, weights)
    B, S, d = x.shape
    logp = lm_head(ad.gather_rows(x.reshape(B * S, d), rows), weights)
    return ad.neg(ad.mean(ad.take_along_last(logp, targets)))


def pretrain_backbone(corpus: Sequence[Sequence[int]], config: ModelConfig, steps: int,
                      seed: int, batch_size: int = 16, lr: float = 1e-3,
                      warmup: int = 50, log_every: int = 0) -> BackboneParams:
    """Masked-token pretraining of every backbone weight; returns the frozen result."""
    corpus = [list(s) for s in corpus if len(s) > 0]
    if not corpus:
        raise ValueError("empty corpus")
    limit = config.max_seq_len
    corpus = [s[:limit] for s in corpus]
    bb = init_backbone(config, seed)
    rng = np.random.default_rng(seed + 1)
    state = ad.AdamWState(lr=lr, weight_decay=0.01)
    names = sorted(bb.arrays)
    for step in range(steps):
        pick = rng.integers(len(corpus), size=batch_size)
        ids, lengths, rows, targets = mask_tokens([corpus[i] for i in pick], rng, config.vocab_size)
        w = bb.trainable()
        loss = mlm_loss(bb, w, ids, lengths, rows, targets)
        grads = ad.grad(loss, [w[n] for n in names], allow_unused=True)
        cur = ad.lr_schedule(min(step + 1, steps), min(warmup, steps), steps, lr)
        new = ad.adamw_step([bb.arrays[n] for n in names], [g.data for g in grads], state, lr=cur)
        bb.arrays = dict(zip(names, new))
        if log_every and step % log_every == 0:
            log.info("mlm step %d loss %.4f", step, loss.item())
    return bb.freeze()
