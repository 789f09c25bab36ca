"""Shared training loops: prompt tuning and full-model tuning with early stopping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .model import (
    BackboneParams,
    Batch,
    SoftPrompt,
    TemplatedInput,
    Tokenizer,
    Verbalizer,
    apply_template,
    collate,
    label_loss,
    predict,
)

log = logging.getLogger(__name__)


@dataclass
class Workbench:
    """A backbone together with the tokenizer and verbalizer that read it."""

    backbone: BackboneParams
    tokenizer: Tokenizer
    verbalizer: Verbalizer

    def __post_init__(self):
        self._cache: dict[str, TemplatedInput] = {}

    def templated(self, text: str) -> TemplatedInput:
        x = self._cache.get(text)
        if x is None:
            x = self._cache[text] = apply_template(text, self.tokenizer, self.backbone.config)
        return x

    def batch(self, texts: Sequence[str]) -> Batch:
        return collate([self.templated(t) for t in texts], self.tokenizer.mask_id)

    def with_backbone(self, backbone: BackboneParams) -> "Workbench":
        return Workbench(backbone, self.tokenizer, self.verbalizer)


@dataclass
class TuneConfig:
    lr: float = 0.003
    batch_size: int = 4
    max_epochs: int = 200
    warmup: int = 20
    patience: int = 5
    weight_decay: float = 0.01
    decay: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def accuracy_counts(P, wb: Workbench, ds: Dataset, weights=None, chunk: int = 64) -> tuple[int, int]:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for s in range(0, len(ds), chunk):
        part = ds.examples[s:s + chunk]
        pred = predict(P, wb.backbone, wb.batch([e.text for e in part]), wb.verbalizer, weights)
        correct += int(sum(int(p) == e.label for p, e in zip(pred, part)))
    return correct, len(ds)


def accuracy(P, wb: Workbench, ds: Dataset, weights=None) -> float:
    c, n = accuracy_counts(P, wb, ds, weights)
    return float(Fraction(c, n))


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def prompt_grad(P: np.ndarray, wb: Workbench, texts: Sequence[str], labels: Sequence[int]):
    t = Tensor(P, requires_grad=True)
    loss = label_loss(t, wb.backbone, wb.batch(texts), labels, wb.verbalizer)
    (g,) = ad.grad(loss, [t])
    return loss.item(), g.data


def tune_prompt(P_init: SoftPrompt | np.ndarray, wb: Workbench, train: Dataset, valid: Dataset,
                cfg: TuneConfig, on_step: Callable | None = None):
    """AdamW on the prompt only, validated every epoch; returns (best prompt, curve).

    ``curve[0]`` is the validation accuracy of ``P_init`` itself, which competes
    for best like any later epoch, so the result never validates worse than
    the starting point.
    """
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("empty train or validation split")
    P = np.array(P_init.P if isinstance(P_init, SoftPrompt) else P_init, dtype=np.float64)
    if not wb.backbone.frozen:
        raise ValueError("prompt tuning requires a frozen backbone")
    best_P, best = P.copy(), accuracy(P, wb, valid)
    curve = [best]
    if cfg.max_epochs == 0:
        return SoftPrompt(best_P), curve
    rng = np.random.default_rng(cfg.seed)
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.max_epochs * per_epoch
    state = ad.AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    step, bad = 0, 0
    for epoch in range(cfg.max_epochs):
        for idx in _epoch_batches(len(train), cfg.batch_size, rng):
            part = [train.examples[i] for i in idx]
            loss, g = prompt_grad(P, wb, [e.text for e in part], [e.label for e in part])
            step += 1
            lr = ad.lr_schedule(step, min(cfg.warmup, total), total, cfg.lr, cfg.decay)
            (P,) = ad.adamw_step([P], [g], state, lr=lr)
            if on_step is not None:
                on_step(step, P, loss)
        acc = accuracy(P, wb, valid)
        curve.append(acc)
        if acc > best:
            best, best_P, bad = acc, P.copy(), 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    log.debug("prompt tuning stopped after %d epochs, best valid %.4f", len(curve) - 1, best)
    return SoftPrompt(best_P), curve


def tune_full(backbone: BackboneParams, wb: Workbench, train: Dataset, valid: Dataset,
              cfg: TuneConfig):
    """Tune every weight of an unfrozen backbone copy through the template/verbalizer head.

    Returns ``(best backbone, best validation accuracy, curve)``; the best
    backbone is returned frozen.
    """
    if backbone.frozen:
        raise ValueError("full tuning needs an unfrozen copy of the backbone")
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("empty train or validation split")
    wb = wb.with_backbone(backbone)
    names = sorted(backbone.arrays)
    best_arrays = {k: v.copy() for k, v in backbone.arrays.items()}
    best = accuracy(None, wb, valid, backbone.constants())
    curve = [best]
    rng = np.random.default_rng(cfg.seed)
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = max(cfg.max_epochs * per_epoch, 1)
    state = ad.AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    step, bad = 0, 0
    for epoch in range(cfg.max_epochs):
        for idx in _epoch_batches(len(train), cfg.batch_size, rng):
            part = [train.examples[i] for i in idx]
            w = backbone.trainable()
            loss = label_loss(None, backbone, wb.batch([e.text for e in part]),
                              [e.label for e in part], wb.verbalizer, w)
            grads = ad.grad(loss, [w[n] for n in names], allow_unused=True)
            step += 1
            lr = ad.lr_schedule(step, min(cfg.warmup, total), total, cfg.lr, cfg.decay)
            new = ad.adamw_step([backbone.arrays[n] for n in names], [g.data for g in grads], state, lr=lr)
            backbone.arrays = dict(zip(names, new))
        acc = accuracy(None, wb, valid, backbone.constants())
        curve.append(acc)
        if acc > best:
            best, bad = acc, 0
            best_arrays = {k: v.copy() for k, v in backbone.arrays.items()}
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    out = BackboneParams(backbone.config, best_arrays).freeze()
    return out, best, curve
