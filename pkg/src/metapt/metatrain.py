"""Prompt-MAML over clustered meta tasks, and the PPT baseline pre-trainer."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, Example
from .model import SoftPrompt, init_prompt, label_loss
from .taskgen import MetaTask
from .tuning import Workbench, accuracy

log = logging.getLogger(__name__)


class TaskTooSmall(ValueError):
    pass


@dataclass
class MamlConfig:
    inner_lr: float = 0.08
    outer_lr: float = 0.025
    m: int = 4
    inner_steps: int = 1
    mode: str = "second-order"
    max_outer_steps: int = 20000
    eval_every: int = 100
    patience: int = 6
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    seed: int = 0

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.m < 1 or self.inner_steps < 1 or self.patience < 1 or self.eval_every < 1:
            raise ValueError("m, inner_steps, patience and eval_every must be >= 1")
        if self.mode not in ("second-order", "first-order"):
            raise ValueError(f"unknown MAML mode {self.mode!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown outer optimizer {self.optimizer!r}")


class PromptObjective:
    """Mean label loss of a batch of examples under a frozen workbench."""

    def __init__(self, wb: Workbench):
        self.wb = wb

    def __call__(self, P: Tensor, task, examples: Sequence[Example]) -> Tensor:
        return label_loss(P, self.wb.backbone, self.wb.batch([e.text for e in examples]),
                          [e.label for e in examples], self.wb.verbalizer)


# ------------------------------------------------------------------ sampling

@dataclass
class SupportQuery:
    support: list[Example]
    query: list[Example]
    replaced: bool = False


def sample_support_query(task: MetaTask, m: int, rng: np.random.Generator) -> SupportQuery:
    """m support and m query examples from the task's train split, disjoint when possible."""
    n = len(task.train)
    if n < m:
        raise TaskTooSmall(f"task {task.task_id} has {n} training examples, needs at least {m}")
    ex = task.train.examples
    if n >= 2 * m:
        idx = rng.choice(n, size=2 * m, replace=False)
        return SupportQuery([ex[i] for i in idx[:m]], [ex[i] for i in idx[m:]])
    sup = rng.choice(n, size=m, replace=False)
    qry = rng.choice(n, size=m, replace=True)
    log.debug("task %d: query drawn with replacement (%d examples)", task.task_id, n)
    return SupportQuery([ex[i] for i in sup], [ex[i] for i in qry], replaced=True)


# --------------------------------------------------------------- inner/outer

def inner_step(P: Tensor, task, support, objective: Callable, alpha: float,
               second_order: bool = True, steps: int = 1) -> Tensor:
    """P' = P - alpha * grad L_task(P) on the support batch; ``P`` itself is untouched.

    In second-order mode the update stays on the gradient record so the outer
    gradient flows through it.
    """
    cur = P
    for _ in range(steps):
        loss = objective(cur, task, support)
        (g,) = ad.grad(loss, [cur], create_graph=second_order)
        cur = cur - g * alpha if second_order else Tensor(cur.data - alpha * g.data)
    return cur


@dataclass
class OuterInfo:
    task_losses: list[float]
    grad: np.ndarray
    replaced: int = 0

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))


def meta_gradient(P: np.ndarray, tasks: Sequence, batches: Sequence[SupportQuery], objective: Callable,
                  cfg: MamlConfig) -> OuterInfo:
    """Gradient of sum_i L_i(P'_i) on the query batches with respect to P."""
    if not tasks:
        raise ValueError("outer step needs at least one task")
    P_t = Tensor(P, requires_grad=True)
    losses = []
    if cfg.mode == "second-order":
        total = None
        for task, sq in zip(tasks, batches):
            adapted = inner_step(P_t, task, sq.support, objective, cfg.inner_lr, True, cfg.inner_steps)
            q = objective(adapted, task, sq.query)
            losses.append(q.item())
            total = q if total is None else total + q
        (g,) = ad.grad(total, [P_t])
        g = g.data
    else:
        g = np.zeros_like(P)
        for task, sq in zip(tasks, batches):
            adapted = inner_step(P_t, task, sq.support, objective, cfg.inner_lr, False, cfg.inner_steps)
            leaf = Tensor(adapted.data, requires_grad=True)
            q = objective(leaf, task, sq.query)
            losses.append(q.item())
            (gi,) = ad.grad(q, [leaf])
            g = g + gi.data
    return OuterInfo(losses, g, sum(sq.replaced for sq in batches))


def outer_step(P: np.ndarray, tasks: Sequence, objective: Callable, cfg: MamlConfig,
               rng: np.random.Generator, opt: ad.AdamWState | None = None,
               sampler: Callable = sample_support_query) -> tuple[np.ndarray, OuterInfo]:
    """One meta update over every task, in task order; returns the new P."""
    if not tasks:
        raise ValueError("outer step needs at least one task")
    batches = [sampler(t, cfg.m, rng) for t in tasks]
    info = meta_gradient(P, tasks, batches, objective, cfg)
    if cfg.optimizer == "sgd":
        return P - cfg.outer_lr * info.grad, info
    if opt is None:
        opt = ad.AdamWState(lr=cfg.outer_lr, weight_decay=cfg.weight_decay)
    (new,) = ad.adamw_step([P], [info.grad], opt)
    return new, info


# ---------------------------------------------------------------- meta_train

@dataclass
class MetaState:
    P: np.ndarray
    step: int = 0
    best_acc: float = -1.0
    best_P: np.ndarray | None = None
    best_step: int = 0
    bad_evals: int = 0
    log: list[dict] = field(default_factory=list)


def task_validation_accuracy(P, wb: Workbench, tasks: Sequence[MetaTask]) -> float:
    return float(np.mean([accuracy(P, wb, t.valid) for t in tasks]))


def meta_train(tasks: Sequence[MetaTask], wb: Workbench, cfg: MamlConfig,
               P_init: SoftPrompt | None = None, sampler: Callable = sample_support_query,
               on_step: Callable | None = None) -> tuple[SoftPrompt, MetaState]:
    """Repeat outer steps, validate every ``eval_every`` steps, return the best prompt."""
    if not tasks:
        raise ValueError("meta_train needs at least one task")
    if not wb.backbone.frozen:
        raise ValueError("meta-training requires a frozen backbone")
    if P_init is None:
        P_init = init_prompt(wb.backbone.config, "random-normal", cfg.seed)
    objective = PromptObjective(wb)
    rng = np.random.default_rng(cfg.seed)
    opt = ad.AdamWState(lr=cfg.outer_lr, weight_decay=cfg.weight_decay)
    st = MetaState(P=P_init.P.copy())
    st.best_acc = task_validation_accuracy(st.P, wb, tasks)
    st.best_P = st.P.copy()
    st.log.append({"step": 0, "valid_acc": st.best_acc})
    while st.step < cfg.max_outer_steps:
        st.P, info = outer_step(st.P, tasks, objective, cfg, rng, opt, sampler)
        st.step += 1
        row = {"step": st.step, "task_losses": info.task_losses, "grad_norm": info.grad_norm}
        if info.replaced:
            row["query_with_replacement"] = info.replaced
        if on_step is not None:
            on_step(st.step, st.P, info)
        if st.step % cfg.eval_every == 0 or st.step == cfg.max_outer_steps:
            acc = task_validation_accuracy(st.P, wb, tasks)
            row["valid_acc"] = acc
            if acc > st.best_acc:
                st.best_acc, st.best_P, st.best_step, st.bad_evals = acc, st.P.copy(), st.step, 0
            else:
                st.bad_evals += 1
            log.info("meta step %d valid acc %.4f (best %.4f)", st.step, acc, st.best_acc)
        st.log.append(row)
        if st.bad_evals >= cfg.patience:
            break
    return SoftPrompt(st.best_P), st


# ------------------------------------------------------------------------ PPT

@dataclass
class PptConfig:
    lr: float = 0.003
    batch_size: int = 4
    max_epochs: int = 5
    warmup: int = 20
    eval_every: int = 20000
    patience: int = 5
    weight_decay: float = 0.01
    decay: bool = True
    valid_fraction: float = 0.1
    seed: int = 0


def _pool_batches(n: int, batch_size: int, epochs: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i:i + batch_size]


def ppt_train(pool: Dataset, wb: Workbench, cfg: PptConfig, P_init: SoftPrompt | None = None,
              valid: Dataset | None = None, batches: Iterable[Sequence[Example]] | None = None,
              max_steps: int | None = None, on_step: Callable | None = None
              ) -> tuple[SoftPrompt, MetaState]:
    """Plain prompt tuning on the pooled, unclustered data with step-based early stopping.

    ``valid`` defaults to a held-out ``valid_fraction`` of the pool; ``batches``
    overrides the shuffled batch order (used to align with meta_train).
    """
    if len(pool) == 0:
        raise ValueError("empty PPT pool")
    if any(y is None for y in pool.labels):
        raise ValueError("PPT pool must be labelled")
    rng = np.random.default_rng(cfg.seed)
    train = pool
    if valid is None:
        perm = rng.permutation(len(pool))
        n_val = max(1, int(round(cfg.valid_fraction * len(pool))))
        valid = pool.subset(sorted(perm[:n_val]), "ppt-valid")
        train = pool.subset(sorted(perm[n_val:]), "ppt-train")
    if P_init is None:
        P_init = init_prompt(wb.backbone.config, "random-normal", cfg.seed)
    if batches is None:
        total = cfg.max_epochs * math.ceil(len(train) / cfg.batch_size)
        batches = ([train.examples[i] for i in idx]
                   for idx in _pool_batches(len(train), cfg.batch_size, cfg.max_epochs, rng))
    else:
        batches = list(batches)
        total = len(batches)
    if max_steps is not None:
        total = min(total, max_steps)
    opt = ad.AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    objective = PromptObjective(wb)
    st = MetaState(P=P_init.P.copy())
    st.best_acc = accuracy(st.P, wb, valid)
    st.best_P = st.P.copy()
    st.log.append({"step": 0, "valid_acc": st.best_acc})
    for batch in batches:
        if st.step >= total:
            break
        t = Tensor(st.P, requires_grad=True)
        loss = objective(t, None, batch)
        (g,) = ad.grad(loss, [t])
        st.step += 1
        lr = ad.lr_schedule(st.step, min(cfg.warmup, total), total, cfg.lr, cfg.decay)
        (st.P,) = ad.adamw_step([st.P], [g.data], opt, lr=lr)
        row = {"step": st.step, "loss": loss.item(), "lr": lr}
        if on_step is not None:
            on_step(st.step, st.P, loss.item())
        # the last step is always validated, so a long eval interval cannot skip training
        if st.step % cfg.eval_every == 0 or st.step == total:
            acc = accuracy(st.P, wb, valid)
            row["valid_acc"] = acc
            if acc > st.best_acc:
                st.best_acc, st.best_P, st.best_step, st.bad_evals = acc, st.P.copy(), st.step, 0
            else:
                st.bad_evals += 1
        st.log.append(row)
        if st.bad_evals >= cfg.patience:
            break
    return SoftPrompt(st.best_P), st
