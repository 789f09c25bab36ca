"""AdamW and the warmup/linear learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamWState,
               lr: float | None = None) -> list[np.ndarray]:
    """Return updated copies of ``params``; ``state`` is advanced in place.

    Decoupled weight decay (Loshchilov & Hutter): the decay is applied to the
    parameter directly, not folded into the gradient moments.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"shape mismatch: param {np.shape(p)} vs grad {np.shape(g)}")
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    elif any(m.shape != np.shape(p) for m, p in zip(state.m, params)):
        raise ValueError("optimizer state does not match parameter shapes")

    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p = p * (1.0 - lr * state.weight_decay)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def lr_schedule(step: int, warmup: int, max_steps: int, base_lr: float,
                decay: bool = True) -> float:
    """Linear warmup from 0 to ``base_lr``, then linear decay to 0 at ``max_steps``.

    With ``decay=False`` the rate stays at ``base_lr`` after warmup.
    """
    if warmup < 0 or max_steps < 0 or warmup > max_steps:
        raise ValueError(f"invalid schedule bounds warmup={warmup} max_steps={max_steps}")
    if not 0 <= step <= max_steps:
        raise ValueError(f"step {step} outside [0, {max_steps}]")
    if step < warmup:
        return base_lr * step / warmup
    if not decay or max_steps == warmup:
        return base_lr
    return base_lr * (max_steps - step) / (max_steps - warmup)
