"""Training primitives: occupancy cross-entropy, LR schedule, clipping, AdamW."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Var

_EPS = 1e-7


def bce_occupancy(probs, labels):
    """Mean binary cross-entropy in nats, probabilities clamped to [1e-7, 1-1e-7].

    Accepts a Var (differentiable) or a plain array; returns the same kind.
    """
    is_var = isinstance(probs, Var)
    p = ad.clamp(probs if is_var else Var(np.asarray(probs, float)), _EPS, 1.0 - _EPS)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != p.data.shape:
        raise ValueError(f"labels shape {y.shape} != predictions shape {p.data.shape}")
    term = ad.mul(ad.log(p), y) + ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - y)
    loss = -ad.vmean(term)
    return loss if is_var else float(loss.data)


def cosine_lr(step: int, total_steps: int, lr_start: float = 8e-4,
              lr_end: float = 2e-5) -> float:
    """Cosine decay from lr_start to lr_end; steps past the horizon hold lr_end."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    t = min(max(step, 0), total_steps)
    return lr_end + (lr_start - lr_end) * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float):
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds it.

    Returns (gradients, pre-clip norm).
    """
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(np.square(g)))
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: list[Param], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 1e-4) -> None:
    """One AdamW update in place: decoupled weight decay first, then Adam."""
    for p in params:
        g = grads[p.name]
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for parameter {p.name!r}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p in params:
        g = grads[p.name]
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m = state.m[p.name]
        v = state.v[p.name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
