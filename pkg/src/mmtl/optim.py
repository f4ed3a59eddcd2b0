"""Gradient clipping, Adam, and finite-difference gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, backward


def global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
    return math.sqrt(total)


def clip_global_norm(grads, threshold: float):
    """Scale ``grads`` in place so their joint L2 norm is at most ``threshold``.

    Returns ``(grads, norm_before_clipping)``.
    """
    if threshold <= 0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    grads = list(grads)
    norm = global_norm(grads)
    if norm > threshold:
        factor = threshold / norm
        for g in grads:
            g *= factor
    return grads, norm


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # per-tensor update counts: partitions are updated at different rates
    steps: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState):
    """Apply one bias-corrected Adam update to every tensor named in ``grads``."""
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.steps[name] = 0
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"optimizer moments for {name} have shape {m.shape}, parameter {p.shape}")
        t = state.steps[name] + 1
        state.steps[name] = t
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return params


def _named(params):
    if isinstance(params, Mapping):
        return dict(params)
    return {p.name or f"p{i}": p for i, p in enumerate(params)}


def grad_check_report(
    loss_fn: Callable[[], Tensor],
    params,
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Per-tensor max relative error between backprop and central differences.

    ``loss_fn`` must be deterministic (no dropout). With ``max_coords`` set, at
    most that many coordinates per tensor are sampled with ``rng``.
    """
    named = _named(params)
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape, params=list(named.values()))
    analytic = {k: p.grad.copy() for k, p in named.items()}

    report = {}
    for name, p in named.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().item())
            flat[i] = orig - eps
            down = float(loss_fn().item())
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        report[name] = worst
    return report


def grad_check(loss_fn, params, eps: float = 1e-5, max_coords=None, rng=None) -> float:
    report = grad_check_report(loss_fn, params, eps=eps, max_coords=max_coords, rng=rng)
    return max(report.values(), default=0.0)
