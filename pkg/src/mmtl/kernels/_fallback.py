"""Pure-numpy reference versions of the fused recurrent kernels.

Both kernels work on row-major batches: ``x`` is ``[B, E]``, hidden states
are ``[B, H]``, gate weights are stacked as ``[z | r | candidate]`` along the
last axis, so ``W`` is ``[E, 3H]`` and ``U`` is ``[H, 3H]``.
"""

import numpy as np


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def gru_forward(h_prev, x, mask, W, U, b, rmask):
    """One masked GRU step.

    Rows with ``mask == 0`` copy ``h_prev`` through unchanged. ``rmask`` is a
    ``[B, H]`` recurrent dropout mask applied to the state seen by the gates.
    Returns ``(h, cache)`` where cache feeds :func:`gru_backward`.
    """
    H = h_prev.shape[1]
    hd = h_prev * rmask
    a = x @ W + b
    zr = _sigmoid(a[:, : 2 * H] + hd @ U[:, : 2 * H])
    z = zr[:, :H]
    r = zr[:, H:]
    q = r * hd
    hc = np.tanh(a[:, 2 * H :] + q @ U[:, 2 * H :])
    hn = (1.0 - z) * h_prev + z * hc
    m = mask[:, None]
    h = m * hn + (1.0 - m) * h_prev
    return h, (z, r, hc, hd, q)


def gru_backward(gh, h_prev, x, mask, W, U, rmask, cache):
    """Gradients of :func:`gru_forward` w.r.t. ``(h_prev, x, W, U, b)``."""
    z, r, hc, hd, q = cache
    H = h_prev.shape[1]
    m = mask[:, None]
    ghn = m * gh
    gh_prev = (1.0 - m) * gh + ghn * (1.0 - z)
    gz = ghn * (hc - h_prev)
    ga_h = ghn * z * (1.0 - hc * hc)
    gq = ga_h @ U[:, 2 * H :].T
    gr = gq * hd
    ghd = gq * r
    ga = np.empty((gh.shape[0], 3 * H), dtype=gh.dtype)
    ga[:, :H] = gz * z * (1.0 - z)
    ga[:, H : 2 * H] = gr * r * (1.0 - r)
    ga[:, 2 * H :] = ga_h
    ghd += ga[:, : 2 * H] @ U[:, : 2 * H].T
    gh_prev += ghd * rmask
    gU = np.empty_like(U)
    gU[:, : 2 * H] = hd.T @ ga[:, : 2 * H]
    gU[:, 2 * H :] = q.T @ ga_h
    gW = x.T @ ga
    gb = ga.sum(axis=0)
    gx = ga @ W.T
    return gh_prev, gx, gW, gU, gb


def attention_forward(d, keys, Wa, va, hs, mask):
    """Additive attention over encoder states.

    ``keys`` holds the precomputed ``hs @ Ua`` with shape ``[B, N, A]``.
    Masked positions get weight exactly zero. Every row of ``mask`` must have
    at least one nonzero entry (checked by the caller).
    Returns ``(context [B, C], alpha [B, N], t)``; ``t`` is the tanh layer.
    """
    pre = d @ Wa
    t = np.tanh(keys + pre[:, None, :])
    e = t @ va
    valid = mask > 0
    e = np.where(valid, e, -np.inf)
    e = e - e.max(axis=1, keepdims=True)
    p = np.where(valid, np.exp(e), 0.0).astype(d.dtype)
    alpha = p / p.sum(axis=1, keepdims=True)
    ctx = np.einsum("bn,bnc->bc", alpha, hs)
    return ctx, alpha, t


def attention_backward(gctx, d, Wa, va, hs, alpha, t):
    """Gradients of :func:`attention_forward` w.r.t. ``(d, keys, Wa, va, hs)``."""
    galpha = np.einsum("bc,bnc->bn", gctx, hs)
    ghs = alpha[:, :, None] * gctx[:, None, :]
    ge = alpha * (galpha - (alpha * galpha).sum(axis=1, keepdims=True))
    gva = np.einsum("bn,bna->a", ge, t)
    gkeys = ge[:, :, None] * va * (1.0 - t * t)
    gpre = gkeys.sum(axis=1)
    gWa = d.T @ gpre
    gd = gpre @ Wa.T
    return gd, gkeys, gWa, gva, ghs
