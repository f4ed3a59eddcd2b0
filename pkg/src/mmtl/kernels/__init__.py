"""Fused GRU-step and attention kernels.

The compiled extension is used when it has been built; otherwise the numpy
fallback is loaded. Set ``MMTL_KERNELS=python`` to force the fallback.
"""

import os

import numpy as np

from . import _fallback

BACKENDS = {"python": _fallback}
if os.environ.get("MMTL_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels

        BACKENDS["cython"] = _ckernels
    except ImportError:
        pass

BACKEND = "cython" if "cython" in BACKENDS else "python"
_impl = BACKENDS[BACKEND]


def use_backend(name):
    """Switch the active kernel implementation; returns the previous name."""
    global BACKEND, _impl
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}")
    prev = BACKEND
    BACKEND, _impl = name, BACKENDS[name]
    return prev


def _c(a):
    return np.ascontiguousarray(a)


def gru_forward(h_prev, x, mask, W, U, b, rmask):
    return _impl.gru_forward(_c(h_prev), _c(x), _c(mask), _c(W), _c(U), _c(b), _c(rmask))


def gru_backward(gh, h_prev, x, mask, W, U, rmask, cache):
    return _impl.gru_backward(_c(gh), _c(h_prev), _c(x), _c(mask), _c(W), _c(U), _c(rmask), cache)


def attention_forward(d, keys, Wa, va, hs, mask):
    return _impl.attention_forward(_c(d), _c(keys), _c(Wa), _c(va), _c(hs), _c(mask))


def attention_backward(gctx, d, Wa, va, hs, alpha, t):
    return _impl.attention_backward(_c(gctx), _c(d), _c(Wa), _c(va), _c(hs), _c(alpha), _c(t))
