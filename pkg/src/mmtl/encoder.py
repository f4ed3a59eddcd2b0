"""Shared bidirectional GRU encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ModelParameters


@dataclass
class EncoderStates:
    h: T.Tensor  # [B, N, 2H], forward half first
    mask: np.ndarray  # [B, N]

    @property
    def batch_size(self):
        return self.h.shape[0]


def gru_cell(h_prev: T.Tensor, x: T.Tensor, W: T.Tensor, U: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Unmasked GRU step on single vectors or row batches."""
    if h_prev.data.ndim == 1:
        h = T.gru_step(T.reshape(h_prev, (1, -1)), T.reshape(x, (1, -1)), W, U, b)
        return T.reshape(h, (h_prev.shape[0],))
    return T.gru_step(h_prev, x, W, U, b)


def dropout_mask(rng: np.random.Generator, shape, rate: float, dtype) -> np.ndarray:
    """Inverted dropout mask: kept units are scaled by ``1 / (1 - rate)``."""
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def _run_direction(embs, mask, params, side, rmask, reverse):
    W, U, b = params[f"enc.{side}.W"], params[f"enc.{side}.U"], params[f"enc.{side}.b"]
    h = T.tile_rows(params[f"enc.{side}.h0"], mask.shape[0])
    order = range(len(embs) - 1, -1, -1) if reverse else range(len(embs))
    outs = [None] * len(embs)
    for i in order:
        h = T.gru_step(h, embs[i], W, U, b, mask=mask[:, i], rmask=rmask)
        outs[i] = h
    return outs


def encode(src, src_mask, params: ModelParameters, dropout: float = 0.0, rng=None) -> EncoderStates:
    """Run both GRU directions over padded ``src`` ids ``[B, N]``.

    At masked positions the recurrent state is carried through unchanged, so
    trailing padding never alters the states of real tokens. With
    ``dropout > 0`` one embedding mask per sequence and one recurrent mask per
    direction are drawn from ``rng`` and reused at every time step.
    """
    src = np.asarray(src)
    mask = np.asarray(src_mask, dtype=params.dtype)
    B, N = src.shape
    dims = params.dims
    emb_mask = rmask_f = rmask_b = None
    if dropout > 0:
        emb_mask = dropout_mask(rng, (B, dims.emb_dim), dropout, params.dtype)
        rmask_f = dropout_mask(rng, (B, dims.enc_hidden), dropout, params.dtype)
        rmask_b = dropout_mask(rng, (B, dims.enc_hidden), dropout, params.dtype)
    table = params["enc.src_emb"]
    embs = []
    for i in range(N):
        e = T.embedding(table, src[:, i])
        if emb_mask is not None:
            e = T.mul_const(e, emb_mask)
        embs.append(e)
    fwd = _run_direction(embs, mask, params, "fwd", rmask_f, reverse=False)
    bwd = _run_direction(embs, mask, params, "bwd", rmask_b, reverse=True)
    h = T.concat([T.stack(fwd, axis=1), T.stack(bwd, axis=1)], axis=-1)
    return EncoderStates(h, mask)
