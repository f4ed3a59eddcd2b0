"""Task losses over batches and sentence-level translation helpers."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import Batch
from .decoder import EnsembleScorer, NMTScorer, beam_search_core, greedy_core, sequence_nll
from .encoder import encode
from .imaginet import DEFAULT_MARGIN, margin_loss, predict_image_vector
from .params import ModelParameters


def translation_loss(params: ModelParameters, batch: Batch, dropout=0.0, rng=None) -> T.Tensor:
    enc = encode(batch.src, batch.src_mask, params, dropout, rng)
    return sequence_nll(batch.tgt, batch.tgt_mask, enc, params, dropout, rng)


def grounding_loss(params: ModelParameters, batch: Batch, alpha=DEFAULT_MARGIN, dropout=0.0, rng=None) -> T.Tensor:
    enc = encode(batch.src, batch.src_mask, params, dropout, rng)
    return margin_loss(predict_image_vector(enc, params), batch.images, alpha)


def joint_loss(params: ModelParameters, batch: Batch, alpha=DEFAULT_MARGIN, w=None) -> T.Tensor:
    """Both task losses on one batch through a single encoder pass.

    With ``w`` given the terms are mixed as ``w·J_T + (1−w)·J_G``, and a zero
    weight drops that head from the graph entirely.
    """
    enc = encode(batch.src, batch.src_mask, params)
    terms = []
    if w is None or w > 0:
        jt = sequence_nll(batch.tgt, batch.tgt_mask, enc, params)
        terms.append(jt if w is None else T.scale(jt, w))
    if w is None or w < 1:
        jg = margin_loss(predict_image_vector(enc, params), batch.images, alpha)
        terms.append(jg if w is None else T.scale(jg, 1.0 - w))
    return terms[0] if len(terms) == 1 else T.add(*terms)


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 10


def translate_ids(params_list, src_ids, beam: int = 12, max_len: int | None = None, greedy: bool = False) -> list[int]:
    """Decode one id sequence with one model or an averaged ensemble."""
    if isinstance(params_list, ModelParameters):
        params_list = [params_list]
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    mask = np.ones(src.shape)
    scorers = [NMTScorer(encode(src, mask, p), p) for p in params_list]
    scorer = scorers[0] if len(scorers) == 1 else EnsembleScorer(scorers)
    max_len = max_len or default_max_len(src.shape[1])
    hyp = greedy_core(scorer, max_len) if greedy else beam_search_core(scorer, beam, max_len)
    return hyp.output
