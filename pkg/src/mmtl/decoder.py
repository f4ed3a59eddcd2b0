"""Attention decoder: teacher-forced loss, beam search and ensembles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BOS, EOS
from .encoder import EncoderStates, dropout_mask
from .params import ModelParameters


@dataclass
class DecoderState:
    d: T.Tensor  # [B, Hd]
    last_token: np.ndarray  # [B]


def init_state(enc: EncoderStates, params: ModelParameters) -> DecoderState:
    """``tanh(mean of unmasked encoder states · W_init)``, starting from BOS."""
    pooled = T.masked_mean(enc.h, enc.mask)
    d = T.tanh(T.matmul(pooled, params["dec.W_init"]))
    return DecoderState(d, np.full(enc.batch_size, BOS, dtype=np.int64))


def attention_keys(enc: EncoderStates, params: ModelParameters) -> T.Tensor:
    """Project every encoder state by ``U_a`` once per sentence: ``[B, N, A]``."""
    B, N, C = enc.h.shape
    flat = T.reshape(enc.h, (B * N, C))
    return T.reshape(T.matmul(flat, params["dec.att.U_a"]), (B, N, -1))


def attend(d_prev: T.Tensor, enc: EncoderStates, params: ModelParameters, keys: T.Tensor | None = None):
    """Context vector and attention weights for decoder state ``d_prev``."""
    if keys is None:
        keys = attention_keys(enc, params)
    return T.attention(d_prev, keys, params["dec.att.W_a"], params["dec.att.v_a"], enc.h, enc.mask)


def _step(d_prev, prev_emb, enc, keys, params, rmask=None):
    ctx, alpha = attend(d_prev, enc, params, keys)
    x = T.concat([prev_emb, ctx], axis=-1)
    d = T.gru_step(d_prev, x, params["dec.gru.W"], params["dec.gru.U"], params["dec.gru.b"], rmask=rmask)
    readout = T.tanh(
        T.add(
            T.add(T.matmul(prev_emb, params["dec.out.P_emb"]), T.matmul(d, params["dec.out.P_state"])),
            T.matmul(ctx, params["dec.out.P_ctx"]),
        )
    )
    return d, T.matmul(readout, params["dec.out.W_out"]), alpha


def decoder_step(state: DecoderState, prev_token_emb: T.Tensor, enc: EncoderStates, params: ModelParameters, keys=None):
    """Advance one target position; returns ``(next_state, distribution)``."""
    if keys is None:
        keys = attention_keys(enc, params)
    d, logits, _ = _step(state.d, prev_token_emb, enc, keys, params)
    probs = T.softmax_row(logits)
    return DecoderState(d, state.last_token), probs


def sequence_nll(tgt, tgt_mask, enc: EncoderStates, params: ModelParameters, dropout: float = 0.0, rng=None) -> T.Tensor:
    """Teacher-forced negative log-likelihood: summed over time, averaged over the batch."""
    tgt = np.asarray(tgt)
    tmask = np.asarray(tgt_mask, dtype=params.dtype)
    B, M = tgt.shape
    dims = params.dims
    emb_mask = rmask = None
    if dropout > 0:
        emb_mask = dropout_mask(rng, (B, dims.emb_dim), dropout, params.dtype)
        rmask = dropout_mask(rng, (B, dims.dec_hidden), dropout, params.dtype)
    keys = attention_keys(enc, params)
    state = init_state(enc, params)
    d = state.d
    prev = np.full(B, BOS, dtype=np.int64)
    table = params["dec.tgt_emb"]
    terms = []
    for j in range(M):
        emb = T.embedding(table, prev)
        if emb_mask is not None:
            emb = T.mul_const(emb, emb_mask)
        d, logits, _ = _step(d, emb, enc, keys, params, rmask)
        terms.append(T.nll_rows(logits, tgt[:, j], tmask[:, j] / B))
        prev = tgt[:, j]
    loss = terms[0]
    for t in terms[1:]:
        loss = T.add(loss, t)
    return loss


# ---------------------------------------------------------------- search


@dataclass
class Hypothesis:
    tokens: list  # BOS-prefixed
    logprob: float
    state: object = field(default=None, repr=False)

    @property
    def finished(self) -> bool:
        return len(self.tokens) > 1 and self.tokens[-1] == EOS

    @property
    def score(self) -> float:
        """Length-normalized log-probability (per generated token)."""
        return self.logprob / max(len(self.tokens) - 1, 1)

    @property
    def output(self) -> list:
        """Generated ids without BOS and the closing EOS."""
        out = self.tokens[1:]
        return out[:-1] if self.finished else out


class NMTScorer:
    """Step function for one model over one source sentence.

    States are ``[K, Hd]`` arrays, one row per live hypothesis.
    """

    def __init__(self, enc: EncoderStates, params: ModelParameters):
        if enc.batch_size != 1:
            raise ValueError("beam search decodes one sentence at a time")
        self.params = params
        self.enc = enc
        self.keys = attention_keys(enc, params)
        self.vocab_size = params.dims.tgt_vocab

    def start(self):
        return init_state(self.enc, self.params).d.data

    def step(self, state, tokens):
        K = state.shape[0]
        enc = EncoderStates(T.Tensor(np.repeat(self.enc.h.data, K, axis=0)), np.repeat(self.enc.mask, K, axis=0))
        keys = T.Tensor(np.repeat(self.keys.data, K, axis=0))
        emb = T.embedding(self.params["dec.tgt_emb"], np.asarray(tokens))
        d, logits, _ = _step(T.Tensor(state), emb, enc, keys, self.params)
        logp = T.log_softmax_rows(logits).data.astype(np.float64)
        return logp, d.data

    @staticmethod
    def select(state, rows):
        return state[np.asarray(rows, dtype=np.int64)]


class EnsembleScorer:
    """Averages the per-step distributions of several scorers."""

    def __init__(self, scorers):
        sizes = {s.vocab_size for s in scorers}
        if len(sizes) != 1:
            raise T.ContractError(f"ensemble members disagree on target vocabulary size: {sorted(sizes)}")
        self.scorers = list(scorers)
        self.vocab_size = sizes.pop()

    def start(self):
        return [s.start() for s in self.scorers]

    def step(self, states, tokens):
        probs = None
        new_states = []
        for s, st in zip(self.scorers, states):
            logp, ns = s.step(st, tokens)
            p = np.exp(logp)
            probs = p if probs is None else probs + p
            new_states.append(ns)
        with np.errstate(divide="ignore"):
            return np.log(probs / len(self.scorers)), new_states

    def select(self, states, rows):
        return [s.select(st, rows) for s, st in zip(self.scorers, states)]


def beam_search_core(scorer, beam_size: int, max_len: int) -> Hypothesis:
    """Beam search over a scorer exposing ``start``/``step``/``select``.

    Finished hypotheses leave the beam and shrink it. The result is the best
    finished hypothesis by length-normalized score, or the best live one if
    nothing finished within ``max_len`` tokens.
    """
    if beam_size < 1 or max_len < 1:
        raise ValueError("beam_size and max_len must be >= 1")
    live = [Hypothesis([BOS], 0.0)]
    state = scorer.start()
    finished = []
    for _ in range(max_len):
        k = beam_size - len(finished)
        if k <= 0 or not live:
            break
        logp, new_state = scorer.step(state, [h.tokens[-1] for h in live])
        V = logp.shape[1]
        cand = (np.array([h.logprob for h in live])[:, None] + logp).ravel()
        order = np.argsort(-cand, kind="stable")[:k]
        order = order[np.isfinite(cand[order])]  # zero-probability continuations
        if not order.size:
            break
        next_live, rows = [], []
        for idx in order:
            row, tok = divmod(int(idx), V)
            hyp = Hypothesis(live[row].tokens + [tok], float(cand[idx]))
            if tok == EOS:
                finished.append(hyp)
            else:
                next_live.append(hyp)
                rows.append(row)
        live = next_live
        state = scorer.select(new_state, rows) if rows else None
    pool = finished or live
    best = pool[0]
    for h in pool[1:]:
        if h.score > best.score:
            best = h
    return best


def greedy_core(scorer, max_len: int) -> Hypothesis:
    state = scorer.start()
    hyp = Hypothesis([BOS], 0.0)
    for _ in range(max_len):
        logp, state = scorer.step(state, [hyp.tokens[-1]])
        tok = int(np.argmax(logp[0]))
        hyp = Hypothesis(hyp.tokens + [tok], hyp.logprob + float(logp[0, tok]))
        if tok == EOS:
            break
    return hyp


def beam_search(enc: EncoderStates, params: ModelParameters, beam_size: int, max_len: int) -> Hypothesis:
    return beam_search_core(NMTScorer(enc, params), beam_size, max_len)


def greedy_decode(enc: EncoderStates, params: ModelParameters, max_len: int) -> Hypothesis:
    return greedy_core(NMTScorer(enc, params), max_len)


def ensemble_decode(enc_list, params_list, beam_size: int, max_len: int) -> Hypothesis:
    scorer = EnsembleScorer([NMTScorer(e, p) for e, p in zip(enc_list, params_list)])
    return beam_search_core(scorer, beam_size, max_len)
