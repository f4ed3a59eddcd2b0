import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmtl import tensor as T
from mmtl.checkpoint import Checkpoint
from mmtl.data import Vocabulary
from mmtl.evaluation import bleu, translate_corpus

from conftest import tiny_params


def S(text):
    return text.split()


def test_identity_is_100():
    r = bleu([S("the cat sat on the mat"), S("a b")], [S("the cat sat on the mat"), S("a b")])
    assert r.bleu == 100.0 and r.brevity_penalty == 1.0


def test_clipped_unigram_precision():
    r = bleu([S("the the the the")], [S("the cat sat down")])
    assert abs(r.precisions[0] - 0.25) < 1e-9
    assert r.bleu == 0.0  # no bigram match, smoothing off


def test_brevity_penalty_half_length():
    r = bleu([S("a b c d")], [S("a b c d e f g h")])
    assert r.precisions == [1.0, 1.0, 1.0, 1.0]
    assert abs(r.brevity_penalty - math.exp(-1)) < 1e-9
    assert abs(r.bleu - 100 * math.exp(-1)) < 1e-9


def test_smoothing_hand_case():
    hyp, ref = [S("a b c")], [S("a b d")]
    assert bleu(hyp, ref).bleu == 0.0
    r = bleu(hyp, ref, smooth=True)
    # p1 = 2/3, p2 = (1+1)/(2+1), p3 = (0+1)/(1+1), p4 = (0+1)/(0+1)
    expected = [2 / 3, 2 / 3, 1 / 2, 1.0]
    assert max(abs(a - b) for a, b in zip(r.precisions, expected)) < 1e-12
    assert abs(r.bleu - 100 * (2 / 9) ** 0.25) < 1e-9


def test_corpus_level_aggregation():
    r = bleu([S("a a"), S("b")], [S("a c"), S("b")])
    assert r.precisions[0] == pytest.approx(2 / 3, abs=1e-12)
    assert r.hyp_len == 3 and r.ref_len == 3


def test_count_mismatch():
    with pytest.raises(ValueError):
        bleu([S("a")], [])


def test_empty_hypotheses_score_zero():
    assert bleu([[]], [S("a b")]).bleu == 0.0


def test_report_formats():
    r = bleu([S("a b c d")], [S("a b c d")])
    assert r.to_tsv().split("\t")[0] == "100.0000"
    assert str(r).startswith("BLEU = 100.00")


words = st.lists(st.sampled_from("abcdef"), min_size=1, max_size=8)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(words, words), min_size=1, max_size=6), st.randoms())
def test_permutation_invariance(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    a = bleu([h for h, _ in pairs], [r for _, r in pairs], smooth=True)
    b = bleu([h for h, _ in shuffled], [r for _, r in shuffled], smooth=True)
    assert a.bleu == pytest.approx(b.bleu, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(words, min_size=1, max_size=5))
def test_self_bleu_is_100(hyps):
    assert bleu(hyps, hyps).bleu == pytest.approx(100.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(words, min_size=1, max_size=5), words)
def test_adding_exact_pair_keeps_perfect_precision(hyps, extra):
    refs = [h + ["z"] for h in hyps]  # precisions all 1, BP < 1
    before = bleu(hyps, refs)
    after = bleu(hyps + [extra], refs + [extra])
    assert after.bleu >= before.bleu - 1e-9


# ---------------------------------------------------------------- corpus translation


def _ckpt(params, src=None, tgt=None):
    src = src or Vocabulary(f"s{i}" for i in range(params.dims.src_vocab - 4))
    tgt = tgt or Vocabulary(f"t{i}" for i in range(params.dims.tgt_vocab - 4))
    return Checkpoint(params, src, tgt)


def test_empty_input_gives_empty_output(tmp_path):
    (tmp_path / "in.txt").write_text("")
    out = translate_corpus([_ckpt(tiny_params())], tmp_path / "in.txt", tmp_path / "out.txt")
    assert out == [] and (tmp_path / "out.txt").read_text() == ""


def test_single_vs_ensemble_of_one_and_blank_lines(tmp_path):
    p = tiny_params(perturb=0.8)
    (tmp_path / "in.txt").write_text("s1 s2 s3\n\ns4 s0 S9\n")
    a = translate_corpus([_ckpt(p)], tmp_path / "in.txt", beam=3)
    b = translate_corpus([_ckpt(p), _ckpt(p.copy())], tmp_path / "in.txt", beam=3)
    assert len(a) == 3 and a[1] == ""
    assert a == b


def test_vocabulary_mismatch_rejected(tmp_path):
    p = tiny_params()
    (tmp_path / "in.txt").write_text("s1\n")
    other = Vocabulary(f"x{i}" for i in range(16))
    with pytest.raises(T.ContractError):
        translate_corpus([_ckpt(p), _ckpt(p, src=other)], tmp_path / "in.txt")
