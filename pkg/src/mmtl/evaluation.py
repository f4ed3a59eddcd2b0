"""Corpus BLEU and corpus translation."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .data import EmptyLineError, normalize_tokenize, read_lines
from .model import translate_ids

MAX_ORDER = 4


@dataclass
class BleuReport:
    bleu: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_tsv(self) -> str:
        p = "\t".join(f"{x:.6f}" for x in self.precisions)
        return f"{self.bleu:.4f}\t{p}\t{self.brevity_penalty:.6f}\t{self.hyp_len}\t{self.ref_len}"

    def __str__(self):
        p = "/".join(f"{100 * x:.1f}" for x in self.precisions)
        return (
            f"BLEU = {self.bleu:.2f}, {p} "
            f"(BP={self.brevity_penalty:.3f}, hyp_len={self.hyp_len}, ref_len={self.ref_len})"
        )


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], smooth: bool = False) -> BleuReport:
    """Single-reference corpus BLEU-4 with clipped counts and brevity penalty.

    ``smooth`` adds one to matched and total counts for orders 2-4. An order
    for which the hypotheses contain no n-grams at all counts as precision 1;
    any other zero precision gives BLEU 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    matched = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matched[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)

    precisions = []
    for n in range(MAX_ORDER):
        m, t = matched[n], total[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        precisions.append(m / t if t > 0 else 1.0)

    if hyp_len == 0:
        bp = 0.0
    elif hyp_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)

    if bp == 0.0 or min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def translate_corpus(checkpoints, source_path, output_path=None, beam: int = 12, max_len: int | None = None) -> list[str]:
    """Translate every line of ``source_path``; several checkpoints form an ensemble.

    Empty source lines yield empty output lines so the files stay aligned.
    """
    from .checkpoint import check_compatible

    checkpoints = list(checkpoints)
    check_compatible(checkpoints)
    src_vocab, tgt_vocab = checkpoints[0].src_vocab, checkpoints[0].tgt_vocab
    params = [c.params for c in checkpoints]
    out = []
    for line in read_lines(source_path):
        try:
            tokens = normalize_tokenize(line)
        except EmptyLineError:
            out.append("")
            continue
        ids = translate_ids(params, src_vocab.encode(tokens), beam=beam, max_len=max_len)
        out.append(" ".join(tgt_vocab.decode(ids)))
    if output_path is not None:
        Path(output_path).write_text("".join(s + "\n" for s in out), encoding="utf-8")
    return out
