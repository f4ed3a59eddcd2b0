"""Small synthetic corpora for smoke tests, gradient checks and overfit runs."""

from __future__ import annotations

import numpy as np

from .data import EOS, SPECIALS, TrainingExample, Vocabulary


def word_vocab(n_words: int, prefix: str = "w") -> Vocabulary:
    return Vocabulary(f"{prefix}{i}" for i in range(n_words))


def reversal_pairs(n_pairs: int, vocab_size: int = 30, max_len: int = 8, min_len: int = 2, seed: int = 0):
    """Distinct random sentences paired with their reversals.

    ``vocab_size`` counts the four special ids. Returns ``(examples, vocab)``
    with one vocabulary shared by both sides.
    """
    vocab = word_vocab(vocab_size - len(SPECIALS))
    rng = np.random.default_rng(seed)
    seen, examples = set(), []
    while len(examples) < n_pairs:
        n = int(rng.integers(min_len, max_len + 1))
        src = tuple(int(i) for i in rng.integers(len(SPECIALS), vocab_size, size=n))
        if src in seen:
            continue
        seen.add(src)
        examples.append(TrainingExample(np.array(src), np.array(src[::-1] + (EOS,))))
    return examples, vocab


def random_unit_vectors(n: int, dim: int, rng) -> np.ndarray:
    v = rng.normal(size=(n, dim))
    return (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(np.float32)


def described_images(n: int, dim: int = 16, vocab_size: int = 30, max_len: int = 8, seed: int = 0):
    """Distinct random sentences, each with an independent random unit vector."""
    rng = np.random.default_rng(seed)
    vocab = word_vocab(vocab_size - len(SPECIALS))
    images = random_unit_vectors(n, dim, rng)
    seen, examples = set(), []
    while len(examples) < n:
        k = int(rng.integers(3, max_len + 1))
        src = tuple(int(i) for i in rng.integers(len(SPECIALS), vocab_size, size=k))
        if src in seen:
            continue
        seen.add(src)
        examples.append(TrainingExample(np.array(src), image=images[len(examples)]))
    return examples, vocab


def grounded_corpus(n: int, dim: int = 16, n_words: int = 24, max_len: int = 7, seed: int = 0):
    """Triples where the image is the normalized sum of per-word vectors.

    The target is a word-for-word relabelling of the source, reversed. The
    image therefore encodes which content words the source contains.
    Returns ``(examples, src_vocab, tgt_vocab)``.
    """
    rng = np.random.default_rng(seed)
    src_vocab = word_vocab(n_words, "s")
    tgt_vocab = word_vocab(n_words, "t")
    word_vecs = rng.normal(size=(n_words, dim))
    relabel = rng.permutation(n_words)
    out = []
    for _ in range(n):
        k = int(rng.integers(3, max_len + 1))
        words = rng.integers(0, n_words, size=k)
        v = word_vecs[words].sum(axis=0)
        v = (v / np.linalg.norm(v)).astype(np.float32)
        src = words + len(SPECIALS)
        tgt = np.append(relabel[words][::-1] + len(SPECIALS), EOS)
        out.append(TrainingExample(src, tgt, v))
    return out, src_vocab, tgt_vocab
