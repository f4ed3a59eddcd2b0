"""Tokenization, vocabularies, image-vector files and padded minibatches."""

from __future__ import annotations

import re
import struct
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

IMGV_MAGIC = b"IMGV"
_IMGV_HEADER = struct.Struct("<4sII")

# Bucketing sorts by length inside shuffled chunks of this many batches.
BUCKET_CHUNK_BATCHES = 20

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class EmptyLineError(ValueError):
    """A line produced no tokens; readers skip it with a warning."""


class CorpusError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


def normalize_tokenize(line: str) -> list[str]:
    """Lowercase and split into word runs and single punctuation marks.

    >>> normalize_tokenize("A girl eats.")
    ['a', 'girl', 'eats', '.']
    """
    tokens = _TOKEN_RE.findall(line.lower())
    if not tokens:
        raise EmptyLineError(f"no tokens in line {line!r}")
    return tokens


class Vocabulary:
    """Token/id bijection with ``<pad>=0, <s>=1, </s>=2, <unk>=3``."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = list(SPECIALS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def tokens(self) -> list[str]:
        """Non-special tokens in id order."""
        return self.itos[len(SPECIALS):]

    def encode(self, tokens: Sequence[str], add_eos: bool = False) -> np.ndarray:
        ids = [self.stoi.get(t, UNK) for t in tokens]
        if add_eos:
            ids.append(EOS)
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        """Map ids back to tokens; with ``strip`` stop at EOS and drop PAD/BOS."""
        out = []
        for i in ids:
            i = int(i)
            if strip:
                if i == EOS:
                    break
                if i in (PAD, BOS):
                    continue
            out.append(self.itos[i])
        return out

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path):
        text = Path(path).read_text(encoding="utf-8")
        return cls(line for line in text.split("\n") if line)


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 1, max_size: int | None = None) -> Vocabulary:
    """Most frequent tokens first, ties broken lexicographically."""
    counts = Counter()
    for sent in corpus:
        counts.update(sent)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIALS), key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocabulary(ranked)


def filter_oov(source_ids, threshold: float = 0.10) -> bool:
    """True (keep) unless the UNK fraction of ``source_ids`` exceeds ``threshold``."""
    ids = np.asarray(source_ids)
    if ids.size == 0:
        return False
    return np.count_nonzero(ids == UNK) / ids.size <= threshold


@dataclass
class TrainingExample:
    source: np.ndarray
    target: np.ndarray | None = None
    image: np.ndarray | None = None

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.int64)
        if self.source.size == 0:
            raise ValueError("empty source sequence")
        if self.target is None and self.image is None:
            raise ValueError("an example needs a target sentence, an image vector, or both")
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.int64)
            if self.target.size == 0 or self.target[-1] != EOS:
                raise ValueError("target sequences must end with EOS")
        if self.image is not None:
            self.image = np.asarray(self.image)


@dataclass
class Batch:
    src: np.ndarray
    src_mask: np.ndarray
    tgt: np.ndarray | None = None
    tgt_mask: np.ndarray | None = None
    images: np.ndarray | None = None
    index: np.ndarray | None = None

    @property
    def size(self):
        return self.src.shape[0]


def _pad(seqs):
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), n))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def pad_batch(examples: Sequence[TrainingExample], index=None, extra_pad: int = 0) -> Batch:
    """Assemble a padded batch; ``extra_pad`` appends that many PAD columns."""
    src, src_mask = _pad([e.source for e in examples])
    if extra_pad:
        src = np.pad(src, ((0, 0), (0, extra_pad)), constant_values=PAD)
        src_mask = np.pad(src_mask, ((0, 0), (0, extra_pad)))
    batch = Batch(src, src_mask, index=None if index is None else np.asarray(index))
    if all(e.target is not None for e in examples):
        batch.tgt, batch.tgt_mask = _pad([e.target for e in examples])
        if extra_pad:
            batch.tgt = np.pad(batch.tgt, ((0, 0), (0, extra_pad)), constant_values=PAD)
            batch.tgt_mask = np.pad(batch.tgt_mask, ((0, 0), (0, extra_pad)))
    if all(e.image is not None for e in examples):
        batch.images = np.stack([e.image for e in examples])
    return batch


def make_batches(examples: Sequence[TrainingExample], batch_size: int, seed) -> Iterator[Batch]:
    """One epoch of length-bucketed batches.

    ``seed`` is an int or a ``numpy.random.Generator``. Examples are shuffled,
    cut into chunks of ``20 * batch_size``, sorted by source length inside each
    chunk, then split into batches; the last batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    chunk = BUCKET_CHUNK_BATCHES * batch_size
    for start in range(0, len(order), chunk):
        part = order[start : start + chunk]
        lengths = np.array([len(examples[i].source) for i in part])
        part = part[np.argsort(lengths, kind="stable")]
        for b in range(0, len(part), batch_size):
            idx = part[b : b + batch_size]
            yield pad_batch([examples[i] for i in idx], index=idx)


class BatchStream:
    """Endless batch iterator that reshuffles every epoch.

    Each epoch's order depends only on ``(seed, stream_id, epoch)``, so the
    stream position ``(epoch, cursor)`` is all that is needed to resume.
    """

    def __init__(self, examples, batch_size, seed, stream_id, epoch=0, cursor=0):
        if not examples:
            raise ValueError(f"stream {stream_id} has no examples")
        self.examples = examples
        self.batch_size = batch_size
        self.seed = seed
        self.stream_id = stream_id
        self.epoch = epoch
        self.cursor = cursor
        self._batches = None

    def _epoch_batches(self):
        if self._batches is None:
            rng = np.random.default_rng([self.seed, self.stream_id, self.epoch])
            self._batches = list(make_batches(self.examples, self.batch_size, rng))
        return self._batches

    @property
    def batches_per_epoch(self):
        return -(-len(self.examples) // self.batch_size)

    def next(self) -> tuple[Batch, bool]:
        """Return ``(batch, finished_epoch)``."""
        batches = self._epoch_batches()
        batch = batches[self.cursor]
        self.cursor += 1
        done = self.cursor == len(batches)
        if done:
            self.epoch += 1
            self.cursor = 0
            self._batches = None
        return batch, done

    def state(self):
        return {"epoch": self.epoch, "cursor": self.cursor}


# ---------------------------------------------------------------- files


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").rstrip("\r") for line in fh]


def tokenize_lines(lines: Sequence[str], path="<input>") -> tuple[list[list[str]], list[int]]:
    """Tokenize lines, skipping empty ones with a warning; returns kept line numbers."""
    out, kept = [], []
    for i, line in enumerate(lines):
        try:
            out.append(normalize_tokenize(line))
        except EmptyLineError:
            warnings.warn(f"{path}:{i + 1}: empty line skipped", stacklevel=2)
            continue
        kept.append(i)
    return out, kept


def read_parallel(src_path, tgt_path):
    """Token lists for two aligned files; a pair is dropped if either side is empty."""
    src_lines, tgt_lines = read_lines(src_path), read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(f"{src_path} has {len(src_lines)} lines but {tgt_path} has {len(tgt_lines)}")
    pairs = []
    for i, (s, t) in enumerate(zip(src_lines, tgt_lines)):
        try:
            pairs.append((normalize_tokenize(s), normalize_tokenize(t)))
        except EmptyLineError:
            warnings.warn(f"{src_path}:{i + 1}: empty line in pair skipped", stacklevel=2)
    return pairs


def write_image_vectors(path, matrix):
    """Write the binary ``IMGV`` format: magic, u32 count, u32 dim, float32 rows."""
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(_IMGV_HEADER.pack(IMGV_MAGIC, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def _read_binary_vectors(path, raw):
    if len(raw) < _IMGV_HEADER.size:
        raise ImageFormatError(f"{path}: header truncated at byte {len(raw)}, need {_IMGV_HEADER.size}")
    _, count, dim = _IMGV_HEADER.unpack_from(raw)
    expected = count * dim * 4
    actual = len(raw) - _IMGV_HEADER.size
    if actual != expected:
        raise ImageFormatError(
            f"{path}: payload at offset {_IMGV_HEADER.size} should hold {expected} bytes "
            f"({count}x{dim} float32) but has {actual}"
        )
    mat = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=_IMGV_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(mat))
    if bad.size:
        raise ImageFormatError(f"{path}: non-finite value at byte offset {_IMGV_HEADER.size + 4 * bad[0]}")
    return mat.reshape(count, dim).astype(np.float32)


def _read_tsv_vectors(path, text):
    rows = []
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = [float(v) for v in line.split("\t")]
        except ValueError as exc:
            raise ImageFormatError(f"{path}:{ln}: {exc}") from None
        if rows and len(row) != len(rows[0]):
            raise ImageFormatError(f"{path}:{ln}: {len(row)} columns, expected {len(rows[0])}")
        if not all(np.isfinite(row)):
            raise ImageFormatError(f"{path}:{ln}: non-finite value")
        rows.append(row)
    if not rows:
        raise ImageFormatError(f"{path}: no vectors")
    return np.asarray(rows, dtype=np.float32)


def load_image_vectors(path, expected_rows: int | None = None, normalize: bool = True) -> np.ndarray:
    """Load a binary ``IMGV`` or TSV vector file as a ``[count, dim]`` matrix.

    Rows are L2-normalized unless ``normalize`` is False; a zero row is an
    error because cosine similarity is undefined for it.
    """
    raw = Path(path).read_bytes()
    if raw[:4] == IMGV_MAGIC:
        mat = _read_binary_vectors(path, raw)
    else:
        mat = _read_tsv_vectors(path, raw.decode("utf-8"))
    if expected_rows is not None and mat.shape[0] != expected_rows:
        raise ImageFormatError(f"{path}: {mat.shape[0]} vectors but the sentence file has {expected_rows} lines")
    if normalize:
        norms = np.linalg.norm(mat.astype(np.float64), axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise ImageFormatError(f"{path}: vector {zero[0]} has zero norm")
        mat = (mat / norms[:, None]).astype(np.float32)
    return mat


def read_described_images(sent_path, vec_path):
    """Sentences with their image vectors; returns ``(token_lists, matrix)``."""
    lines = read_lines(sent_path)
    mat = load_image_vectors(vec_path, expected_rows=len(lines))
    tokens, kept = tokenize_lines(lines, sent_path)
    return tokens, mat[kept]
