"""Command-line entry point: ``mmtl {train,translate,rank,score,gradcheck}``.

Runs are driven by a flat JSON config; every config key can be overridden by
the flag of the same name (``batch_size`` -> ``--batch-size``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import types
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    CorpusError,
    EmptyLineError,
    ImageFormatError,
    TrainingExample,
    Vocabulary,
    build_vocab,
    filter_oov,
    load_image_vectors,
    normalize_tokenize,
    pad_batch,
    read_lines,
)
from .evaluation import bleu, translate_corpus
from .imaginet import rank_images
from .model import joint_loss
from .optim import grad_check_report
from .params import GROUNDING, SHARED, TRANSLATION, ModelDims, init_parameters
from .trainer import ConfigError, Trainer, TrainingConfig, format_log

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_CHECK_FAILED = 0, 1, 2, 3
RUN_ROOT_ENV = "MMTL_RUN_ROOT"

log = logging.getLogger("mmtl")


@dataclass
class RunConfig(TrainingConfig):
    train_src: str | None = None
    train_tgt: str | None = None
    train_images: str | None = None
    image_src: str | None = None
    image_vectors: str | None = None
    val_src: str | None = None
    val_tgt: str | None = None
    src_vocab_file: str | None = None
    tgt_vocab_file: str | None = None
    min_freq: int = 1
    max_vocab: int | None = None
    oov_threshold: float = 0.10
    run_dir: str | None = None
    # gradcheck model size
    vocab_size: int = 20
    image_dim: int = 12


def _field_type(f):
    tp = typing.get_type_hints(RunConfig)[f.name]
    if isinstance(tp, types.UnionType) or typing.get_origin(tp) is typing.Union:
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    return tp


def _parse_bool(s):
    if s.lower() in ("1", "true", "yes"):
        return True
    if s.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def add_config_flags(parser):
    parser.add_argument("--config", help="JSON config file")
    for f in fields(RunConfig):
        tp = _field_type(f)
        conv = _parse_bool if tp is bool else tp
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", type=conv, default=None, metavar=tp.__name__.upper())


def resolve_config(args, defaults=None) -> RunConfig:
    values = dict(defaults or {})
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}:{exc.lineno}: {exc.msg}") from None
        names = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(loaded) - names)
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {unknown}")
        values.update(loaded)
    for f in fields(RunConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            values[f.name] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- data loading


def _require(path, what):
    if not path:
        raise ConfigError(f"{what} is required")
    if not Path(path).is_file():
        raise ConfigError(f"{what}: file {path} does not exist")


def _tokenize_all(lines, path):
    out = []
    for i, line in enumerate(lines):
        try:
            out.append(normalize_tokenize(line))
        except EmptyLineError:
            raise ConfigError(f"{path}:{i + 1}: empty line") from None
    return out


def _vectors(path, n_lines, sent_path):
    try:
        return load_image_vectors(path, expected_rows=n_lines)
    except ImageFormatError as exc:
        raise ConfigError(f"{exc} (sentences: {sent_path})") from None


@dataclass
class Corpora:
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    text: list
    images: list
    val: list
    image_dim: int | None


def load_corpora(cfg: RunConfig) -> Corpora:
    """Validate every referenced file and build the example lists.

    All consistency checks (existence, line counts, vector dimensions) happen
    here, before any parameter is created.
    """
    parallel, triples_img, described, val = None, None, None, None
    if cfg.w > 0 or cfg.train_src:
        _require(cfg.train_src, "train_src")
        _require(cfg.train_tgt, "train_tgt")
        src_lines, tgt_lines = read_lines(cfg.train_src), read_lines(cfg.train_tgt)
        if len(src_lines) != len(tgt_lines):
            raise ConfigError(f"{cfg.train_src} has {len(src_lines)} lines but {cfg.train_tgt} has {len(tgt_lines)}")
        parallel = (_tokenize_all(src_lines, cfg.train_src), _tokenize_all(tgt_lines, cfg.train_tgt))
        if cfg.train_images:
            _require(cfg.train_images, "train_images")
            triples_img = _vectors(cfg.train_images, len(src_lines), cfg.train_src)
    if cfg.image_src or cfg.image_vectors:
        _require(cfg.image_src, "image_src")
        _require(cfg.image_vectors, "image_vectors")
        lines = read_lines(cfg.image_src)
        described = (_tokenize_all(lines, cfg.image_src), _vectors(cfg.image_vectors, len(lines), cfg.image_src))
    if cfg.w < 1 and triples_img is None and described is None:
        raise ConfigError("w < 1 needs image vectors: set train_images or image_src + image_vectors")
    dims = {m.shape[1] for m in (triples_img, described[1] if described else None) if m is not None}
    if len(dims) > 1:
        raise ConfigError(f"image vector files disagree on dimension: {sorted(dims)}")
    if bool(cfg.val_src) != bool(cfg.val_tgt):
        raise ConfigError("val_src and val_tgt must be given together")
    if cfg.val_src:
        _require(cfg.val_src, "val_src")
        _require(cfg.val_tgt, "val_tgt")
        vs, vt = read_lines(cfg.val_src), read_lines(cfg.val_tgt)
        if len(vs) != len(vt):
            raise ConfigError(f"{cfg.val_src} has {len(vs)} lines but {cfg.val_tgt} has {len(vt)}")
        val = (_tokenize_all(vs, cfg.val_src), _tokenize_all(vt, cfg.val_tgt))

    if cfg.src_vocab_file:
        _require(cfg.src_vocab_file, "src_vocab_file")
        src_vocab = Vocabulary.load(cfg.src_vocab_file)
    else:
        corpus = (parallel[0] if parallel else []) + ([] if described is None or parallel else described[0])
        src_vocab = build_vocab(corpus, cfg.min_freq, cfg.max_vocab)
    if cfg.tgt_vocab_file:
        _require(cfg.tgt_vocab_file, "tgt_vocab_file")
        tgt_vocab = Vocabulary.load(cfg.tgt_vocab_file)
    else:
        tgt_vocab = build_vocab(parallel[1], cfg.min_freq, cfg.max_vocab) if parallel else Vocabulary()

    text, images = [], []
    if parallel:
        for i, (s, t) in enumerate(zip(*parallel)):
            img = None if triples_img is None else triples_img[i]
            ex = TrainingExample(src_vocab.encode(s), tgt_vocab.encode(t, add_eos=True), img)
            text.append(ex)
            if img is not None:
                images.append(ex)
    if described:
        for s, v in zip(*described):
            ids = src_vocab.encode(s)
            # external described images are filtered on source-side OOV rate
            if filter_oov(ids, cfg.oov_threshold):
                images.append(TrainingExample(ids, image=v))
    val_ex = []
    if val:
        val_ex = [TrainingExample(src_vocab.encode(s), tgt_vocab.encode(t, add_eos=True)) for s, t in zip(*val)]
    return Corpora(src_vocab, tgt_vocab, text, images, val_ex, dims.pop() if dims else None)


# ---------------------------------------------------------------- commands


def _run_dir(cfg: RunConfig) -> Path:
    if cfg.run_dir:
        return Path(cfg.run_dir)
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg.seed}"


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    corpora = load_corpora(cfg)
    trainer = Trainer(cfg, corpora.src_vocab, corpora.tgt_vocab, corpora.text, corpora.images, corpora.val, corpora.image_dim)
    run_dir = _run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = asdict(cfg)
    resolved["run_dir"] = str(run_dir)
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    corpora.src_vocab.save(run_dir / "src.vocab")
    corpora.tgt_vocab.save(run_dir / "tgt.vocab")
    result = trainer.train()
    save_checkpoint(result.best, run_dir / "best.ckpt")
    save_checkpoint(result.last, run_dir / "last.ckpt")
    (run_dir / "train_log.tsv").write_text(format_log(result.log), encoding="utf-8")
    print(f"run directory: {run_dir}")
    print(f"epochs: {trainer.epoch}  steps: {trainer.step_count}  best BLEU: {result.best.best_score}")
    return EXIT_OK


def _load_ckpts(paths):
    out = []
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError(f"checkpoint {p} does not exist")
        out.append(load_checkpoint(p))
    return out


def cmd_translate(args) -> int:
    ckpts = _load_ckpts(args.checkpoints)
    if not Path(args.source).is_file():
        raise ConfigError(f"source file {args.source} does not exist")
    try:
        lines = translate_corpus(ckpts, args.source, args.output, beam=args.beam, max_len=args.max_len)
    except T.ContractError as exc:
        raise ConfigError(str(exc)) from None
    if args.output is None:
        sys.stdout.write("".join(s + "\n" for s in lines))
    return EXIT_OK


def cmd_rank(args) -> int:
    (ckpt,) = _load_ckpts([args.checkpoint])
    for p in (args.sentences, args.images):
        if not Path(p).is_file():
            raise ConfigError(f"file {p} does not exist")
    lines = read_lines(args.sentences)
    images = _vectors(args.images, len(lines), args.sentences)
    if images.shape[1] != ckpt.params.dims.image_dim:
        raise ConfigError(
            f"{args.images} has {images.shape[1]}-dimensional vectors but the model predicts {ckpt.params.dims.image_dim}"
        )
    sentences = [ckpt.src_vocab.encode(toks) for toks in _tokenize_all(lines, args.sentences)]
    result = rank_images(sentences, images, ckpt.params)
    tsv = result.to_tsv()
    if args.output:
        Path(args.output).write_text(tsv, encoding="utf-8")
    else:
        sys.stdout.write(tsv)
    print(f"median rank {result.median_rank:g}", file=sys.stderr)
    return EXIT_OK


def cmd_score(args) -> int:
    for p in (args.hypotheses, args.references):
        if not Path(p).is_file():
            raise ConfigError(f"file {p} does not exist")
    hyps, refs = read_lines(args.hypotheses), read_lines(args.references)
    if not hyps or not refs:
        raise ConfigError("hypothesis and reference files must be nonempty")
    if len(hyps) != len(refs):
        raise ConfigError(f"{args.hypotheses} has {len(hyps)} lines but {args.references} has {len(refs)}")
    report = bleu([h.lower().split() for h in hyps], [r.lower().split() for r in refs], smooth=args.smooth)
    print(report)
    print(report.to_tsv())
    return EXIT_OK


def gradcheck_setup(cfg: RunConfig, rng: np.random.Generator):
    """Tiny model at a random parameter point plus one fixed batch."""
    dims = ModelDims(
        cfg.vocab_size, cfg.vocab_size, cfg.emb_dim, cfg.enc_hidden, cfg.dec_hidden, cfg.attn_dim, cfg.readout_dim, cfg.image_dim
    )
    params = init_parameters(dims, rng, np.float64)
    # move off the zero biases / zero initial states of a fresh model
    for t in params.tensors.values():
        t.data += rng.normal(scale=0.3, size=t.shape)
    examples = []
    for n in (5, 3, 4):
        src = rng.integers(4, cfg.vocab_size, size=n)
        tgt = np.append(rng.integers(4, cfg.vocab_size, size=n - 1), 2)
        examples.append(TrainingExample(src, tgt, rng.normal(size=cfg.image_dim)))
    batch = pad_batch(examples)
    if cfg.w >= 1:
        parts = (SHARED, TRANSLATION)
    elif cfg.w <= 0:
        parts = (SHARED, GROUNDING)
    else:
        parts = (SHARED, TRANSLATION, GROUNDING)
    return params, batch, params.partition(*parts)


GRADCHECK_DEFAULTS = dict(emb_dim=8, enc_hidden=8, dec_hidden=8, attn_dim=8, readout_dim=8, dropout=0.0, dtype="float64")


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args, defaults=GRADCHECK_DEFAULTS)
    rng = np.random.default_rng(cfg.seed)
    params, batch, checked = gradcheck_setup(cfg, rng)
    w = None if 0 < cfg.w < 1 else cfg.w
    t0 = time.perf_counter()
    report = grad_check_report(
        lambda: joint_loss(params, batch, cfg.margin, w),
        checked,
        eps=args.eps,
        max_coords=args.max_coords,
        rng=rng,
    )
    worst = max(report.values())
    for name, err in report.items():
        print(f"{name}\t{err:.3e}")
    status = "PASS" if worst < args.threshold else "FAIL"
    print(f"max relative error {worst:.3e} over {len(report)} tensors ({time.perf_counter() - t0:.1f}s): {status}")
    return EXIT_OK if worst < args.threshold else EXIT_CHECK_FAILED


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmtl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a source file; several checkpoints form an ensemble")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--source", required=True)
    p.add_argument("--output")
    p.add_argument("--beam", type=int, default=12)
    p.add_argument("--max-len", type=int, default=None)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("rank", help="image-sentence ranking report")
    p.add_argument("checkpoint")
    p.add_argument("--sentences", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("score", help="corpus BLEU of a hypothesis file")
    p.add_argument("hypotheses")
    p.add_argument("references")
    p.add_argument("--smooth", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny joint model")
    add_config_flags(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=32, help="sampled coordinates per tensor (0 = all)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "max_coords", None) == 0:
        args.max_coords = None
    try:
        return args.func(args)
    except (ConfigError, CorpusError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
