"""Multitask training by probabilistic task interleaving.

Each step draws ``u ~ U(0, 1)``. If ``u < w`` one translation batch updates
the shared encoder and the translation decoder; otherwise one image batch
updates the shared encoder and the image head. The two batch streams cycle
independently. Translation is the primary task: after each of its epochs the
model is decoded on the validation set and BLEU drives early stopping.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .checkpoint import Checkpoint
from .data import BatchStream, Vocabulary
from .evaluation import bleu
from .model import grounding_loss, translate_ids, translation_loss
from .optim import OptimizerState, adam_step, clip_global_norm
from .params import GROUNDING, SHARED, TRANSLATION, ModelDims, ModelParameters, init_parameters
from .tensor import Tape, backward

log = logging.getLogger(__name__)

TASK_TRANSLATION, TASK_GROUNDING = "translation", "grounding"
LOG_COLUMNS = ("epoch", "step", "J_T", "J_G", "val_bleu", "best_bleu", "seconds")


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    w: float = 0.5
    batch_size: int = 80
    margin: float = 0.1
    clip: float = 1.0
    dropout: float = 0.2
    beam: int = 12
    patience: int = 5
    max_epochs: int = 100
    seed: int = 1234
    lr: float = 1e-3
    emb_dim: int = 620
    enc_hidden: int = 1000
    dec_hidden: int = 1000
    attn_dim: int = 1000
    readout_dim: int = 620
    dtype: str = "float32"
    bleu_smooth: bool = False
    max_len: int | None = None

    def validate(self):
        if not 0.0 <= self.w <= 1.0:
            raise ConfigError(f"w must lie in [0, 1], got {self.w}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def model_dims(self, src_vocab: int, tgt_vocab: int, image_dim: int) -> ModelDims:
        return ModelDims(
            src_vocab, tgt_vocab, self.emb_dim, self.enc_hidden, self.dec_hidden, self.attn_dim, self.readout_dim, image_dim
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class TaskScheduler:
    """Draws the task for every step from the shared generator."""

    def __init__(self, w: float, rng: np.random.Generator):
        self.w = w
        self.rng = rng

    def next_task(self) -> str:
        return TASK_TRANSLATION if self.rng.random() < self.w else TASK_GROUNDING


@dataclass
class EpochStats:
    jt_sum: float = 0.0
    jt_n: int = 0
    jg_sum: float = 0.0
    jg_n: int = 0

    def mean(self, task):
        if task == TASK_TRANSLATION:
            return self.jt_sum / self.jt_n if self.jt_n else float("nan")
        return self.jg_sum / self.jg_n if self.jg_n else float("nan")


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: list = field(default_factory=list)
    stopped_early: bool = False


class Trainer:
    def __init__(
        self,
        config: TrainingConfig,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        text_examples=(),
        image_examples=(),
        val_examples=(),
        image_dim: int | None = None,
    ):
        config.validate()
        self.config = config
        self.src_vocab, self.tgt_vocab = src_vocab, tgt_vocab
        self.text_examples = [e for e in text_examples if e.target is not None]
        self.image_examples = [e for e in image_examples if e.image is not None]
        self.val_examples = [e for e in val_examples if e.target is not None]
        if config.w > 0 and not self.text_examples:
            raise ConfigError("w > 0 needs a nonempty translation dataset")
        if config.w < 1 and not self.image_examples:
            raise ConfigError("w < 1 needs a nonempty described-image dataset")
        if image_dim is None:
            image_dim = self.image_examples[0].image.shape[0] if self.image_examples else 1
        self.rng = np.random.default_rng(config.seed)
        dims = config.model_dims(len(src_vocab), len(tgt_vocab), image_dim)
        self.params = init_parameters(dims, self.rng, np.dtype(config.dtype))
        self.opt = OptimizerState(lr=config.lr)
        self.scheduler = TaskScheduler(config.w, self.rng)
        self.text_stream = BatchStream(self.text_examples, config.batch_size, config.seed, 0) if self.text_examples else None
        self.image_stream = BatchStream(self.image_examples, config.batch_size, config.seed, 1) if self.image_examples else None
        self.step_count = 0
        self.epoch = 0
        self.best_score = None
        self.bad_evals = 0
        self.best_params = self.params.copy()
        self.stats = EpochStats()
        self.task_counts = {TASK_TRANSLATION: 0, TASK_GROUNDING: 0}
        self.log_rows = []
        self._t0 = time.perf_counter()

    @property
    def primary_is_translation(self):
        return self.config.w > 0

    # ------------------------------------------------------------ steps

    def _update(self, task, batch):
        cfg = self.config
        if task == TASK_TRANSLATION:
            active = self.params.partition(SHARED, TRANSLATION)
            loss_fn = lambda: translation_loss(self.params, batch, cfg.dropout, self.rng)  # noqa: E731
        else:
            active = self.params.partition(SHARED, GROUNDING)
            loss_fn = lambda: grounding_loss(self.params, batch, cfg.margin, cfg.dropout, self.rng)  # noqa: E731
        with Tape() as tape:
            loss = loss_fn()
        backward(loss, tape, params=list(active.values()))
        grads = {name: t.grad for name, t in active.items()}
        clip_global_norm(grads.values(), cfg.clip)
        adam_step(active, grads, self.opt)
        return float(loss.item())

    def step(self):
        """One scheduled update; returns ``(task, loss, finished_primary_epoch)``."""
        task = self.scheduler.next_task()
        stream = self.text_stream if task == TASK_TRANSLATION else self.image_stream
        batch, done = stream.next()
        loss = self._update(task, batch)
        self.step_count += 1
        self.task_counts[task] += 1
        if task == TASK_TRANSLATION:
            self.stats.jt_sum += loss
            self.stats.jt_n += 1
        else:
            self.stats.jg_sum += loss
            self.stats.jg_n += 1
        primary = TASK_TRANSLATION if self.primary_is_translation else TASK_GROUNDING
        return task, loss, done and task == primary

    # ------------------------------------------------------------ epochs

    def validate(self):
        """Validation BLEU, or None when there is nothing to translate."""
        if not self.primary_is_translation or not self.val_examples:
            return None
        hyps, refs = [], []
        for ex in self.val_examples:
            ids = translate_ids(self.params, ex.source, beam=self.config.beam, max_len=self.config.max_len)
            hyps.append(self.tgt_vocab.decode(ids))
            refs.append(self.tgt_vocab.decode(ex.target))
        return bleu(hyps, refs, smooth=self.config.bleu_smooth).bleu

    def train_epoch(self) -> dict:
        """Run steps until the primary task finishes an epoch, then evaluate."""
        while True:
            _, _, done = self.step()
            if done:
                break
        self.epoch += 1
        score = self.validate()
        if score is not None and (self.best_score is None or score > self.best_score):
            self.best_score = score
            self.bad_evals = 0
            self.best_params = self.params.copy()
        elif score is not None:
            self.bad_evals += 1
        else:
            self.best_params = self.params.copy()
        row = {
            "epoch": self.epoch,
            "step": self.step_count,
            "J_T": self.stats.mean(TASK_TRANSLATION),
            "J_G": self.stats.mean(TASK_GROUNDING),
            "val_bleu": float("nan") if score is None else score,
            "best_bleu": float("nan") if self.best_score is None else self.best_score,
            "seconds": time.perf_counter() - self._t0,
        }
        self.stats = EpochStats()
        self.log_rows.append(row)
        log.info("epoch %d step %d J_T %.4f J_G %.4f bleu %.2f", row["epoch"], row["step"], row["J_T"], row["J_G"], row["val_bleu"])
        return row

    @property
    def should_stop(self):
        return self.bad_evals >= self.config.patience or self.epoch >= self.config.max_epochs

    def train(self) -> TrainResult:
        while not self.should_stop:
            self.train_epoch()
        best = self.checkpoint(params=self.best_params)
        return TrainResult(best, self.checkpoint(), list(self.log_rows), self.bad_evals >= self.config.patience)

    # ------------------------------------------------------------ state

    def checkpoint(self, params: ModelParameters | None = None) -> Checkpoint:
        """Snapshot (copied, not shared) of everything needed to resume."""
        opt = OptimizerState(self.opt.lr, self.opt.beta1, self.opt.beta2, self.opt.eps)
        opt.m = {k: v.copy() for k, v in self.opt.m.items()}
        opt.v = {k: v.copy() for k, v in self.opt.v.items()}
        opt.steps = dict(self.opt.steps)
        return Checkpoint(
            params=(params or self.params).copy(),
            src_vocab=self.src_vocab,
            tgt_vocab=self.tgt_vocab,
            optimizer=opt,
            epoch=self.epoch,
            step=self.step_count,
            best_score=self.best_score,
            rng_state=dict(self.rng.bit_generator.state),
            trainer_state={
                "bad_evals": self.bad_evals,
                "text_stream": self.text_stream.state() if self.text_stream else None,
                "image_stream": self.image_stream.state() if self.image_stream else None,
                "stats": asdict(self.stats),
                "task_counts": dict(self.task_counts),
            },
            config=self.config.to_dict(),
        )

    def restore(self, ckpt: Checkpoint):
        """Continue from ``ckpt`` so later updates match an uninterrupted run."""
        for name, t in ckpt.params.items():
            if self.params[name].shape != t.shape:
                raise ConfigError(f"checkpoint tensor {name} has shape {t.shape}, model expects {self.params[name].shape}")
            self.params[name].data = t.data.astype(self.params.dtype, copy=True)
        if ckpt.optimizer is not None:
            o = ckpt.optimizer
            self.opt = OptimizerState(o.lr, o.beta1, o.beta2, o.eps)
            self.opt.m = {k: v.copy() for k, v in o.m.items()}
            self.opt.v = {k: v.copy() for k, v in o.v.items()}
            self.opt.steps = dict(o.steps)
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state
        self.epoch, self.step_count, self.best_score = ckpt.epoch, ckpt.step, ckpt.best_score
        st = ckpt.trainer_state
        self.bad_evals = st.get("bad_evals", 0)
        for stream, key in ((self.text_stream, "text_stream"), (self.image_stream, "image_stream")):
            if stream is not None and st.get(key):
                stream.epoch, stream.cursor = st[key]["epoch"], st[key]["cursor"]
                stream._batches = None
        if st.get("stats"):
            self.stats = EpochStats(**st["stats"])
        if st.get("task_counts"):
            self.task_counts = dict(st["task_counts"])
        self.best_params = self.params.copy()


def format_log(rows) -> str:
    lines = ["\t".join(LOG_COLUMNS)]
    for r in rows:
        lines.append("\t".join(_fmt(r[c]) for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def train(config: TrainingConfig, src_vocab, tgt_vocab, text_examples, image_examples=(), val_examples=()) -> TrainResult:
    return Trainer(config, src_vocab, tgt_vocab, text_examples, image_examples, val_examples).train()

