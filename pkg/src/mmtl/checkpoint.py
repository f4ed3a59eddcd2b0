"""Checkpoint files: one JSON manifest line, then raw little-endian tensor bytes.

Manifest entries give each tensor's name, shape, dtype tag (``f4``/``f8``)
and byte offset into the payload that follows the manifest's newline.
Optimizer moments are stored as tensors named ``adam.m/<param>`` and
``adam.v/<param>``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Vocabulary
from .optim import OptimizerState
from .params import ModelDims, ModelParameters, parameter_shapes
from .tensor import ContractError, Tensor

FORMAT = "mmtl-checkpoint"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParameters
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    optimizer: OptimizerState | None = None
    epoch: int = 0
    step: int = 0
    best_score: float | None = None
    rng_state: dict | None = None
    trainer_state: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)


def _tag(arr):
    for tag, dt in _DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return tag
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def save_checkpoint(ckpt: Checkpoint, path):
    arrays = [(name, t.data) for name, t in ckpt.params.items()]
    opt = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "steps": dict(o.steps)}
        for name in o.m:
            arrays.append((f"adam.m/{name}", o.m[name]))
            arrays.append((f"adam.v/{name}", o.v[name]))
    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        tag = _tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dims": ckpt.params.dims.to_dict(),
        "src_vocab": ckpt.src_vocab.tokens,
        "tgt_vocab": ckpt.tgt_vocab.tokens,
        "tensors": entries,
        "optimizer": opt,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "best_score": ckpt.best_score,
        "rng_state": ckpt.rng_state,
        "trainer_state": ckpt.trainer_state,
        "config": ckpt.config,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path, expected_dims: ModelDims | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected_dims`` every shape is verified."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        if nl < 0:
            raise ValueError("no manifest terminator")
        manifest = json.loads(raw[:nl].decode("utf-8"))
        if manifest.get("format") != FORMAT:
            raise ValueError(f"format tag {manifest.get('format')!r}")
        dims = ModelDims(**manifest["dims"])
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    payload = memoryview(raw)[nl + 1 :]

    arrays = {}
    for e in entries:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise CheckpointError(f"{path}: tensor {e['name']} has unknown dtype {e['dtype']!r}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + count * dt.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past the end of the payload")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=dt).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="))

    shapes = parameter_shapes(expected_dims or dims)
    tensors = {}
    for name, shape in shapes.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: tensor {name} missing")
        if tuple(arrays[name].shape) != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tuple(arrays[name].shape)}, config expects {shape}")
        tensors[name] = Tensor(arrays[name], requires_grad=True, name=name)
    params = ModelParameters(tensors, dims)

    opt = None
    if manifest.get("optimizer") is not None:
        o = manifest["optimizer"]
        opt = OptimizerState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
        opt.steps = {k: int(v) for k, v in o["steps"].items()}
        for name in opt.steps:
            opt.m[name] = arrays[f"adam.m/{name}"]
            opt.v[name] = arrays[f"adam.v/{name}"]

    src_vocab = Vocabulary(manifest["src_vocab"])
    tgt_vocab = Vocabulary(manifest["tgt_vocab"])
    if len(src_vocab) != dims.src_vocab or len(tgt_vocab) != dims.tgt_vocab:
        raise CheckpointError(f"{path}: stored vocabularies do not match the embedding sizes")
    return Checkpoint(
        params,
        src_vocab,
        tgt_vocab,
        optimizer=opt,
        epoch=manifest["epoch"],
        step=manifest["step"],
        best_score=manifest["best_score"],
        rng_state=manifest["rng_state"],
        trainer_state=manifest.get("trainer_state") or {},
        config=manifest.get("config") or {},
    )


def check_compatible(checkpoints):
    """Ensemble members must share both vocabularies."""
    if not checkpoints:
        raise ContractError("no checkpoints given")
    first = checkpoints[0]
    for i, c in enumerate(checkpoints[1:], start=1):
        if c.src_vocab != first.src_vocab or c.tgt_vocab != first.tgt_vocab:
            raise ContractError(f"checkpoint {i} uses a different vocabulary than checkpoint 0")
