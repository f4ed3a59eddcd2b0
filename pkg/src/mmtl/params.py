"""Model dimensions and the partitioned parameter store.

Tensor names carry their partition as a prefix: ``enc.`` tensors are shared
by both tasks, ``dec.`` tensors belong to translation only and ``img.``
tensors to image prediction only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensor import Tensor

SHARED, TRANSLATION, GROUNDING = "shared", "translation", "grounding"
_PREFIX = {"enc": SHARED, "dec": TRANSLATION, "img": GROUNDING}


@dataclass
class ModelDims:
    src_vocab: int
    tgt_vocab: int
    emb_dim: int = 620
    enc_hidden: int = 1000
    dec_hidden: int = 1000
    attn_dim: int = 1000
    readout_dim: int = 620
    image_dim: int = 2048

    @property
    def ctx_dim(self):
        return 2 * self.enc_hidden

    def to_dict(self):
        return asdict(self)


def partition_of(name: str) -> str:
    return _PREFIX[name.split(".", 1)[0]]


class ModelParameters:
    def __init__(self, tensors: dict[str, Tensor], dims: ModelDims):
        self.tensors = dict(tensors)
        self.dims = dims

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def partition(self, *parts: str) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if partition_of(k) in parts}

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "ModelParameters":
        return ModelParameters({k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.items()}, self.dims)

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters(
            {k: Tensor(t.data.astype(dtype), requires_grad=True, name=k) for k, t in self.items()}, self.dims
        )

    def expected_shapes(self) -> dict[str, tuple]:
        return parameter_shapes(self.dims)


def parameter_shapes(d: ModelDims) -> dict[str, tuple]:
    E, H, Hd, A, R, C = d.emb_dim, d.enc_hidden, d.dec_hidden, d.attn_dim, d.readout_dim, d.ctx_dim
    shapes = {"enc.src_emb": (d.src_vocab, E)}
    for side in ("fwd", "bwd"):
        shapes.update(
            {
                f"enc.{side}.W": (E, 3 * H),
                f"enc.{side}.U": (H, 3 * H),
                f"enc.{side}.b": (3 * H,),
                f"enc.{side}.h0": (H,),
            }
        )
    shapes.update(
        {
            "dec.tgt_emb": (d.tgt_vocab, E),
            "dec.W_init": (C, Hd),
            "dec.gru.W": (E + C, 3 * Hd),
            "dec.gru.U": (Hd, 3 * Hd),
            "dec.gru.b": (3 * Hd,),
            "dec.att.W_a": (Hd, A),
            "dec.att.U_a": (C, A),
            "dec.att.v_a": (A,),
            "dec.out.P_emb": (E, R),
            "dec.out.P_state": (Hd, R),
            "dec.out.P_ctx": (C, R),
            "dec.out.W_out": (R, d.tgt_vocab),
            "img.W_vis": (C, d.image_dim),
        }
    )
    return shapes


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_parameters(dims: ModelDims, rng: np.random.Generator, dtype=np.float32) -> ModelParameters:
    """Glorot-uniform matrices (per gate block for GRUs), zero biases and initial states."""
    tensors = {}
    for name, shape in parameter_shapes(dims).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf in ("b", "h0"):
            arr = np.zeros(shape)
        elif leaf in ("W", "U"):
            g = shape[1] // 3
            arr = np.concatenate([_glorot(rng, shape[0], g, (shape[0], g)) for _ in range(3)], axis=1)
        elif len(shape) == 1:
            arr = _glorot(rng, shape[0], 1, shape)
        else:
            arr = _glorot(rng, shape[0], shape[1], shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return ModelParameters(tensors, dims)
