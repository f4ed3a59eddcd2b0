"""Image-vector prediction head, contrastive margin loss and ranking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderStates
from .params import ModelParameters

DEFAULT_MARGIN = 0.1


def predict_image_vector(enc: EncoderStates, params: ModelParameters) -> T.Tensor:
    """``tanh(mean of unmasked encoder states · W_vis)``, one row per sentence."""
    return T.tanh(T.matmul(T.masked_mean(enc.h, enc.mask), params["img.W_vis"]))


def margin_loss(v_hat: T.Tensor, v_true, alpha: float = DEFAULT_MARGIN) -> T.Tensor:
    """Hinge loss on cosine similarities with in-batch negatives.

    For row ``i``: ``sum_{j != i} max(0, alpha - cos(v̂_i, v_i) + cos(v̂_i, v_j))``,
    averaged over rows. This must be a similarity: plugging a distance into
    the same hinge rewards moving away from the true image.
    """
    if alpha <= 0:
        raise ValueError("margin must be positive")
    if not isinstance(v_true, T.Tensor):
        v_true = T.Tensor(np.asarray(v_true, dtype=v_hat.dtype))
    if v_hat.shape != v_true.shape or v_hat.data.ndim != 2:
        raise T.ShapeError(f"margin_loss: predictions {v_hat.shape} vs targets {v_true.shape}")
    B = v_hat.shape[0]
    pred = T.l2_normalize_rows(v_hat)
    true = T.l2_normalize_rows(v_true)
    sims = T.matmul(pred, T.transpose(true))  # [i, j] = cos(v̂_i, v_j)
    pos = T.sum_rows(T.mul(pred, true))
    offset = T.add(T.scale(pos, -1.0), T.Tensor(np.full(B, alpha, dtype=v_hat.dtype)))
    # add the per-row offset along rows via the transposed matrix
    cost = T.transpose(T.add_bias(T.transpose(sims), offset))
    off_diag = 1.0 - np.eye(B, dtype=v_hat.dtype)
    return T.scale(T.sum(T.mul_const(T.relu(cost), off_diag)), 1.0 / B)


@dataclass
class RankingResult:
    ranks: np.ndarray  # 1-based rank of each sentence's true image
    top: np.ndarray  # [n, min(10, n)] best image indices per sentence
    median_rank: float
    recall: dict

    def to_tsv(self) -> str:
        lines = ["sentence_index\ttrue_rank\ttop10"]
        for i, (r, top) in enumerate(zip(self.ranks, self.top)):
            lines.append(f"{i}\t{int(r)}\t{','.join(str(int(j)) for j in top)}")
        rec = "\t".join(f"R@{k}={v:.4f}" for k, v in self.recall.items())
        lines.append(f"# median_rank={self.median_rank:g}\t{rec}")
        return "\n".join(lines) + "\n"


def rank_predictions(pred, images, ks=(1, 5, 10)) -> RankingResult:
    """Rank images for each predicted vector by descending cosine similarity.

    Ties go to the lower image index. ``pred[i]`` is scored against its true
    image ``images[i]``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    images = np.asarray(images, dtype=np.float64)
    if pred.shape[0] != images.shape[0]:
        raise ValueError(f"{pred.shape[0]} sentences but {images.shape[0]} images")
    pn = np.linalg.norm(pred, axis=1, keepdims=True)
    im = np.linalg.norm(images, axis=1, keepdims=True)
    if np.any(pn == 0) or np.any(im == 0):
        raise T.DegenerateInputError("zero-norm vector in ranking; cosine undefined")
    sims = (pred / pn) @ (images / im).T
    n = len(pred)
    idx = np.arange(n)
    ranks = np.empty(n, dtype=np.int64)
    top = np.empty((n, min(10, n)), dtype=np.int64)
    for i in range(n):
        order = np.lexsort((idx, -sims[i]))
        ranks[i] = int(np.flatnonzero(order == i)[0]) + 1
        top[i] = order[: top.shape[1]]
    recall = {k: float(np.mean(ranks <= k)) for k in ks}
    return RankingResult(ranks, top, float(np.median(ranks)), recall)


def rank_images(sentences, images, params: ModelParameters, batch_size: int = 64) -> RankingResult:
    """Encode ``sentences`` (id arrays), predict vectors and rank ``images``."""
    from .data import TrainingExample, pad_batch
    from .encoder import encode

    images = np.asarray(images)
    if len(sentences) != len(images):
        raise ValueError(f"{len(sentences)} sentences but {len(images)} image vectors")
    preds = []
    for start in range(0, len(sentences), batch_size):
        chunk = [TrainingExample(s, image=images[start + i]) for i, s in enumerate(sentences[start : start + batch_size])]
        batch = pad_batch(chunk)
        preds.append(predict_image_vector(encode(batch.src, batch.src_mask, params), params).data)
    return rank_predictions(np.concatenate(preds), images)
