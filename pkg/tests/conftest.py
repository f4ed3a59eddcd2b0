import numpy as np
import pytest

from mmtl.data import EOS, TrainingExample, pad_batch
from mmtl.params import ModelDims, init_parameters


def tiny_dims(vocab=20, dim=8, image_dim=12):
    return ModelDims(vocab, vocab, dim, dim, dim, dim, dim, image_dim)


def tiny_params(seed=0, dtype=np.float64, perturb=0.0, **kw):
    """Tiny model; ``perturb`` adds N(0, perturb) noise to every tensor."""
    rng = np.random.default_rng(seed)
    params = init_parameters(tiny_dims(**kw), rng, dtype)
    if perturb:
        for t in params.tensors.values():
            t.data += rng.normal(scale=perturb, size=t.shape).astype(dtype)
    return params


def random_examples(rng, lengths, vocab=20, image_dim=12, tgt=True, img=True):
    out = []
    for n in lengths:
        src = rng.integers(4, vocab, size=n)
        target = np.append(rng.integers(4, vocab, size=max(n - 1, 1)), EOS) if tgt else None
        image = rng.normal(size=image_dim) if img else None
        out.append(TrainingExample(src, target, image))
    return out


def random_batch(seed=0, lengths=(5, 3, 4), **kw):
    return pad_batch(random_examples(np.random.default_rng(seed), lengths, **kw))


@pytest.fixture
def params64():
    return tiny_params(seed=0, perturb=0.3)


@pytest.fixture
def batch():
    return random_batch()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
