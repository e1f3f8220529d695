import numpy as np
import pytest

import vadasr.autodiff as ad
from vadasr.model import PosteriorGrid


def random_grid(rng, T, vocab_size) -> PosteriorGrid:
    """Random normalized posterior grid over vocab + blank."""
    vocab = [chr(ord("a") + i) for i in range(vocab_size)]
    logits = rng.normal(size=(T, vocab_size + 1))
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return PosteriorGrid(log_probs=ad.Tensor(logp), vocab=vocab,
                         blank_index=vocab_size)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
