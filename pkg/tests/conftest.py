import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prefopt.autodiff import Tensor
from prefopt.model import ModelConfig, init_model

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def widened(config: ModelConfig, scale: float = 0.3, seed: int = 1):
    """Seeded model with weights pushed away from the near-uniform 0.02 init."""
    model = init_model(config)
    rng = np.random.default_rng(seed)
    for t in model.parameters():
        t.data += scale * rng.standard_normal(t.shape)
    return model


def uniform_model(vocab: int = 16, d_model: int = 8):
    """All weights zero except embeddings: every next-token distribution is uniform."""
    model = init_model(ModelConfig(vocab_size=vocab, d_model=d_model, n_layers=1, n_heads=2, max_seq_len=16))
    for name, t in model.tensors.items():
        if name not in ("tok_emb", "pos_emb") and not name.endswith(".g"):
            t.data[...] = 0.0
    return model


@pytest.fixture
def small_model():
    return widened(ModelConfig(vocab_size=64, d_model=16, n_layers=2, n_heads=2, max_seq_len=48))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
