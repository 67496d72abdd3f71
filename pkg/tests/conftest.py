import numpy as np
import pytest

from elastiserve.elastifier import AnchorSet, build_level_table, profile_importance, reorder_units
from elastiserve.model import ModelConfig, TransformerLM
from elastiserve.pipeline import default_batches, elastify
from elastiserve.task import TaskVocab, sample_batches
from elastiserve.training import toy_config, train_toy

VOCAB = TaskVocab()


@pytest.fixture(scope="session")
def vocab():
    return VOCAB


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_layers=2, n_heads=4, head_dim=8, d_ff=16, vocab_size=VOCAB.size)


@pytest.fixture
def tiny_model(tiny_cfg):
    return TransformerLM.create(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_batches():
    return sample_batches(5, 2, 8)


@pytest.fixture(scope="session")
def tiny_ckpt():
    """Untrained small model, reordered, full default level table, rank-2
    adapters trained for a few steps so they are non-trivial."""
    from elastiserve.elastifier import train_adapters

    cfg = ModelConfig(n_layers=2, n_heads=4, head_dim=8, d_ff=16, vocab_size=VOCAB.size, seed=3)
    model = TransformerLM.create(cfg)
    batches = sample_batches(6, 2, 8)
    anchors = AnchorSet(frozenset())
    ckpt = reorder_units(model, profile_importance(model, batches), anchors, build_level_table(cfg, anchors))
    ckpt.adapter_rank = 2
    for i, lvl in enumerate(ckpt.levels):
        ckpt.adapters[lvl.key] = train_adapters(ckpt, lvl.key, batches, rank=2, steps=3, lr=1e-2, seed=i)
    return ckpt


# --- the trained serving toy, shared by the slow tests and the acceptance run ---

@pytest.fixture(scope="session")
def trained_model():
    return train_toy(toy_config(VOCAB), steps=600, seed=0, log_every=0).model


@pytest.fixture(scope="session")
def serving_ckpt(trained_model):
    return elastify(trained_model, default_batches(1, 4), default_batches(2, 300), adapter_steps=300,
                    validation_batches=default_batches(3, 2), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
