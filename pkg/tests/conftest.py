import numpy as np
import pytest

from tinypeft.model import Backbone, ModelConfig
from tinypeft.tasks import Example, MultimodalBatch


def tiny_config(**overrides):
    base = dict(
        d_emb=16, n_enc_layers=1, n_dec_layers=1, n_heads=2, d_ff=32,
        vocab_size=16, patch_feature_dim=6, n_patches=3, max_text_len=4,
        max_target_len=4, dropout_rate=0.0, max_prompt_len=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(config, rng, batch_size=2, task_id="t"):
    b, p, f = batch_size, config.n_patches, config.patch_feature_dim
    targets = rng.integers(4, config.vocab_size, size=(b, config.max_target_len))
    targets[:, -1] = 2  # eos
    return MultimodalBatch(
        task_id=task_id,
        patches=rng.standard_normal((b, p, f)),
        text=rng.integers(4, config.vocab_size, size=(b, config.max_text_len)),
        targets=targets,
        boundary=p,
    )


def random_example(config, rng):
    batch = random_batch(config, rng, batch_size=1)
    return Example(batch.patches[0], batch.text[0], batch.targets[0])


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def backbone(config):
    return Backbone(config, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
