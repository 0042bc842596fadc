import numpy as np
import pytest

from tpcvit.config import ModelConfig, RunConfig, TpcConfig

ROOT = __import__("pathlib").Path(__file__).resolve().parent.parent


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(depth=2, dim=16, heads=2, image=8, patch=4, classes=3) -> ModelConfig:
    return ModelConfig(depth=depth, embed_dim=dim, heads=heads, patch_size=patch, image_size=image, in_chans=3, num_classes=classes)


def tiny_run_config(**sections) -> RunConfig:
    raw = {
        "model": dict(depth=2, embed_dim=16, heads=2, patch_size=4, image_size=8, in_chans=3, num_classes=2),
        "tpc": dict(gamma=1.0, beta=0.0, delta=0.3),
        "data": dict(train_size=16, eval_size=8, num_classes=2, image_size=8),
        "optim": dict(lr=1e-3),
        "train": dict(epochs=2, batch_size=8, seed=0),
    }
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    return RunConfig.from_dict(raw)


@pytest.fixture
def tiny_cfg():
    return tiny_run_config()


@pytest.fixture
def gentle_tpc():
    return TpcConfig(gamma=1.0, beta=0.0, delta=0.3)
