import numpy as np
import pytest

from ctxdet.detector import DetectorModel, ModelConfig
from ctxdet.memory import init_memory


@pytest.fixture
def tiny_cfg():
    # 4x4 token grid, d=8, 2 classes x 2 prototypes, 4 queries, 1 layer each
    return ModelConfig(
        num_classes=2,
        num_prototypes=2,
        d_model=8,
        num_heads=2,
        enc_layers=1,
        dec_layers=1,
        num_queries=4,
        ffn_hidden=16,
        patch=4,
        channels=3,
        tokens_h=4,
        tokens_w=4,
    )


@pytest.fixture
def tiny_model(tiny_cfg):
    return DetectorModel(tiny_cfg, seed=0)


@pytest.fixture
def tiny_memory(tiny_cfg):
    return init_memory(
        tiny_cfg.num_classes, tiny_cfg.num_prototypes, tiny_cfg.d_model, 0.99, seed=1
    )


@pytest.fixture
def tiny_frame_grid():
    return np.random.default_rng(3).random((16, 16, 3))


@pytest.fixture
def tiny_annotations():
    return [(0, (0.3, 0.4, 0.25, 0.3)), (1, (0.7, 0.6, 0.2, 0.2))]
