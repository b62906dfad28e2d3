import types

import numpy as np
import pytest
import torch

from uvflow.flowdit import FlowDiT, ModelConfig

TINY = dict(image_size=16, patch_size=4, channels=3, token_dim=32, heads=2, n_double=2, n_single=2,
            group_boundaries=(1, 3), time_dim=16, cond_tokens=16, mlp_ratio=2)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    m = FlowDiT(tiny_cfg)
    # the output head is zero-initialised; perturb it so outputs depend on the input
    with torch.no_grad():
        m.out.weight.normal_(0, 0.1)
        m.out.bias.normal_(0, 0.1)
    m.eval()
    return m


@pytest.fixture
def tiny_data():
    rng = np.random.default_rng(0)
    n = 24
    f = lambda: rng.random((n, 16, 16, 3)).astype(np.float32)  # noqa: E731
    return types.SimpleNamespace(portraits=f(), textures=f(), t_skin=f(), t_skin_mouth=f())
