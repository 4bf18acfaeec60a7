import numpy as np
import pytest

from webdet.datagen import GenConfig, generate


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small two-domain dataset shared by trainer/cli tests."""
    cfg = GenConfig(num_classes=3, feat_dim=8, n_web=16, n_target=10,
                    m_web=6, m_target=12, clutter=1.0, seed=42)
    web, target = generate(cfg)
    return cfg, web, target


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
