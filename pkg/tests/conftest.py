import numpy as np
import pytest

from maskdistill import dataio
from maskdistill.config import load_config


@pytest.fixture
def tiny_cfg():
    """Desk-scale config used by fast integration tests."""
    return load_config(overrides=dict(
        image_size=64, patch_size=8, queue_size=128, batch_size=16, epochs=2,
        warmup_epochs=1, backbone_channels="16 32 64", num_prototypes=32,
        proto_dim=16, global_dim=16, global_hidden=32, local_hidden=32,
        num_matched_pairs=8, base_lr=1e-3, seed=3,
    ))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    spec = dataio.SyntheticSpec(num_images=64, image_size=64, num_classes=4, seed=11)
    return dataio.make_synthetic(spec, root)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
