import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("ci", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("ci")


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small generated pair used by trainer/cli tests (not the smoke run)."""
    from dadet.synthdata import SceneSpec, generate_pair_dataset

    spec = SceneSpec(seed=11)
    return generate_pair_dataset(spec, n_source=6, n_target=6, n_target_test=4)


def micro_backbone_spec():
    """Cheapest legal backbone for routing tests: tiny widths, 64x64 input."""
    from dadet.netarch import BackboneSpec

    return BackboneSpec(K=3, widths=(4, 8, 8), input_hw=(64, 64))
