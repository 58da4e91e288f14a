import numpy as np
import pytest

from proxtune.param_store import ModelParameters, ParameterGroup


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_model(sizes, module_indices=None, seed=0, snapshot=True):
    """Random flat-group model for optimizer tests."""
    r = np.random.default_rng(seed)
    module_indices = module_indices or list(range(1, len(sizes) + 1))
    groups = [
        ParameterGroup(f"g{i}", r.normal(size=n), k)
        for i, (n, k) in enumerate(zip(sizes, module_indices))
    ]
    model = ModelParameters(groups)
    if snapshot:
        for g in model:
            g.snapshot = g.values.copy()
    return model
