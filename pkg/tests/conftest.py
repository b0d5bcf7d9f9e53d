"""
Shared fixtures: toy graphs from the zoo and a ready-to-run search harness.

Run with: pytest -v            (add -m "not slow" to skip the end-to-end checks)
"""
import os
import sys

import numpy as np
import pytest

_project_dir = os.path.join(os.path.dirname(__file__), '..')
sys.path.insert(0, os.path.abspath(_project_dir))

from src.models.latency_models import AnalyticalModelParams
from src.models.search_models import LatencyGoal, SearchConfig, StepPolicy
from src.state import SearchServices
from src.tools.latency import AnalyticalLatencyProvider
from src.tools.latency_cache import LatencyCache, cache_fingerprint
from src.tools.zoo import dense_chain, mlp, resnet_block, two_branch_add


class StaticGroupImportance:
    """
    Importance source with one fixed vector per group, in root-model channel coordinates.
    Every node sees the entries of the channels it still keeps, so scores do not depend
    on the path that led to a node.
    """
    needs_gradients = False

    def __init__(self, vectors):
        self.vectors = [np.asarray(v, dtype=np.float64) for v in vectors]

    def group_importances(self, node, groups, state):
        return [self.vectors[g.index][node.kept[g.index]] for g in groups]


def random_importance(groups, seed):
    rng = np.random.default_rng(seed)
    return StaticGroupImportance([rng.uniform(0.0, 1.0, size=g.size) for g in groups])


def make_services(model, importance=None, cache_path=None, enabled=True, params=None, dataset=None):
    provider = AnalyticalLatencyProvider(model, params)
    cache = LatencyCache(cache_path, cache_fingerprint(model, provider), enabled=enabled)
    return SearchServices(provider=provider, cache=cache, dataset=dataset, importance=importance)


def search_config(**overrides):
    defaults = dict(steps=3, alive=3, goal=LatencyGoal(fraction=0.5), step_policy=StepPolicy(kind="sqrt"),
                    finetune=False, seed=0)
    defaults.update(overrides)
    return SearchConfig(**defaults)


# =============================================================================
# Fixtures
# =============================================================================

@pytest.fixture
def chain():
    """Input(4) -> Dense(4->8) -> ReLU -> Dense(8->6) -> Dense(6->3) -> Output."""
    return dense_chain([4, 8, 6, 3], relu_after=[0], seed=0)


@pytest.fixture
def projection_block():
    return resnet_block(projection=True, seed=0)


@pytest.fixture
def identity_block():
    return resnet_block(projection=False, seed=0)


@pytest.fixture
def two_branch():
    return two_branch_add(seed=0)


@pytest.fixture
def small_mlp():
    """Two prunable groups of 8 channels."""
    return mlp(6, [8, 8], 3, seed=0)


@pytest.fixture
def unit_params():
    """Analytical parameters without the constant terms."""
    return AnalyticalModelParams(align=8, slant=0.0, kappa_dense=1e-3, kappa_conv=1e-3, layer_overhead_ms=0.0, base_ms=0.0)
