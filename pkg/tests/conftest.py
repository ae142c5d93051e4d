"""
Shared test fixtures for maskcls tests.
"""

import os
import sys
import warnings

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from maskcls.data import GroundTruth, SceneConfig, generate_dataset, save_dataset
from maskcls.losses import LossWeights
from maskcls.model import ModelConfig, PredictionSet, init_params

# Suppress warnings for cleaner test output
warnings.filterwarnings("ignore", category=DeprecationWarning)


def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line(
        "markers", "integration: marks tests as integration tests (deselect with '-m \"not integration\"')"
    )
    config.addinivalue_line(
        "markers", "unit: marks tests as unit tests"
    )
    config.addinivalue_line(
        "markers", "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )


@pytest.fixture
def rng():
    """Seeded generator so every test sees the same draws."""
    return np.random.default_rng(1234)


@pytest.fixture
def weights():
    return LossWeights()


@pytest.fixture
def tiny_model_config():
    """Smallest maskformer config that still exercises every block (N=4, K=3, 16x16)."""
    return ModelConfig(num_classes=3, num_queries=4, decoder_layers=2, heads=2, hidden_dim=8,
                       mask_dim=8, backbone_channels=(4, 8), image_size=(16, 16))


@pytest.fixture
def tiny_params(tiny_model_config):
    return init_params(tiny_model_config, seed=0)


@pytest.fixture
def scene_config():
    return SceneConfig(num_classes=5, image_size=(16, 16), shapes_per_image=(1, 3),
                       shape_size=(4, 9), seed=7)


@pytest.fixture
def samples(scene_config):
    return generate_dataset(scene_config, 6)


@pytest.fixture
def dataset_dir(tmp_path, scene_config, samples):
    """Ground-truth dataset written to disk."""
    return save_dataset(samples, tmp_path / "gt", scene_config.num_classes,
                        scene_config.thing_classes, scene_config=scene_config.to_dict())


@pytest.fixture
def two_segment_gt():
    """4x4 ground truth: class 1 on the left half, class 2 on the right half."""
    labels = np.array([[1, 1, 2, 2]] * 4)
    return GroundTruth.from_semantic(labels)


def make_prediction(class_probs, masks):
    """PredictionSet from plain nested lists."""
    return PredictionSet.from_arrays(np.asarray(class_probs, dtype=float),
                                     np.asarray(masks, dtype=float))
