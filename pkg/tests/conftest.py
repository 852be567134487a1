"""Pytest configuration and fixtures."""

import pytest

from gazereach.config import RECORDED_COUNTS, EmConfig, NoiseSpec
from gazereach.dataset import synthesize_dataset
from gazereach.scene import SceneGeometry
from gazereach.trajgmm import fit_action_models

SMALL_COUNTS = {"P_L": 4, "P_M": 4, "P_R": 4, "G_L": 4, "G_M": 4, "G_R": 4}


@pytest.fixture(scope="session")
def scene():
    """Default tabletop scene."""
    return SceneGeometry.default()


@pytest.fixture(scope="session")
def recorded_dataset(scene):
    """120 noisy trials with the recorded tally, seed 7."""
    return synthesize_dataset(scene, RECORDED_COUNTS, NoiseSpec(), seed=7)


@pytest.fixture(scope="session")
def small_dataset(scene):
    """24 noisy trials, four per label."""
    return synthesize_dataset(scene, SMALL_COUNTS, NoiseSpec(), seed=3)


@pytest.fixture(scope="session")
def clean_dataset(scene):
    """Noise-free trials, three per label."""
    counts = {label: 3 for label in SMALL_COUNTS}
    return synthesize_dataset(scene, counts, NoiseSpec.zero(), seed=11)


@pytest.fixture(scope="session")
def clean_bundle(clean_dataset):
    """Per-axis K=4 models fitted on the noise-free trials."""
    return fit_action_models(clean_dataset, EmConfig(), seed=5)


@pytest.fixture(scope="session")
def noisy_bundle(scene):
    """Per-axis K=4 models on 20 noisy trials per label (training ids 1..120)."""
    counts = {label: 20 for label in SMALL_COUNTS}
    train = synthesize_dataset(scene, counts, NoiseSpec(), seed=21)
    return fit_action_models(train, EmConfig(), seed=5)
