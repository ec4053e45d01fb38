import numpy as np
import pytest

from estimator.dataset import SimulationSettings, generate_dataset, normalize
from estimator.neural import Architecture, build_model
from estimator.road_profile import RoadPsdParams
from estimator.vehicle_dynamics import STANDARD_VEHICLES

MINI_SETTINGS = SimulationSettings(speed=5.0, sample_rate=100.0, dt_internal=5e-4, signal_length=32,
                                   profile_spacing=0.05, profile_margin=1.0)


@pytest.fixture
def standard_vehicles():
    return STANDARD_VEHICLES


@pytest.fixture
def tiny_arch():
    return Architecture(signal_length=16, encoder_hidden=(12,), decoder_hidden=(10,), d_r=4, d_v=3,
                        classifier_hidden=(6,), n_classes=2)


@pytest.fixture
def tiny_weights(tiny_arch):
    return build_model(tiny_arch, seed=11, dtype=np.float64)


@pytest.fixture
def tiny_batch(tiny_arch):
    rng = np.random.default_rng(5)
    return {
        "road": rng.standard_normal((2, tiny_arch.signal_length)),
        "cabin": rng.standard_normal((2, tiny_arch.signal_length)),
        "labels": np.array([0, 1]),
    }


@pytest.fixture(scope="session")
def mini_raw_dataset():
    """Two standard vehicle classes, 8 samples each, 32-point signals"""
    return generate_dataset(STANDARD_VEHICLES[:2], n_per_class=8, seed=123, psd=RoadPsdParams(),
                            settings=MINI_SETTINGS, test_fraction=0.25)


@pytest.fixture(scope="session")
def mini_dataset(mini_raw_dataset):
    return normalize(mini_raw_dataset)


@pytest.fixture
def mini_arch():
    return Architecture(signal_length=32, encoder_hidden=(16,), decoder_hidden=(16,), d_r=4, d_v=3,
                        classifier_hidden=(8,), n_classes=2)


@pytest.fixture
def mini_settings():
    return MINI_SETTINGS
