import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "noisylab",
    max_examples=25,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.filter_too_much],
)
settings.load_profile("noisylab")


@pytest.fixture(scope="session")
def awgn_dataset():
    """Small constant-variance dataset (sigma = 0.1) with clean retained."""
    from noisylab.data import synth_hgn_dataset
    return synth_hgn_dataset(0.0, 0.01, "cam0", 800, 400, seed=11, channels=1,
                             pairs_per_scene=50)


@pytest.fixture(scope="session")
def nlf_dataset_small():
    """Small heteroscedastic dataset for trend/collapse training tests."""
    from noisylab.data import synth_hgn_dataset
    return synth_hgn_dataset(1e-2, 1e-4, "cam0", 800, 512, seed=21, channels=1,
                             pairs_per_scene=64)


def noisy_input_psnr(dataset) -> float:
    from noisylab import metrics
    vals = [metrics.psnr(p.a.data, p.clean.data) for p in dataset.pairs]
    return float(np.mean(vals))
