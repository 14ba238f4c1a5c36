import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisylab import metrics
from noisylab.errors import ShapeError
from noisylab.metrics import (NoiseHistogram, gaussian_histogram, kl_divergence,
                              noise_histogram, psnr, ssim, uniform_edges,
                              values_histogram)
from noisylab.noisemodels import AwgnModel, NlfModel

RNG = np.random.default_rng(0)


# -- KL divergence ---------------------------------------------------------------

def test_kl_hand_example():
    edges = np.array([0.0, 0.5, 1.0])
    p = NoiseHistogram(edges, np.array([2.0, 2.0]))     # (0.5, 0.5)
    q = NoiseHistogram(edges, np.array([1.0, 3.0]))     # (0.25, 0.75)
    expected = 0.5 * np.log(2.0) + 0.5 * np.log(2.0 / 3.0)
    assert kl_divergence(p, q) == pytest.approx(expected, abs=1e-6)
    assert expected == pytest.approx(0.1438, abs=1e-4)


def test_kl_self_is_zero():
    h = values_histogram(RNG.standard_normal(1000) * 0.05)
    assert kl_divergence(h, h) == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    edges = uniform_edges(0.1, 32)
    p = NoiseHistogram(edges, rng.integers(0, 50, 32).astype(float))
    q = NoiseHistogram(edges, rng.integers(0, 50, 32).astype(float))
    assert kl_divergence(p, q) >= 0.0


def test_kl_binning_mismatch():
    p = NoiseHistogram(uniform_edges(0.1, 16), np.ones(16))
    q = NoiseHistogram(uniform_edges(0.2, 16), np.ones(16))
    with pytest.raises(ShapeError):
        kl_divergence(p, q)
    r = NoiseHistogram(uniform_edges(0.1, 8), np.ones(8))
    with pytest.raises(ShapeError):
        kl_divergence(p, r)


# -- noise histograms ---------------------------------------------------------------

def test_histogram_all_mass_in_zero_bin_when_equal():
    x = RNG.uniform(0, 1, (4, 1, 8, 8))
    h = noise_histogram(x, x)
    zero_bin = np.searchsorted(h.edges, 0.0, side="right") - 1
    assert h.counts[zero_bin] == x.size
    assert h.counts.sum() == x.size


def test_histogram_counts_every_value_once():
    noisy = RNG.uniform(0, 1, (2, 1, 16, 16))
    clean = RNG.uniform(0, 1, (2, 1, 16, 16))
    h = noise_histogram(noisy, clean)   # residuals far outside +-0.2
    assert h.counts.sum() == noisy.size
    assert h.counts[0] + h.counts[-1] > 0  # clipped into end bins


def test_histogram_symmetry_for_symmetric_noise():
    noise = 0.05 * np.random.default_rng(1).standard_normal(200_000)
    h = values_histogram(noise)
    p = h.probabilities()
    asym = np.abs(p - p[::-1]).max()
    assert asym < 2e-3  # peak-bin Poisson noise is ~3e-4 at this sample size


def test_histogram_shape_mismatch():
    with pytest.raises(ShapeError):
        noise_histogram(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


# -- PSNR -----------------------------------------------------------------------

def test_psnr_closed_form_20db():
    clean = np.zeros((1, 10, 10))
    est = clean + 0.1  # MSE = 0.01
    assert psnr(est, clean) == pytest.approx(20.0, abs=1e-9)


def test_psnr_identical_hits_cap():
    x = RNG.uniform(0, 1, (1, 8, 8))
    assert psnr(x, x) == 100.0


@given(st.floats(1e-3, 0.2), st.floats(1.2, 4.0))
@settings(max_examples=30)
def test_psnr_decreases_with_mse(err, factor):
    clean = np.zeros((1, 8, 8))
    assert psnr(clean + err, clean) > psnr(clean + err * factor, clean)


# -- SSIM -----------------------------------------------------------------------

def test_ssim_identity_is_one():
    x = RNG.uniform(0, 1, (1, 32, 32))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)


def test_ssim_inverted_structure_below_one():
    clean = RNG.uniform(0, 1, (1, 32, 32))
    est = 1.0 - clean
    assert ssim(est, clean) < 0.2


def test_ssim_window_must_fit():
    with pytest.raises(ShapeError):
        ssim(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)))


def _ssim_direct(x, y, window=8, peak=1.0):
    """Independent loop implementation of the same windowed statistic."""
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    scores = []
    for c in range(x.shape[0]):
        for i in range(x.shape[1] - window + 1):
            for j in range(x.shape[2] - window + 1):
                wx = x[c, i:i + window, j:j + window]
                wy = y[c, i:i + window, j:j + window]
                mx, my = wx.mean(), wy.mean()
                vx, vy = wx.var(), wy.var()
                cxy = ((wx - mx) * (wy - my)).mean()
                scores.append(((2 * mx * my + c1) * (2 * cxy + c2))
                              / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(scores))


def test_ssim_matches_independent_implementation():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        clean = rng.uniform(0, 1, (2, 16, 16))
        est = np.clip(clean + 0.1 * rng.standard_normal(clean.shape), 0, 1)
        assert ssim(est, clean) == pytest.approx(_ssim_direct(est, clean), abs=1e-6)


# -- model/sample self-consistency ---------------------------------------------------

@pytest.mark.parametrize("model,clean_val", [
    (AwgnModel(sigma_init=0.05), 0.5),
    (NlfModel(beta1_init=5e-3, beta2_init=5e-4), 0.25),
])
def test_sampling_matches_analytic_histogram(model, clean_val):
    n = 100  # 100 x 1024 px ~ 1e5 samples
    clean = np.full((n, 1, 32, 32), clean_val, np.float32)
    sampled = model.sample(clean, None, np.random.default_rng(5))
    sample_hist = noise_histogram(sampled, clean)
    analytic = gaussian_histogram(model.noise_std(clean[:1]),
                                  weight=float(sample_hist.counts.sum()))
    assert kl_divergence(sample_hist, analytic) < 0.005


def test_metrics_row_formatting():
    row = metrics.MetricsRow("cam0", 800, 3, 10, 0.5, 0.01, 30.0, 0.9)
    text = row.as_csv()
    assert text.startswith("cam0,800,3,10,")
    nan_row = metrics.MetricsRow("cam0", 800, 3, 10, float("nan"), 0.01, 30.0, 0.9)
    assert ",," in nan_row.as_csv()
