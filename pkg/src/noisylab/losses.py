"""Training objectives over batches of noisy pairs.

All pair losses are sums over elements (not means), so the weighting
constant between the likelihood term and the squared-error term matches a
fixed convention regardless of patch size; the trainer divides the batch
total by the number of pairs.

Modes:
    cross       likelihood of each noisy image given the denoised *other*
                image, plus the paired squared-error term
    self        likelihood of each noisy image given its own denoised
                output (known to collapse without a large stabilizer weight)
    n2n         paired squared-error term only
    r2r         single-image variant: recorrupt one noisy image into an
                anti-correlated input/target pair
    supervised  squared error against the true clean patch
    supervised-nf  likelihood against the true clean patch
"""

from __future__ import annotations

import numpy as np

from . import engine as eng
from .engine import Tensor
from .errors import ConfigError

LOSS_MODES = ("cross", "self", "r2r", "n2n", "supervised", "supervised-nf")


def noise2noise_cost(den_a: Tensor, den_b: Tensor, a: Tensor, b: Tensor) -> Tensor:
    return (den_a - b).square().sum() + (den_b - a).square().sum()


def loss_n2n(denoiser, a, b) -> Tensor:
    """Squared error of each denoised image against its paired observation."""
    a, b = eng.as_tensor(a), eng.as_tensor(b)
    return noise2noise_cost(denoiser(a), denoiser(b), a, b)


def loss_nm_cross(noise_model, denoiser, a, b, meta=None) -> Tensor:
    """Negative log-likelihood with the clean estimate swapped across the pair."""
    a, b = eng.as_tensor(a), eng.as_tensor(b)
    den_a, den_b = denoiser(a), denoiser(b)
    return -1.0 * (noise_model.log_prob(a, den_b, meta) + noise_model.log_prob(b, den_a, meta))


def loss_nm_self(noise_model, denoiser, a, b, meta=None) -> Tensor:
    """Negative log-likelihood with each image scored against its own estimate."""
    a, b = eng.as_tensor(a), eng.as_tensor(b)
    return -1.0 * (noise_model.log_prob(a, denoiser(a), meta)
                   + noise_model.log_prob(b, denoiser(b), meta))


def r2r_corrupt(noisy: np.ndarray, alpha: float, rng: np.random.Generator):
    """Recorrupt one noisy image into an (input, target) pair.

    input = noisy + alpha*z and target = noisy - z/alpha with z ~ N(0, I),
    so the two added perturbations are exactly anti-correlated and both
    sides keep the original image as their mean.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    noisy = np.asarray(noisy, dtype=np.float32)
    z = rng.standard_normal(noisy.shape).astype(np.float32)
    return noisy + alpha * z, noisy - z / alpha


class BatchTerms:
    """One batch's loss pieces; keeps the total assembly L_nm + lambda*L_dn explicit."""

    def __init__(self, l_nm: Tensor | None, l_dn: Tensor | None, n_pairs: int, n_dims: int):
        self.l_nm = l_nm
        self.l_dn = l_dn
        self.n_pairs = n_pairs
        self.n_dims = n_dims  # per-side element count summed over the batch

    def total(self, lam: float) -> Tensor:
        if self.l_nm is None:
            loss = self.l_dn * float(lam)
        elif self.l_dn is None or lam == 0.0:
            loss = self.l_nm
        else:
            loss = self.l_nm + self.l_dn * float(lam)
        return loss * (1.0 / float(self.n_pairs))

    def nm_nll_per_dim(self) -> float | None:
        """Per-dimension value of the likelihood term, the collapse indicator."""
        if self.l_nm is None:
            return None
        return float(self.l_nm.data) / (2.0 * self.n_dims)


def batch_terms(mode: str, noise_model, denoiser, a, b, clean=None, meta=None,
                rng: np.random.Generator | None = None,
                r2r_alpha: float = 0.5) -> BatchTerms:
    """Compute the mode's loss terms with each denoiser application done once."""
    if mode not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {mode!r}; pick one of {LOSS_MODES}")
    a = eng.as_tensor(a)
    b = eng.as_tensor(b)
    n_pairs = a.shape[0]
    n_dims = a.size

    if mode == "r2r":
        inp, tgt = r2r_corrupt(a.data, r2r_alpha, rng or np.random.default_rng())
        den = denoiser(Tensor(inp))
        l_nm = -1.0 * noise_model.log_prob(a, den, meta)
        l_dn = (Tensor(tgt) - den).square().sum()
        return BatchTerms(l_nm, l_dn, n_pairs, n_dims // 2)  # one image per record

    if mode == "supervised":
        if clean is None:
            raise ConfigError("supervised mode requires clean patches in the dataset")
        c = eng.as_tensor(clean)
        l_dn = (denoiser(a) - c).square().sum() + (denoiser(b) - c).square().sum()
        return BatchTerms(None, l_dn, n_pairs, n_dims)

    if mode == "supervised-nf":
        if clean is None:
            raise ConfigError("supervised-nf mode requires clean patches in the dataset")
        c = eng.as_tensor(clean)
        l_nm = -1.0 * (noise_model.log_prob(a, c, meta) + noise_model.log_prob(b, c, meta))
        return BatchTerms(l_nm, None, n_pairs, n_dims)

    # one conv pass over both sides of the pair
    den = denoiser(eng.concat([a, b], axis=0))
    den_a = eng.narrow(den, 0, 0, n_pairs)
    den_b = eng.narrow(den, 0, n_pairs, n_pairs)
    if mode == "n2n":
        return BatchTerms(None, noise2noise_cost(den_a, den_b, a, b), n_pairs, n_dims)

    l_dn = noise2noise_cost(den_a, den_b, a, b)
    if mode == "cross":
        l_nm = -1.0 * (noise_model.log_prob(a, den_b, meta) + noise_model.log_prob(b, den_a, meta))
    else:  # self
        l_nm = -1.0 * (noise_model.log_prob(a, den_a, meta) + noise_model.log_prob(b, den_b, meta))
    return BatchTerms(l_nm, l_dn, n_pairs, n_dims)
