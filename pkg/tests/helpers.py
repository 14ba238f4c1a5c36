"""Finite-difference oracles shared by the gradient-checking tests."""

import numpy as np

from noisylab.engine import GradTape


def analytic_grads(build, params):
    """Gradients of the scalar build() w.r.t. params via the tape."""
    for p in params:
        p.grad = None
    with GradTape() as tape:
        loss = build()
        tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def fd_grads(build, params, step=1e-3, sample=None, rng=None):
    """Central finite differences of build() w.r.t. each param element.

    `sample` limits the check to that many randomly chosen elements per
    parameter (the rest of the returned array is NaN).  Run the model in
    float64: float32 round-off swamps a 1e-3 step.
    """
    grads = []
    for p in params:
        g = np.full_like(p.data, np.nan)
        flat_idx = np.arange(p.data.size)
        if sample is not None and p.data.size > sample:
            flat_idx = (rng or np.random.default_rng(0)).choice(
                p.data.size, size=sample, replace=False)
        for j in flat_idx:
            i = np.unravel_index(j, p.data.shape)
            orig = p.data[i]
            p.data[i] = orig + step
            fp = float(build().data)
            p.data[i] = orig - step
            fm = float(build().data)
            p.data[i] = orig
            g[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    """max |a-n| over checked elements, relative to the gradient scale."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        mask = ~np.isnan(n)
        if not mask.any():
            continue
        scale = max(np.abs(a[mask]).max(), np.abs(n[mask]).max(), 1e-8)
        worst = max(worst, float(np.abs(a[mask] - n[mask]).max() / scale))
    return worst
