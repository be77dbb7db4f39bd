"""Convergence and summary diagnostics for sampler output."""

import numpy as np


def split_rhat(chains):
    """Split-R-hat for one scalar across chains of equal length.

    ``chains`` is (n_chains, n_iter); each chain is split in half, so at
    least two chains (or one chain of length >= 4) are required.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2:
        raise ValueError("chains must be 2-D (n_chains, n_iter)")
    n = chains.shape[1] // 2
    if n < 2:
        raise ValueError("chains too short to split")
    seqs = np.concatenate([chains[:, :n], chains[:, n : 2 * n]], axis=0)
    means = seqs.mean(axis=1)
    W = float(np.mean(np.var(seqs, axis=1, ddof=1)))
    B = n * float(np.var(means, ddof=1))
    if W <= 0.0:
        return 1.0 if B <= 0.0 else float("inf")
    var_hat = (n - 1) / n * W + B / n
    return float(np.sqrt(var_hat / W))


def effective_sample_size(x):
    """ESS of one chain via the initial-positive-sequence autocorrelation sum."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    x = x - x.mean()
    var = float(np.dot(x, x)) / n
    if var <= 0:
        return float(n)
    acf = np.correlate(x, x, mode="full")[n - 1 :] / (n * var)
    s = 0.0
    for k in range(1, n - 1, 2):
        pair = acf[k] + acf[k + 1] if k + 1 < n else acf[k]
        if pair < 0:
            break
        s += pair
    return float(n / (1.0 + 2.0 * s))


def quantile_summary(draws, axis=0):
    """(median, 2.5th, 97.5th percentile) along the given axis."""
    q = np.percentile(draws, [50.0, 2.5, 97.5], axis=axis)
    return q[0], q[1], q[2]
