"""Matern-field machinery: covariance, hyperparameter transforms, and the
sparse GMRF precision approximating the field on a mesh.

The smoothness is fixed at nu = 1 (alpha = 2 in the SPDE construction), so
the precision of the basis weights is Q = tau^2 (kappa^4 C + 2 kappa^2 G +
G C^{-1} G) and the hyperparameter vector is theta = (log tau, log kappa).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import k1

from .linalg import NotPositiveDefiniteError, SparseCholesky


@dataclass(frozen=True)
class SpdeParams:
    """Hyperparameters theta = (log tau, log kappa) and derived quantities."""

    log_tau: float
    log_kappa: float

    @property
    def tau(self):
        return float(np.exp(self.log_tau))

    @property
    def kappa(self):
        return float(np.exp(self.log_kappa))

    @property
    def lambda2(self):
        """Marginal variance of the field: 1 / (4 pi kappa^2 tau^2)."""
        return float(1.0 / (4.0 * np.pi * self.kappa**2 * self.tau**2))

    @property
    def practical_range(self):
        """Distance where the correlation falls to roughly 0.1: sqrt(8)/kappa."""
        return float(np.sqrt(8.0) / self.kappa)

    @property
    def theta(self):
        return np.array([self.log_tau, self.log_kappa])


def matern_cov(distance, kappa, lambda2):
    """Matern covariance with nu = 1: lambda2 * (kappa d) K_1(kappa d).

    Vectorized over ``distance``; the d = 0 limit is lambda2.
    """
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if lambda2 <= 0:
        raise ValueError(f"lambda2 must be positive, got {lambda2}")
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    x = kappa * d
    with np.errstate(invalid="ignore", over="ignore"):
        val = np.where(x > 0, x * k1(np.where(x > 0, x, 1.0)), 1.0)
    val = np.where(np.isfinite(val), val, 0.0)  # kv underflows to 0 at large x
    out = lambda2 * val
    return float(out) if np.isscalar(distance) else out


def practical_range(kappa):
    """sqrt(8 nu)/kappa with nu = 1."""
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    return float(np.sqrt(8.0) / kappa)


def theta_to_params(theta):
    """(log tau, log kappa) -> SpdeParams with kappa, tau, lambda2, range."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (2,) or not np.all(np.isfinite(theta)):
        raise ValueError(f"theta must be two finite components, got {theta}")
    return SpdeParams(log_tau=float(theta[0]), log_kappa=float(theta[1]))


def params_to_theta(lambda2, phi):
    """Invert the transform: marginal variance and practical range -> theta."""
    if lambda2 <= 0 or phi <= 0:
        raise ValueError(f"lambda2 and phi must be positive, got {lambda2}, {phi}")
    kappa = np.sqrt(8.0) / phi
    tau = 1.0 / (2.0 * np.sqrt(np.pi) * kappa * np.sqrt(lambda2))
    return np.array([np.log(tau), np.log(kappa)])


class SparsePrecision:
    """GMRF precision Q(theta) on a mesh, with a cached Cholesky factor."""

    def __init__(self, Q, params):
        self.Q = Q
        self.params = params
        self.factor = SparseCholesky(Q)

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def logdet(self):
        return self.factor.logdet


def precision_matrix(fem, params):
    """Assemble Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G), unfactorized."""
    with np.errstate(over="ignore"):
        kappa2 = np.float64(params.kappa) ** 2
        tau2 = np.float64(params.tau) ** 2
        scales = np.array([tau2 * kappa2**2, tau2 * kappa2, tau2])
    if not np.all(np.isfinite(scales)):
        raise NotPositiveDefiniteError(
            f"hyperparameters overflow float64: theta = {params.theta}"
        )
    c_inv = sp.diags(1.0 / fem.C_diag())
    gcg = (fem.G @ c_inv @ fem.G).tocsc()
    Q = tau2 * (kappa2**2 * fem.C + 2.0 * kappa2 * fem.G + gcg)
    return ((Q + Q.T) * 0.5).tocsc()


def build_precision(fem, params):
    """Assemble and factorize the GMRF precision for the given hyperparameters."""
    return SparsePrecision(precision_matrix(fem, params), params)


def sample_gmrf(precision, rng, n_samples=1):
    """Draw columns w ~ N(0, Q^{-1}) by a half-solve through the Cholesky factor.

    Returns an (m, n_samples) array; deterministic for a seeded generator.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    z = rng.standard_normal((precision.n, n_samples))
    return precision.factor.half_solve_t(z)
