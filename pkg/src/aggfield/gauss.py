"""Inference for normal responses observed at points, over areas, or both.

The latent vector x = (w, beta0) is jointly Gaussian given hyperparameters,
so it is integrated out exactly through the sparse posterior precision
Q_post = blockdiag(Q(theta), 1/var_beta0) + P^T diag(N/sigma2) P with
P = [projector | 1]. Empirical Bayes then maximizes the resulting marginal
posterior of (logit sigma2, theta) and reports Hessian/delta-method
intervals.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import expit, logit
from scipy.stats import beta as beta_dist

from .linalg import SparseCholesky
from .spde import precision_matrix, theta_to_params
from .project import Projector, point_projector

LOG_2PI = float(np.log(2.0 * np.pi))


class FitError(RuntimeError):
    """Numerical failure during model fitting."""


@dataclass(frozen=True)
class NormalObs:
    """One normal observation: an average response with replication weight.

    ``weight`` is the household count behind the average (N at a point or in
    an area), so the observation variance is sigma2/weight. Real data files
    require weight >= 1; weight 0 marks a row as carrying no information and
    is dropped by the fit.
    """

    value: float
    weight: float
    obs_id: str = ""


@dataclass(frozen=True)
class GaussPriors:
    """Priors for the normal-response model."""

    beta0_mean: float = 0.0
    beta0_var: float = 100.0
    sigma2_beta: tuple = (2.0, 5.0)
    theta_mean: tuple = (-1.17, -0.0933)
    theta_cov: tuple = ((10.0, 0.0), (0.0, 10.0))

    def __post_init__(self):
        if self.beta0_var <= 0:
            raise ValueError("beta0_var must be positive")
        cov = np.asarray(self.theta_cov, dtype=float)
        if cov.shape != (2, 2) or np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValueError("theta_cov must be 2x2 SPD")


@dataclass
class LatentPosterior:
    """Gaussian posterior of x = (w, beta0) at fixed hyperparameters."""

    mean: np.ndarray  # (m + 1,)
    factor: SparseCholesky  # of Q_post
    P: sp.csr_matrix
    m: int

    @property
    def w_mean(self):
        return self.mean[: self.m]

    @property
    def beta0_mean(self):
        return float(self.mean[self.m])

    def marginal_sd(self):
        """Marginal posterior standard deviations of all m + 1 latent coords."""
        n = self.m + 1
        cols = self.factor.solve(np.eye(n))
        return np.sqrt(np.maximum(np.diag(cols), 0.0))


def _design(projector, n_obs):
    if projector.n_rows != n_obs:
        raise ValueError(
            f"projector has {projector.n_rows} rows but {n_obs} observations given"
        )
    ones = sp.csr_matrix(np.ones((n_obs, 1)))
    return sp.hstack([projector.matrix, ones]).tocsr()


def _active(obs):
    values = np.array([o.value for o in obs], dtype=float)
    weights = np.array([o.weight for o in obs], dtype=float)
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("observation weights must be finite and nonnegative")
    if not np.all(np.isfinite(values)):
        raise ValueError("observation values must be finite")
    return values, weights, weights > 0


def latent_posterior(obs, projector, fem, priors, sigma2, theta):
    """Exact posterior of (w, beta0) given hyperparameters (sigma2, theta)."""
    values, weights, keep = _active(obs)
    P = _design(projector, len(obs))[np.nonzero(keep)[0]]
    values, weights = values[keep], weights[keep]
    params = theta_to_params(theta)
    Q = precision_matrix(fem, params)
    m = Q.shape[0]
    Q_prior = sp.block_diag([Q, sp.csc_matrix([[1.0 / priors.beta0_var]])], format="csc")
    lam = weights / sigma2
    Q_post = (Q_prior + P.T @ sp.diags(lam) @ P).tocsc()
    factor = SparseCholesky(Q_post)
    m0 = np.zeros(m + 1)
    m0[m] = priors.beta0_mean
    b = P.T @ (lam * (values - P @ m0))
    mean = m0 + factor.solve(b)
    post = LatentPosterior(mean=mean, factor=factor, P=P, m=m)
    # stash pieces the marginal-likelihood computation shares
    post._prior_logdet = SparseCholesky(Q).logdet - np.log(priors.beta0_var)
    post._lam = lam
    post._resid = values - P @ m0
    post._b = b
    return post


def log_marginal(obs, projector, fem, priors, sigma2, theta):
    """Exact log marginal likelihood log p(y | sigma2, theta), x integrated out."""
    post = latent_posterior(obs, projector, fem, priors, sigma2, theta)
    lam, resid, b = post._lam, post._resid, post._b
    dev = post.mean - np.concatenate([np.zeros(post.m), [priors.beta0_mean]])
    quad = float(resid @ (lam * resid) - b @ dev)
    n = lam.size
    return 0.5 * (
        post._prior_logdet
        - post.factor.logdet
        + float(np.sum(np.log(lam)))
        - n * LOG_2PI
        - quad
    )


def _objective(obs, projector, fem, priors):
    theta_mean = np.asarray(priors.theta_mean, dtype=float)
    theta_prec = np.linalg.inv(np.asarray(priors.theta_cov, dtype=float))
    a_beta, b_beta = priors.sigma2_beta

    def fn(vec):
        eta = np.clip(vec[0], -35.0, 35.0)
        sigma2 = float(expit(eta))
        theta = vec[1:3]
        lml = log_marginal(obs, projector, fem, priors, sigma2, theta)
        d = theta - theta_mean
        lp_theta = -0.5 * float(d @ theta_prec @ d)
        lp_sigma = float(beta_dist.logpdf(sigma2, a_beta, b_beta))
        jac = float(np.log(sigma2) + np.log1p(-sigma2))  # d sigma2 / d eta
        return lml + lp_theta + lp_sigma + jac

    return fn


def _central_gradient(fn, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return g


def _central_hessian(fn, x, h=1e-4):
    k = x.size
    H = np.zeros((k, k))
    f0 = fn(x)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h
        H[i, i] = (fn(x + ei) - 2.0 * f0 + fn(x - ei)) / h**2
        for j in range(i + 1, k):
            ej = np.zeros(k)
            ej[j] = h
            H[i, j] = H[j, i] = (
                fn(x + ei + ej) - fn(x + ei - ej) - fn(x - ei + ej) + fn(x - ei - ej)
            ) / (4.0 * h**2)
    return H


@dataclass
class GaussianFit:
    """Empirical-Bayes fit of the normal-response model."""

    beta0: float
    beta0_interval: tuple
    sigma2: float
    sigma2_interval: tuple
    phi: float
    phi_interval: tuple
    lambda2: float
    lambda2_interval: tuple
    theta: np.ndarray
    w_mean: np.ndarray
    w_sd: np.ndarray
    log_marginal: float
    n_iter: int
    converged: bool
    intervals_valid: bool
    hessian: np.ndarray
    mesh: object = field(repr=False, default=None)
    posterior: LatentPosterior = field(repr=False, default=None)

    def summary_dict(self):
        return {
            "beta0": self.beta0,
            "beta0_interval": list(self.beta0_interval),
            "sigma2": self.sigma2,
            "sigma2_interval": list(self.sigma2_interval),
            "phi": self.phi,
            "phi_interval": list(self.phi_interval),
            "lambda2": self.lambda2,
            "lambda2_interval": list(self.lambda2_interval),
            "theta": [float(t) for t in self.theta],
            "log_marginal": self.log_marginal,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "intervals_valid": self.intervals_valid,
        }


Z975 = 1.959963984540054


def gaussian_fit(obs, projector, fem, priors=None, mesh=None, start=None):
    """Fit the normal model by maximizing the exact marginal posterior.

    Optimizes (logit sigma2, log tau, log kappa) by BFGS with central
    finite-difference gradients, then reports the latent posterior at the
    mode plus Hessian-based 95% intervals (delta method on the transformed
    scale for sigma2, phi, and lambda2).
    """
    if len(obs) < 2:
        raise ValueError("need at least two observations")
    priors = priors or GaussPriors()
    fn = _objective(obs, projector, fem, priors)

    if start is None:
        start = np.array([float(logit(0.2)), priors.theta_mean[0], priors.theta_mean[1]])
    neg = lambda v: -fn(v)
    res = minimize(
        neg,
        start,
        jac=lambda v: -_central_gradient(fn, v),
        method="BFGS",
        options={"gtol": 1e-6, "maxiter": 200},
    )
    grad_norm = float(np.max(np.abs(res.jac)))
    converged = bool(res.success or grad_norm < 1e-4)
    if not np.all(np.isfinite(res.x)):
        raise FitError(f"optimizer diverged at {res.x} (gradient norm {grad_norm:.3g})")

    vec = res.x
    sigma2 = float(expit(np.clip(vec[0], -35.0, 35.0)))
    theta = vec[1:3].copy()
    params = theta_to_params(theta)
    post = latent_posterior(obs, projector, fem, priors, sigma2, theta)
    lml = log_marginal(obs, projector, fem, priors, sigma2, theta)

    H = _central_hessian(fn, vec)
    intervals_valid = True
    try:
        cov = np.linalg.inv(-H)
        if np.any(np.diag(cov) <= 0):
            raise np.linalg.LinAlgError("nonpositive variance")
    except np.linalg.LinAlgError:
        intervals_valid = False
        cov = np.full((3, 3), np.nan)

    sd = post.marginal_sd()
    beta0 = post.beta0_mean
    beta0_sd = float(sd[post.m])
    beta0_iv = (beta0 - Z975 * beta0_sd, beta0 + Z975 * beta0_sd)

    if intervals_valid:
        se_eta = np.sqrt(cov[0, 0])
        sigma2_iv = (
            float(expit(vec[0] - Z975 * se_eta)),
            float(expit(vec[0] + Z975 * se_eta)),
        )
        # log phi = log sqrt(8) - theta2 and log lambda2 = -log(4 pi) - 2 theta1
        # - 2 theta2 are linear in theta, so the delta method is exact there.
        se_logphi = np.sqrt(cov[2, 2])
        phi_iv = (
            float(params.practical_range * np.exp(-Z975 * se_logphi)),
            float(params.practical_range * np.exp(Z975 * se_logphi)),
        )
        var_loglam = 4.0 * cov[1, 1] + 4.0 * cov[2, 2] + 8.0 * cov[1, 2]
        se_loglam = np.sqrt(max(var_loglam, 0.0))
        lambda2_iv = (
            float(params.lambda2 * np.exp(-Z975 * se_loglam)),
            float(params.lambda2 * np.exp(Z975 * se_loglam)),
        )
    else:
        sigma2_iv = phi_iv = lambda2_iv = (np.nan, np.nan)

    return GaussianFit(
        beta0=beta0,
        beta0_interval=beta0_iv,
        sigma2=sigma2,
        sigma2_interval=sigma2_iv,
        phi=params.practical_range,
        phi_interval=phi_iv,
        lambda2=params.lambda2,
        lambda2_interval=lambda2_iv,
        theta=theta,
        w_mean=post.w_mean.copy(),
        w_sd=sd[: post.m],
        log_marginal=lml,
        n_iter=int(res.nit),
        converged=converged,
        intervals_valid=intervals_valid,
        hessian=H,
        mesh=mesh,
        posterior=post,
    )


def predict_surface(fit, eval_points, weighting="invdist"):
    """Posterior mean and sd of beta0 + field at the evaluation points.

    The sd includes the full posterior covariance between beta0 and the mesh
    weights. Points outside the mesh hull raise.
    """
    if fit.mesh is None or fit.posterior is None:
        raise ValueError("fit carries no mesh/posterior; refit with mesh=...")
    proj = point_projector(fit.mesh, eval_points, weighting=weighting)
    n_eval = proj.n_rows
    P = _design(proj, n_eval)
    mean = np.asarray(P @ fit.posterior.mean).ravel()
    sds = np.empty(n_eval)
    chunk = 1024
    Pt = P.T.tocsc()
    for lo in range(0, n_eval, chunk):
        hi = min(lo + chunk, n_eval)
        rhs = np.asarray(Pt[:, lo:hi].todense())
        sol = fit.posterior.factor.solve(rhs)
        sds[lo:hi] = np.sqrt(np.maximum(np.einsum("ij,ij->j", rhs, sol), 0.0))
    return mean, sds


def mse_mae(w_hat, w_true, area_node_counts):
    """Mean squared and absolute error over stacked in-area mesh-node values."""
    w_hat = np.asarray(w_hat, dtype=float)
    w_true = np.asarray(w_true, dtype=float)
    if w_hat.shape != w_true.shape:
        raise ValueError(f"length mismatch: {w_hat.shape} vs {w_true.shape}")
    counts = np.asarray(area_node_counts, dtype=int)
    if counts.sum() != w_hat.size:
        raise ValueError(
            f"area node counts sum to {counts.sum()} but {w_hat.size} values given"
        )
    diff = w_hat - w_true
    return float(np.mean(diff**2)), float(np.mean(np.abs(diff)))


def load_observations(source):
    """Read observations.csv (id,kind,value,weight) into point and area groups."""
    rows = []
    with open(source, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "kind", "value", "weight"]:
            raise ValueError(f"{source}: expected header id,kind,value,weight")
        for r, row in enumerate(reader):
            kind = row["kind"]
            if kind not in ("point", "area"):
                raise ValueError(f"{source}: row {r} has kind {kind!r}, expected point|area")
            try:
                value = float(row["value"])
                weight = float(row["weight"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{source}: bad row {r}: {row}") from exc
            if weight < 1:
                raise ValueError(f"{source}: row {r} weight must be >= 1, got {weight}")
            rows.append((row["id"], kind, NormalObs(value=value, weight=weight, obs_id=row["id"])))
    if not rows:
        raise ValueError(f"{source}: no observations")
    return rows


def save_observations(rows, path):
    """Write (id, kind, NormalObs) triples in the observations.csv format."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "kind", "value", "weight"])
        for obs_id, kind, o in rows:
            w.writerow([obs_id, kind, repr(float(o.value)), repr(float(o.weight))])
