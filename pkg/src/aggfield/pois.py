"""Poisson area-count inference on the mesh field.

Counts per area follow Y_i ~ Poisson(E_i exp(beta0) D_i' T) with
T = exp(w) elementwise. Provides the negative log posterior and its
gradients in both the (w, beta0) and the shifted w* = w + beta0
parameterizations, Laplace-approximated marginals for empirical Bayes, a
leapfrog HMC transition, the hybrid EB-then-HMC sampler, the fully Bayesian
random-walk-plus-HMC sampler, and relative-risk aggregation.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .diagnostics import split_rhat
from .linalg import NotPositiveDefiniteError, SparseCholesky
from .spde import build_precision, theta_to_params

Z975 = 1.959963984540054


class NumericalError(RuntimeError):
    """Non-finite value encountered where a finite one is required."""


class FitError(RuntimeError):
    """Optimizer or sampler failure."""


@dataclass(frozen=True)
class PoissonAreaData:
    """Observed counts, expected counts (or exposures), and the D projector."""

    counts: np.ndarray
    expecteds: np.ndarray
    projector: object  # area Projector

    def __post_init__(self):
        y = np.asarray(self.counts, dtype=float).ravel()
        e = np.asarray(self.expecteds, dtype=float).ravel()
        if y.shape != e.shape:
            raise ValueError("counts and expecteds must have equal length")
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError("counts must be nonnegative integers")
        if np.any(e <= 0):
            raise ValueError("expected counts must be strictly positive")
        object.__setattr__(self, "counts", y)
        object.__setattr__(self, "expecteds", e)

    @property
    def n(self):
        return self.counts.size

    @property
    def D(self):
        return self.projector.matrix


@dataclass(frozen=True)
class PoissonPriors:
    """Priors for the count model; theta prior is only used by full Bayes."""

    beta0_var: float = 100.0
    theta_mean: tuple = (3.24, -4.51)
    theta_cov: tuple = ((10.0, 0.0), (0.0, 10.0))


@dataclass(frozen=True)
class HmcConfig:
    """Sampler configuration shared by the hybrid and fully Bayesian fits."""

    step_size: float = 0.05
    n_leapfrog: int = 25
    mass: np.ndarray | None = None  # diagonal; None = identity
    chains: int = 4
    burnin: int = 500
    n_keep: int = 1000
    thin: int = 1
    rw_scale: float = 1.0
    pilot: int = 300
    adapt: bool = True

    def __post_init__(self):
        if self.step_size <= 0 or self.n_leapfrog < 1:
            raise ValueError("step_size must be positive and n_leapfrog >= 1")
        if self.mass is not None and np.any(np.asarray(self.mass) <= 0):
            raise ValueError("mass diagonal must be positive")
        if self.chains < 1 or self.burnin < 0 or self.n_keep < 1 or self.thin < 1:
            raise ValueError("invalid chain/burnin/thinning configuration")
        if self.rw_scale < 0:
            raise ValueError("rw_scale must be nonnegative")


@dataclass
class SampleSet:
    """Kept draws per chain, with acceptance rates and split-R-hat values."""

    beta0: np.ndarray  # (chains, n_keep)
    w: np.ndarray  # (chains, n_keep, m)
    theta: np.ndarray | None  # (chains, n_keep, 2) for full Bayes
    acceptance: dict
    rhat: dict
    extras: dict = field(default_factory=dict)

    @property
    def n_chains(self):
        return self.beta0.shape[0]

    def pooled_beta0(self):
        return self.beta0.reshape(-1)

    def pooled_w(self):
        return self.w.reshape(-1, self.w.shape[-1])

    def pooled_theta(self):
        return None if self.theta is None else self.theta.reshape(-1, 2)

    def convergence_warnings(self, threshold=1.05):
        return {k: v for k, v in self.rhat.items() if np.isfinite(v) and v > threshold}


def _finite_or_raise(arr, what):
    bad = ~np.isfinite(np.atleast_1d(arr))
    if np.any(bad):
        idx = int(np.nonzero(bad.ravel())[0][0])
        raise NumericalError(f"non-finite {what} at index {idx}")


def _terms(w, data):
    with np.errstate(over="ignore", invalid="ignore"):
        T = np.exp(w)
        DT = data.D @ T
    return T, DT


def neg_log_posterior(w, beta0, Q, data, prior_var_beta0=100.0):
    """U = -beta0 y'1 - y'log(DT) + exp(beta0) E'DT + w'Qw/2 + beta0^2/(2 s2).

    Additive constants that involve only the data are omitted.
    """
    w = np.asarray(w, dtype=float)
    T, DT = _terms(w, data)
    _finite_or_raise(T, "exp(w)")
    if np.any(DT <= 0):
        idx = int(np.nonzero(DT <= 0)[0][0])
        raise NumericalError(f"nonpositive area mean at index {idx}")
    y, E = data.counts, data.expecteds
    with np.errstate(over="ignore", invalid="ignore"):
        val = (
            -beta0 * y.sum()
            - float(y @ np.log(DT))
            + float(np.exp(beta0) * (E @ DT))
            + 0.5 * float(w @ (Q @ w))
            + 0.5 * beta0**2 / prior_var_beta0
        )
    _finite_or_raise(val, "posterior value")
    return val


def grad_neg_log_posterior(w, beta0, Q, data, prior_var_beta0=100.0):
    """Gradient of U: (dU/dbeta0, dU/dw)."""
    w = np.asarray(w, dtype=float)
    T, DT = _terms(w, data)
    _finite_or_raise(T, "exp(w)")
    y, E = data.counts, data.expecteds
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        eb = np.exp(beta0)
        r = eb * E - y / DT
        g_w = Q @ w + T * (data.D.T @ r)
        g_b = -y.sum() + eb * float(E @ DT) + beta0 / prior_var_beta0
    _finite_or_raise(g_w, "gradient")
    _finite_or_raise(g_b, "gradient")
    return float(g_b), g_w


def neg_log_posterior_star(w_star, beta0, Q, data, prior_var_beta0=100.0):
    """U in the shifted parameterization w* = w + beta0, T* = exp(w*)."""
    w_star = np.asarray(w_star, dtype=float)
    T, DT = _terms(w_star, data)
    _finite_or_raise(T, "exp(w*)")
    if np.any(DT <= 0):
        idx = int(np.nonzero(DT <= 0)[0][0])
        raise NumericalError(f"nonpositive area mean at index {idx}")
    y, E = data.counts, data.expecteds
    dev = w_star - beta0
    with np.errstate(over="ignore", invalid="ignore"):
        val = (
            -float(y @ np.log(DT))
            + float(E @ DT)
            + 0.5 * float(dev @ (Q @ dev))
            + 0.5 * beta0**2 / prior_var_beta0
        )
    _finite_or_raise(val, "posterior value")
    return val


def grad_star(w_star, beta0, Q, data, prior_var_beta0=100.0):
    """Gradient of the shifted U: (dU/dbeta0, dU/dw*)."""
    w_star = np.asarray(w_star, dtype=float)
    T, DT = _terms(w_star, data)
    _finite_or_raise(T, "exp(w*)")
    y, E = data.counts, data.expecteds
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        Qdev = Q @ (w_star - beta0)
        g_w = T * (data.D.T @ (E - y / DT)) + Qdev
        g_b = -float(Qdev.sum()) + beta0 / prior_var_beta0
    _finite_or_raise(g_w, "gradient")
    _finite_or_raise(g_b, "gradient")
    return float(g_b), g_w


# ---------------------------------------------------------------------------
# Laplace approximation of the latent integral
# ---------------------------------------------------------------------------


class _PoissonTerms:
    """Likelihood terms of U as a function of the latent vector.

    ``joint=True`` treats z = (w, beta0); otherwise z = w at fixed beta0.
    """

    def __init__(self, data, beta0=None, joint=False):
        self.data = data
        self.beta0 = beta0
        self.joint = joint

    def _split(self, z):
        if self.joint:
            return z[:-1], float(z[-1])
        return z, self.beta0

    def value(self, z):
        w, b = self._split(z)
        T = np.exp(w)
        DT = self.data.D @ T
        if np.any(DT <= 0) or not np.all(np.isfinite(DT)):
            return np.inf
        y, E = self.data.counts, self.data.expecteds
        return -b * y.sum() - float(y @ np.log(DT)) + float(np.exp(b) * (E @ DT))

    def grad(self, z):
        w, b = self._split(z)
        T = np.exp(w)
        DT = self.data.D @ T
        y, E = self.data.counts, self.data.expecteds
        eb = np.exp(b)
        g_w = T * (self.data.D.T @ (eb * E - y / DT))
        if not self.joint:
            return g_w
        g_b = -y.sum() + eb * float(E @ DT)
        return np.concatenate([g_w, [g_b]])

    def hess(self, z):
        w, b = self._split(z)
        T = np.exp(w)
        D = self.data.D
        DT = D @ T
        y, E = self.data.counts, self.data.expecteds
        eb = np.exp(b)
        r = eb * E - y / DT
        B = D @ sp.diags(T)
        H_ww = (
            sp.diags(T * (D.T @ r))
            + B.T @ sp.diags(y / DT**2) @ B
        ).tocsc()
        if not self.joint:
            return H_ww
        h_wb = eb * (B.T @ E)
        h_bb = eb * float(E @ DT)
        return sp.bmat(
            [[H_ww, sp.csc_matrix(h_wb[:, None])],
             [sp.csc_matrix(h_wb[None, :]), sp.csc_matrix([[h_bb]])]],
            format="csc",
        )


def _newton_inner(terms, prior_prec, init, tol=1e-8, max_iter=60):
    """Minimize terms.value(z) + z' prior_prec z / 2 by damped Newton.

    Backtracking Armijo line search globalizes the steps; once the objective
    reaches its floating-point floor the full Newton step is accepted
    whenever it still shrinks the gradient, which polishes the mode well
    below the floor of the objective itself.
    """
    z = np.asarray(init, dtype=float).copy()
    obj = lambda v: terms.value(v) + 0.5 * float(v @ (prior_prec @ v))
    grad = lambda v: terms.grad(v) + prior_prec @ v
    f = obj(z)
    if not np.isfinite(f):
        raise FitError("inner optimization started at a non-finite point")
    for _ in range(max_iter):
        g = grad(z)
        gnorm = float(np.max(np.abs(g)))
        if gnorm < tol:
            break
        H = (terms.hess(z) + prior_prec).tocsc()
        rho = 0.0
        while True:
            try:
                step = SparseCholesky(H if rho == 0 else H + rho * sp.identity(H.shape[0], format="csc")).solve(-g)
                break
            except NotPositiveDefiniteError:
                rho = max(2.0 * rho, 1e-6 * float(np.abs(H.diagonal()).max()))
                if rho > 1e12:
                    raise FitError("inner Hessian could not be regularized")
        if gnorm < 1e4 * tol:
            # quadratic basin: the objective sits at its float floor before
            # the gradient does, so polish with full steps judged by the
            # gradient norm alone
            z_try = z + step
            g_try = grad(z_try)
            if np.all(np.isfinite(g_try)) and float(np.max(np.abs(g_try))) < 0.5 * gnorm:
                z, f = z_try, obj(z_try)
                continue
            break
        alpha = 1.0
        while alpha > 1e-12:
            z_new = z + alpha * step
            f_new = obj(z_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * alpha * float(g @ step):
                break
            alpha *= 0.5
        else:
            raise FitError(f"inner Newton line search failed (grad norm {gnorm:.3g})")
        z, f = z_new, f_new
    else:
        raise FitError(f"inner Newton did not converge (grad norm {gnorm:.3g})")
    return z, f


def _laplace_value(terms, prior_prec, prior_logdet, init):
    """Laplace approximation of log integral exp(-value - quad) with prior.

    Returns (value, mode). The approximation is -F(zhat) + prior_logdet/2
    - logdet(H)/2 with H the Hessian of F at the mode; the (2 pi) factors
    from the Gaussian prior normalizer and the Laplace volume cancel.
    """
    mode, f_mode = _newton_inner(terms, prior_prec, init)
    H = (terms.hess(mode) + prior_prec).tocsc()
    try:
        h_fac = SparseCholesky(H)
    except NotPositiveDefiniteError as exc:
        raise FitError(f"Hessian at the inner mode is not positive definite: {exc}") from exc
    return -f_mode + 0.5 * prior_logdet - 0.5 * h_fac.logdet, mode


def laplace_log_marginal(
    theta, data, fem, priors=None, integrate_beta0=False, beta0=None, init=None
):
    """Laplace-approximated log marginal of the data at hyperparameters theta.

    With ``integrate_beta0`` the intercept is integrated under its normal
    prior along with w; otherwise ``beta0`` is held fixed and only w is
    integrated. Additive constants involving only the data are omitted, as
    in ``neg_log_posterior``.
    """
    priors = priors or PoissonPriors()
    prec = build_precision(fem, theta_to_params(theta))
    m = prec.n
    if integrate_beta0:
        terms = _PoissonTerms(data, joint=True)
        prior_prec = sp.block_diag(
            [prec.Q, sp.csc_matrix([[1.0 / priors.beta0_var]])], format="csc"
        )
        prior_logdet = prec.logdet - np.log(priors.beta0_var)
        if init is None:
            init = np.concatenate(
                [np.zeros(m), [np.log(data.counts.sum() / data.expecteds.sum())]]
            )
    else:
        if beta0 is None:
            raise ValueError("beta0 is required when it is not integrated out")
        terms = _PoissonTerms(data, beta0=beta0)
        prior_prec = prec.Q
        prior_logdet = prec.logdet
        if init is None:
            init = np.zeros(m)
    value, _ = _laplace_value(terms, prior_prec, prior_logdet, init)
    return value


@dataclass
class PoissonEbFit:
    """Empirical-Bayes estimates for the count model."""

    theta: np.ndarray
    beta0: float
    cov: np.ndarray  # 3x3 over (log tau, log kappa, beta0)
    exp_beta0: float
    exp_beta0_interval: tuple
    phi: float
    phi_interval: tuple
    lambda2: float
    lambda2_interval: tuple
    w_mode: np.ndarray
    log_marginal: float
    n_iter: int
    converged: bool

    @property
    def theta_cov(self):
        return self.cov[:2, :2]

    def summary_dict(self):
        return {
            "theta": [float(t) for t in self.theta],
            "beta0": self.beta0,
            "exp_beta0": self.exp_beta0,
            "exp_beta0_interval": list(self.exp_beta0_interval),
            "phi": self.phi,
            "phi_interval": list(self.phi_interval),
            "lambda2": self.lambda2,
            "lambda2_interval": list(self.lambda2_interval),
            "log_marginal": self.log_marginal,
            "n_iter": self.n_iter,
            "converged": self.converged,
        }


def _fd_gradient(fn, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return g


def _fd_hessian(fn, x, h=1e-4):
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


def _interval_from_log_scale(est, se):
    with np.errstate(over="ignore"):
        return (float(est * np.exp(-Z975 * se)), float(est * np.exp(Z975 * se)))


def fit_eb(data, fem, priors=None, start=None):
    """Empirical Bayes: maximize the Laplace marginal over (theta, beta0).

    Flat priors on theta and beta0 make the estimates maximum likelihood;
    intervals for exp(beta0), the practical range, and the marginal variance
    come from the Hessian via the delta method on the log scale.
    """
    if data.n < 2:
        raise ValueError("need at least two areas")
    priors = priors or PoissonPriors()
    m = data.D.shape[1]
    pooled = float(np.log(data.counts.sum() / data.expecteds.sum()))
    state = {"init": None}

    def objective(vec):
        theta, b0 = vec[:2], float(vec[2])
        try:
            prec = build_precision(fem, theta_to_params(theta))
        except NotPositiveDefiniteError:
            return -np.inf, None
        terms = _PoissonTerms(data, beta0=b0)
        init = state["init"] if state["init"] is not None else np.zeros(m)
        try:
            value, mode = _laplace_value(terms, prec.Q, prec.logdet, init)
        except FitError:
            try:
                value, mode = _laplace_value(terms, prec.Q, prec.logdet, np.zeros(m))
            except FitError:
                return -np.inf, None
        state["init"] = mode
        return value, mode

    fn = lambda v: objective(v)[0]
    if start is None:
        start = np.concatenate([_default_theta_start(fem), [pooled]])
    res = minimize(
        lambda v: -fn(v),
        np.asarray(start, dtype=float),
        jac=lambda v: -_fd_gradient(fn, v),
        method="BFGS",
        options={"gtol": 1e-6, "maxiter": 200},
    )
    grad_norm = float(np.max(np.abs(res.jac)))
    converged = bool(res.success or grad_norm < 1e-3)
    if not converged and not np.all(np.isfinite(res.x)):
        raise FitError(f"EB optimizer diverged (last iterate {res.x})")

    theta = res.x[:2].copy()
    beta0 = float(res.x[2])
    value, mode = objective(res.x)
    if mode is None:
        raise FitError(f"EB objective not evaluable at the optimum {res.x}")
    H = _fd_hessian(fn, res.x)
    try:
        cov = np.linalg.inv(-H)
        if np.any(np.diag(cov) <= 0):
            raise np.linalg.LinAlgError("nonpositive variance")
    except np.linalg.LinAlgError:
        cov = np.full((3, 3), np.nan)

    params = theta_to_params(theta)
    se_b = float(np.sqrt(cov[2, 2])) if np.isfinite(cov[2, 2]) else np.nan
    se_logphi = float(np.sqrt(cov[1, 1])) if np.isfinite(cov[1, 1]) else np.nan
    var_loglam = 4.0 * cov[0, 0] + 4.0 * cov[1, 1] + 8.0 * cov[0, 1]
    se_loglam = float(np.sqrt(var_loglam)) if var_loglam > 0 else np.nan
    return PoissonEbFit(
        theta=theta,
        beta0=beta0,
        cov=cov,
        exp_beta0=float(np.exp(beta0)),
        exp_beta0_interval=_interval_from_log_scale(np.exp(beta0), se_b),
        phi=params.practical_range,
        phi_interval=_interval_from_log_scale(params.practical_range, se_logphi),
        lambda2=params.lambda2,
        lambda2_interval=_interval_from_log_scale(params.lambda2, se_loglam),
        w_mode=mode,
        log_marginal=value,
        n_iter=int(res.nit),
        converged=converged,
    )


def _default_theta_start(fem):
    # practical range near a quarter of the mesh diagonal, marginal variance 1
    from .spde import params_to_theta

    c = fem.C_diag()
    span = np.sqrt(c.sum())  # length scale of the meshed region
    return params_to_theta(1.0, 0.25 * span * np.sqrt(2.0))


# ---------------------------------------------------------------------------
# Hamiltonian Monte Carlo
# ---------------------------------------------------------------------------


def hmc_chain(U, gradU, init, config, rng, n_iter=None, adapt_eps=False, collect=True):
    """Run an HMC chain with a leapfrog integrator and diagonal mass matrix.

    Returns (draws, acceptance_rate, final_state, final_step_size). Draws
    are collected every ``config.thin`` iterations when ``collect`` is true.
    Non-finite Hamiltonians reject the proposal. With ``adapt_eps`` the step
    size halves or doubles every 25 iterations to keep acceptance in the
    0.6-0.9 window (burn-in style tuning).
    """
    z = np.asarray(init, dtype=float).copy()
    d = z.size
    mass = np.ones(d) if config.mass is None else np.asarray(config.mass, dtype=float)
    if mass.shape != (d,):
        raise ValueError(f"mass diagonal has shape {mass.shape}, expected ({d},)")
    sqrt_mass = np.sqrt(mass)
    inv_mass = 1.0 / mass
    eps = float(config.step_size)
    n_iter = config.n_keep * config.thin if n_iter is None else n_iter

    def _u(v):
        try:
            val = U(v)
        except NumericalError:
            return np.inf
        return val if np.isfinite(val) else np.inf

    def _g(v):
        try:
            return gradU(v)
        except NumericalError:
            return None

    draws = []
    accepts = 0
    window_accepts = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        u_cur = _u(z)
        for it in range(n_iter):
            p = sqrt_mass * rng.standard_normal(d)
            h_cur = u_cur + 0.5 * float(p @ (inv_mass * p))
            z_new = z.copy()
            p_new = p.copy()
            ok = True
            g = _g(z_new)
            if g is None:
                ok = False
            else:
                p_new = p_new - 0.5 * eps * g
                for step in range(config.n_leapfrog):
                    z_new = z_new + eps * inv_mass * p_new
                    g = _g(z_new)
                    if g is None or not np.all(np.isfinite(g)):
                        ok = False
                        break
                    p_new = p_new - (eps if step < config.n_leapfrog - 1 else 0.5 * eps) * g
            if ok:
                u_new = _u(z_new)
                h_new = u_new + 0.5 * float(p_new @ (inv_mass * p_new))
                log_alpha = h_cur - h_new
            else:
                log_alpha = -np.inf
            if np.isfinite(log_alpha) and np.log(rng.uniform()) < log_alpha:
                z = z_new
                u_cur = u_new
                accepts += 1
                window_accepts += 1
            if collect and (it + 1) % config.thin == 0:
                draws.append(z.copy())
            if adapt_eps and (it + 1) % 25 == 0:
                rate = window_accepts / 25.0
                if rate > 0.9:
                    eps *= 2.0
                elif rate < 0.6:
                    eps *= 0.5
                window_accepts = 0
    rate = accepts / max(n_iter, 1)
    return np.asarray(draws), rate, z, eps


def _monitored_components(m, rng, k=5):
    k = min(k, m)
    return np.sort(rng.choice(m, size=k, replace=False))


def _run_chains(worker, n_chains, seed, n_threads):
    seqs = np.random.SeedSequence(seed).spawn(n_chains)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(worker, range(n_chains), seqs))
    else:
        results = [worker(c, s) for c, s in zip(range(n_chains), seqs)]
    return results


def fit_hybrid(data, fem, priors=None, config=None, seed=0, n_threads=1, eb_start=None):
    """Hybrid fit: EB point estimate of theta, then HMC over (w*, beta0).

    Stage one maximizes the Laplace marginal with beta0 integrated under its
    normal prior. Stage two samples the shifted parameterization at fixed
    theta-hat, estimating the diagonal mass from a pilot run with identity
    mass, then running burn-in plus kept iterations per chain.
    """
    priors = priors or PoissonPriors()
    config = config or HmcConfig()
    m = data.D.shape[1]

    state = {"init": None}

    def marginal(theta):
        init = state["init"]
        try:
            prec = build_precision(fem, theta_to_params(theta))
        except NotPositiveDefiniteError:
            return -np.inf
        prior_prec = sp.block_diag(
            [prec.Q, sp.csc_matrix([[1.0 / priors.beta0_var]])], format="csc"
        )
        prior_logdet = prec.logdet - np.log(priors.beta0_var)
        terms = _PoissonTerms(data, joint=True)
        if init is None:
            init = np.concatenate(
                [np.zeros(m), [np.log(data.counts.sum() / data.expecteds.sum())]]
            )
        try:
            value, mode = _laplace_value(terms, prior_prec, prior_logdet, init)
        except FitError:
            return -np.inf
        state["init"] = mode
        return value

    if eb_start is None:
        eb_start = _default_theta_start(fem)
    res = minimize(
        lambda v: -marginal(v),
        np.asarray(eb_start, dtype=float),
        jac=lambda v: -_fd_gradient(marginal, v),
        method="BFGS",
        options={"gtol": 1e-6, "maxiter": 200},
    )
    theta_hat = res.x.copy()
    if not np.all(np.isfinite(theta_hat)):
        raise FitError("hybrid stage-one optimization diverged")
    H2 = _fd_hessian(marginal, theta_hat)
    try:
        theta_cov = np.linalg.inv(-H2)
    except np.linalg.LinAlgError:
        theta_cov = np.full((2, 2), np.nan)
    state["init"] = None
    if not np.isfinite(marginal(theta_hat)):
        raise FitError(f"hybrid marginal not evaluable at theta-hat {theta_hat}")
    mode = state["init"]

    prec = build_precision(fem, theta_to_params(theta_hat))
    Q = prec.Q
    var_b = priors.beta0_var

    def U(z):
        return neg_log_posterior_star(z[:-1], float(z[-1]), Q, data, var_b)

    def gradU(z):
        g_b, g_w = grad_star(z[:-1], float(z[-1]), Q, data, var_b)
        return np.concatenate([g_w, [g_b]])

    w_mode, b_mode = mode[:m], float(mode[m])
    init = np.concatenate([w_mode + b_mode, [b_mode]])

    def chain_worker(chain_index, seq):
        rng = np.random.default_rng(seq)
        pilot_cfg = replace(config, mass=None, thin=1)
        pilot_draws, _, z1, eps1 = hmc_chain(
            U, gradU, init, pilot_cfg, rng, n_iter=config.pilot,
            adapt_eps=config.adapt, collect=True,
        )
        half = pilot_draws[pilot_draws.shape[0] // 2 :]
        var = np.var(half, axis=0)
        # floor variances relative to the median so no coordinate freezes
        positive = var[var > 0]
        floor = 1e-4 * float(np.median(positive)) if positive.size else 1e-8
        var = np.maximum(var, max(floor, 1e-10))
        mass = 1.0 / var if config.mass is None else np.asarray(config.mass)
        main_cfg = replace(config, mass=mass, step_size=eps1)
        _, _, z2, eps2 = hmc_chain(
            U, gradU, z1, main_cfg, rng, n_iter=config.burnin,
            adapt_eps=config.adapt, collect=False,
        )
        kept_cfg = replace(main_cfg, step_size=eps2)
        draws, rate, _, _ = hmc_chain(
            U, gradU, z2, kept_cfg, rng, n_iter=config.n_keep * config.thin,
            adapt_eps=False, collect=True,
        )
        return draws, rate

    results = _run_chains(chain_worker, config.chains, seed, n_threads)
    all_draws = np.stack([r[0] for r in results])  # (chains, n_keep, m + 1)
    rates = [r[1] for r in results]

    beta0 = all_draws[:, :, -1]
    w = all_draws[:, :, :-1] - beta0[:, :, None]  # back from w* to w

    rhat = {}
    if config.chains >= 2:
        rhat["beta0"] = split_rhat(beta0)
        mon = _monitored_components(m, np.random.default_rng(np.random.SeedSequence(seed)))
        for k in mon:
            rhat[f"w_{k}"] = split_rhat(w[:, :, k])

    params = theta_to_params(theta_hat)
    se_logphi = float(np.sqrt(theta_cov[1, 1])) if np.isfinite(theta_cov[1, 1]) else np.nan
    var_loglam = 4.0 * theta_cov[0, 0] + 4.0 * theta_cov[1, 1] + 8.0 * theta_cov[0, 1]
    se_loglam = float(np.sqrt(var_loglam)) if var_loglam > 0 else np.nan
    extras = {
        "theta_hat": theta_hat,
        "theta_cov": theta_cov,
        "phi": params.practical_range,
        "phi_interval": _interval_from_log_scale(params.practical_range, se_logphi),
        "lambda2": params.lambda2,
        "lambda2_interval": _interval_from_log_scale(params.lambda2, se_loglam),
        "stage1_n_iter": int(res.nit),
    }
    return SampleSet(
        beta0=beta0,
        w=w,
        theta=None,
        acceptance={"hmc": float(np.mean(rates))},
        rhat=rhat,
        extras=extras,
    )


def fit_full_bayes(
    data, fem, priors=None, config=None, seed=0, n_threads=1,
    eb=None, use_wstar=False,
):
    """Fully Bayesian fit: random-walk Metropolis on theta, HMC on (w, beta0).

    The theta proposal is N(theta, c * Sigma_EB) with Sigma_EB from the EB
    fit (computed here when not supplied); theta gets a normal prior and the
    precision is refactorized for every accepted proposal. ``use_wstar``
    switches the HMC block to the shifted parameterization.
    """
    priors = priors or PoissonPriors()
    config = config or HmcConfig()
    if eb is None:
        eb = fit_eb(data, fem, priors)
    theta0 = eb.theta.copy()
    sigma_eb = eb.theta_cov
    if not np.all(np.isfinite(sigma_eb)):
        sigma_eb = np.eye(2) * 0.1
    vals, vecs = np.linalg.eigh(sigma_eb)
    base_chol = vecs @ np.diag(np.sqrt(np.maximum(vals, 1e-12)))

    theta_mean = np.asarray(priors.theta_mean, dtype=float)
    theta_prec = np.linalg.inv(np.asarray(priors.theta_cov, dtype=float))
    m = data.D.shape[1]
    var_b = priors.beta0_var

    def log_prior_theta(theta):
        d = theta - theta_mean
        return -0.5 * float(d @ theta_prec @ d)

    if use_wstar:
        U_fn, grad_fn = neg_log_posterior_star, grad_star
    else:
        U_fn, grad_fn = neg_log_posterior, grad_neg_log_posterior

    b_start = eb.beta0
    w_start = eb.w_mode.copy()
    z_init = np.concatenate([w_start + b_start if use_wstar else w_start, [b_start]])

    def chain_worker(chain_index, seq):
        rng = np.random.default_rng(seq)
        theta = theta0.copy()
        prec = build_precision(fem, theta_to_params(theta))
        z = z_init.copy()
        eps = config.step_size
        c = config.rw_scale
        mass = config.mass
        n_total = config.burnin + config.n_keep * config.thin
        kept_b, kept_w, kept_t = [], [], []
        rw_accepts = 0
        hmc_accepts = 0
        window = [0, 0]  # rw, hmc accepts in the current adaptation window
        for it in range(n_total):
            # random-walk update of theta
            prop = theta + np.sqrt(c) * (base_chol @ rng.standard_normal(2))
            w_cur = z[:-1] - z[-1] if use_wstar else z[:-1]
            try:
                prec_prop = build_precision(fem, theta_to_params(prop))
                log_ratio = (
                    0.5 * prec_prop.logdet
                    - 0.5 * float(w_cur @ (prec_prop.Q @ w_cur))
                    + log_prior_theta(prop)
                    - 0.5 * prec.logdet
                    + 0.5 * float(w_cur @ (prec.Q @ w_cur))
                    - log_prior_theta(theta)
                )
            except (NotPositiveDefiniteError, OverflowError, NumericalError):
                log_ratio = -np.inf
            if np.isfinite(log_ratio) and np.log(rng.uniform()) < log_ratio:
                theta = prop
                prec = prec_prop
                rw_accepts += 1
                window[0] += 1

            Q = prec.Q
            hmc_cfg = replace(config, mass=mass, step_size=eps, thin=1)
            U = lambda v: U_fn(v[:-1], float(v[-1]), Q, data, var_b)

            def gradU(v):
                g_b, g_w = grad_fn(v[:-1], float(v[-1]), Q, data, var_b)
                return np.concatenate([g_w, [g_b]])

            draws, rate, z, _ = hmc_chain(
                U, gradU, z, hmc_cfg, rng, n_iter=1, adapt_eps=False, collect=False
            )
            if rate > 0:
                hmc_accepts += 1
                window[1] += 1

            if config.adapt and it < config.burnin and (it + 1) % 25 == 0:
                if window[1] / 25.0 > 0.9:
                    eps *= 2.0
                elif window[1] / 25.0 < 0.6:
                    eps *= 0.5
                if c > 0:
                    if window[0] / 25.0 > 0.5:
                        c *= 2.0
                    elif window[0] / 25.0 < 0.15:
                        c *= 0.5
                window = [0, 0]

            if it >= config.burnin and (it - config.burnin + 1) % config.thin == 0:
                b = float(z[-1])
                kept_b.append(b)
                kept_w.append((z[:-1] - b).copy() if use_wstar else z[:-1].copy())
                kept_t.append(theta.copy())
        return (
            np.asarray(kept_b),
            np.asarray(kept_w),
            np.asarray(kept_t),
            rw_accepts / n_total,
            hmc_accepts / n_total,
        )

    results = _run_chains(chain_worker, config.chains, seed, n_threads)
    beta0 = np.stack([r[0] for r in results])
    w = np.stack([r[1] for r in results])
    theta = np.stack([r[2] for r in results])
    rhat = {}
    if config.chains >= 2:
        rhat["beta0"] = split_rhat(beta0)
        rhat["theta1"] = split_rhat(theta[:, :, 0])
        rhat["theta2"] = split_rhat(theta[:, :, 1])
        mon = _monitored_components(m, np.random.default_rng(np.random.SeedSequence(seed)))
        for k in mon:
            rhat[f"w_{k}"] = split_rhat(w[:, :, k])
    return SampleSet(
        beta0=beta0,
        w=w,
        theta=theta,
        acceptance={
            "rw_theta": float(np.mean([r[3] for r in results])),
            "hmc": float(np.mean([r[4] for r in results])),
        },
        rhat=rhat,
        extras={"eb": eb, "use_wstar": use_wstar},
    )


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AreaRiskSummary:
    """Posterior draws and summaries of per-area relative risk."""

    ids: tuple
    draws: np.ndarray  # (n_draws, n_areas)
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def aggregate_relative_risk(samples, projector):
    """Per-area relative-risk draws exp(beta0) * (D exp(w))_i and summaries."""
    beta0 = samples.pooled_beta0()
    w = samples.pooled_w()
    if beta0.size == 0:
        raise ValueError("empty sample set")
    D = projector.matrix
    draws = np.exp(beta0)[:, None] * (np.exp(w) @ D.T.toarray())
    med = np.percentile(draws, 50.0, axis=0)
    lo = np.percentile(draws, 2.5, axis=0)
    hi = np.percentile(draws, 97.5, axis=0)
    return AreaRiskSummary(
        ids=tuple(projector.row_ids), draws=draws, median=med, lower=lo, upper=hi
    )


def sir(counts, expecteds):
    """Standardized incidence ratios Y_i / E_i."""
    y = np.asarray(counts, dtype=float)
    e = np.asarray(expecteds, dtype=float)
    if np.any(e <= 0):
        raise ValueError("expected counts must be positive")
    return y / e


def load_counts(source):
    """Read counts.csv (id,count,expected) into (ids, counts, expecteds)."""
    ids, counts, expecteds = [], [], []
    with open(source, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "count", "expected"]:
            raise ValueError(f"{source}: expected header id,count,expected")
        for r, row in enumerate(reader):
            try:
                ids.append(row["id"])
                counts.append(float(row["count"]))
                expecteds.append(float(row["expected"]))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{source}: bad row {r}: {row}") from exc
    if not ids:
        raise ValueError(f"{source}: no counts")
    return ids, np.asarray(counts), np.asarray(expecteds)
