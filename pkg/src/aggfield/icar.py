"""Discrete-spatial baseline: ICAR-smoothed area effects with Poisson counts.

The spatial effects S carry the intrinsic pairwise-difference prior
-(tau_s/2) sum over neighbor pairs of (S_i - S_j)^2 and a sum-to-zero
constraint enforced by recentering; tau_s gets a conjugate gamma update and
(beta0, S) move jointly by HMC.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .diagnostics import split_rhat
from .pois import HmcConfig, SampleSet, _run_chains, hmc_chain


class AdjacencyError(ValueError):
    """Malformed neighbor structure."""


@dataclass(frozen=True)
class Adjacency:
    """Symmetric neighbor lists over n areas."""

    neighbors: tuple  # per area: tuple of neighbor indices

    def __post_init__(self):
        for i, ne in enumerate(self.neighbors):
            if i in ne:
                raise AdjacencyError(f"area {i} lists itself as a neighbor")
            if len(set(ne)) != len(ne):
                raise AdjacencyError(f"area {i} has duplicate neighbors")
            for j in ne:
                if not (0 <= j < self.n):
                    raise AdjacencyError(f"area {i} lists out-of-range neighbor {j}")
                if i not in self.neighbors[j]:
                    raise AdjacencyError(f"adjacency asymmetric: {i} -> {j} but not {j} -> {i}")

    @property
    def n(self):
        return len(self.neighbors)

    @property
    def degrees(self):
        return np.array([len(ne) for ne in self.neighbors])

    def edge_pairs(self):
        """Unordered neighbor pairs (i, j) with i < j."""
        return [(i, j) for i, ne in enumerate(self.neighbors) for j in ne if i < j]

    def n_components(self):
        n = self.n
        seen = np.zeros(n, dtype=bool)
        comps = 0
        for s in range(n):
            if seen[s]:
                continue
            comps += 1
            stack = [s]
            seen[s] = True
            while stack:
                i = stack.pop()
                for j in self.neighbors[i]:
                    if not seen[j]:
                        seen[j] = True
                        stack.append(j)
        return comps

    def laplacian(self):
        """Graph Laplacian diag(m_i) - adjacency, the ICAR structure matrix."""
        rows, cols, vals = [], [], []
        for i, ne in enumerate(self.neighbors):
            rows.append(i)
            cols.append(i)
            vals.append(float(len(ne)))
            for j in ne:
                rows.append(i)
                cols.append(j)
                vals.append(-1.0)
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))


def icar_log_prior(S, tau_s, adjacency):
    """Pairwise-difference ICAR log prior, up to constants.

    -(tau_s / 2) * sum over unordered neighbor pairs of (S_i - S_j)^2;
    invariant to adding a constant to every S_i.
    """
    if tau_s <= 0:
        raise ValueError(f"tau_s must be positive, got {tau_s}")
    S = np.asarray(S, dtype=float)
    if S.size != adjacency.n:
        raise ValueError(f"S has length {S.size}, adjacency has {adjacency.n} areas")
    L = adjacency.laplacian()
    return -0.5 * tau_s * float(S @ (L @ S))


@dataclass(frozen=True)
class IcarPriors:
    """Hyperpriors: gamma (shape, rate) on tau_s; normal variance on beta0."""

    tau_shape: float = 0.5
    tau_rate: float = 0.005
    beta0_var: float = 100.0


def fit_icar(counts, expecteds, adjacency, priors=None, config=None, seed=0, n_threads=1):
    """MCMC for Y_i ~ Poisson(E_i exp(beta0 + S_i)) with an ICAR prior on S.

    Each sweep updates (beta0, S) jointly by HMC, recenters S to sum to zero
    (shifting the mean into beta0), and draws tau_s from its conjugate gamma
    full conditional. Returns a SampleSet with tau_s draws in ``extras``.
    """
    priors = priors or IcarPriors()
    config = config or HmcConfig(step_size=0.05, n_leapfrog=25)
    y = np.asarray(counts, dtype=float)
    E = np.asarray(expecteds, dtype=float)
    n = adjacency.n
    if y.size != n or E.size != n:
        raise ValueError("counts/expecteds length must match adjacency")
    if np.any(E <= 0):
        raise ValueError("expected counts must be positive")
    L = adjacency.laplacian()
    n_comp = adjacency.n_components()
    rank = n - n_comp
    pairs = adjacency.edge_pairs()
    pi = np.array([p[0] for p in pairs], dtype=int)
    pj = np.array([p[1] for p in pairs], dtype=int)

    def pair_ss(S):
        d = S[pi] - S[pj]
        return float(d @ d)

    b_init = float(np.log(y.sum() / E.sum()))

    def chain_worker(chain_index, seq):
        rng = np.random.default_rng(seq)
        S = np.zeros(n)
        beta0 = b_init
        tau = 1.0
        eps = config.step_size
        n_total = config.burnin + config.n_keep * config.thin
        kept_b, kept_s, kept_tau = [], [], []
        accepts = 0
        window = 0
        for it in range(n_total):
            tau_cur = tau

            def U(z):
                s, b = z[:-1], float(z[-1])
                mu = E * np.exp(b + s)
                if not np.all(np.isfinite(mu)):
                    return np.inf
                return (
                    -float(y @ (b + s))
                    + float(mu.sum())
                    + 0.5 * tau_cur * float(s @ (L @ s))
                    + 0.5 * b**2 / priors.beta0_var
                )

            def gradU(z):
                s, b = z[:-1], float(z[-1])
                mu = E * np.exp(b + s)
                g_s = -y + mu + tau_cur * (L @ s)
                g_b = float((-y + mu).sum()) + b / priors.beta0_var
                return np.concatenate([g_s, [g_b]])

            hmc_cfg = replace(config, mass=config.mass, step_size=eps, thin=1)
            z = np.concatenate([S, [beta0]])
            _, rate, z, _ = hmc_chain(
                U, gradU, z, hmc_cfg, rng, n_iter=1, adapt_eps=False, collect=False
            )
            if rate > 0:
                accepts += 1
                window += 1
            S, beta0 = z[:-1].copy(), float(z[-1])
            # recenter: ICAR prior and likelihood are invariant to this shift
            shift = float(S.mean())
            S -= shift
            beta0 += shift
            tau = rng.gamma(
                priors.tau_shape + 0.5 * rank, 1.0 / (priors.tau_rate + 0.5 * pair_ss(S))
            )
            if config.adapt and it < config.burnin and (it + 1) % 25 == 0:
                if window / 25.0 > 0.9:
                    eps *= 2.0
                elif window / 25.0 < 0.6:
                    eps *= 0.5
                window = 0
            if it >= config.burnin and (it - config.burnin + 1) % config.thin == 0:
                kept_b.append(beta0)
                kept_s.append(S.copy())
                kept_tau.append(tau)
        return (
            np.asarray(kept_b),
            np.asarray(kept_s),
            np.asarray(kept_tau),
            accepts / n_total,
        )

    results = _run_chains(chain_worker, config.chains, seed, n_threads)
    beta0 = np.stack([r[0] for r in results])
    S = np.stack([r[1] for r in results])
    tau = np.stack([r[2] for r in results])
    rhat = {}
    if config.chains >= 2:
        rhat["beta0"] = split_rhat(beta0)
        rhat["tau_s"] = split_rhat(tau)
    return SampleSet(
        beta0=beta0,
        w=S,
        theta=None,
        acceptance={"hmc": float(np.mean([r[3] for r in results]))},
        rhat=rhat,
        extras={"tau_s": tau, "n_components": n_comp},
    )


def icar_area_risks(samples):
    """Per-area relative-risk draws exp(beta0 + S_i) from an ICAR SampleSet."""
    beta0 = samples.pooled_beta0()
    S = samples.pooled_w()
    return np.exp(beta0[:, None] + S)


def load_adjacency(source, ids=None):
    """Read adjacency CSV (id,neighbors with ; separators); validates symmetry.

    When ``ids`` is given, rows must cover exactly those ids (any order);
    indices in the result follow the file's row order otherwise.
    """
    file_ids, neighbor_ids = [], []
    with open(source, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "neighbors"]:
            raise AdjacencyError(f"{source}: expected header id,neighbors")
        for row in reader:
            file_ids.append(row["id"])
            raw = (row["neighbors"] or "").strip()
            neighbor_ids.append([s for s in raw.split(";") if s] if raw else [])
    if not file_ids:
        raise AdjacencyError(f"{source}: no rows")
    if ids is not None:
        want = [str(i) for i in ids]
        if sorted(want) != sorted(file_ids):
            raise AdjacencyError(f"{source}: area ids do not match the expected set")
        order = {a: k for k, a in enumerate(file_ids)}
        file_ids, neighbor_ids = want, [neighbor_ids[order[a]] for a in want]
    index = {a: k for k, a in enumerate(file_ids)}
    neighbors = []
    for i, ne in enumerate(neighbor_ids):
        try:
            neighbors.append(tuple(sorted(index[a] for a in ne)))
        except KeyError as exc:
            raise AdjacencyError(f"{source}: row {file_ids[i]} lists unknown area {exc}") from exc
    return Adjacency(neighbors=tuple(neighbors)), file_ids


def save_adjacency(adjacency, ids, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "neighbors"])
        for i, ne in enumerate(adjacency.neighbors):
            w.writerow([ids[i], ";".join(str(ids[j]) for j in ne)])
