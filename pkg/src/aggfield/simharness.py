"""Synthetic point/area datasets from a known GMRF surface, plus the
five-scenario recovery study (surveys, fine areas, both, coarse areas,
surveys + coarse).

The desk-scale default geometry is a [0, 10]^2 domain with a 0.5-spacing
mesh, 100 survey sites, a 5x5 "county" partition nested in a 2x2
"province" partition, and a uniform-plus-hotspot household grid.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .gauss import GaussPriors, NormalObs, gaussian_fit, mse_mae
from .mesh import assemble_fem, build_regular_mesh
from .project import (
    AreaPartition,
    PopulationGrid,
    area_projector,
    locate_area,
    nodes_in_areas,
    point_projector,
    stack_projectors,
)
from .spde import build_precision, params_to_theta, sample_gmrf, theta_to_params

SCENARIOS = ("surveys", "fine-areas", "surveys+fine", "coarse-areas", "surveys+coarse")


@dataclass(frozen=True)
class Truth:
    beta0: float = 0.0
    sigma2: float = 0.25
    lambda2: float = 0.75
    kappa: float = float(np.exp(0.5))

    @property
    def theta(self):
        return params_to_theta(self.lambda2, np.sqrt(8.0) / self.kappa)

    @property
    def phi(self):
        return float(np.sqrt(8.0) / self.kappa)


@dataclass(frozen=True)
class ScenarioConfig:
    """Fully concrete simulation setup; build one with ``make_config``."""

    truth: Truth
    bbox: tuple
    spacing: float
    extension: float
    sites: np.ndarray  # (n_sites, 2)
    households: np.ndarray  # (n_sites,) ints
    grid: PopulationGrid
    fine_partition: AreaPartition
    coarse_partition: AreaPartition
    seed: int
    scenario: str = "surveys"

    def __post_init__(self):
        if np.any(np.asarray(self.households) < 1):
            raise ValueError("household counts must be >= 1")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")


def _rect_partition(bbox, nx, ny, prefix):
    xmin, ymin, xmax, ymax = bbox
    xs = np.linspace(xmin, xmax, nx + 1)
    ys = np.linspace(ymin, ymax, ny + 1)
    ids, rings = [], []
    for iy in range(ny):
        for ix in range(nx):
            ids.append(f"{prefix}{iy * nx + ix}")
            ring = np.array(
                [
                    [xs[ix], ys[iy]],
                    [xs[ix + 1], ys[iy]],
                    [xs[ix + 1], ys[iy + 1]],
                    [xs[ix], ys[iy + 1]],
                ]
            )
            rings.append((ring,))
    return AreaPartition(ids=tuple(ids), rings=tuple(rings))


def _hotspot_grid(bbox, spacing, base, hotspots):
    xmin, ymin, xmax, ymax = bbox
    xs = np.arange(xmin + spacing / 2, xmax, spacing)
    ys = np.arange(ymin + spacing / 2, ymax, spacing)
    cells = np.column_stack([np.tile(xs, ys.size), np.repeat(ys, xs.size)])
    counts = np.full(cells.shape[0], float(base))
    for cx, cy, amp, scale in hotspots:
        d2 = (cells[:, 0] - cx) ** 2 + (cells[:, 1] - cy) ** 2
        counts += amp * np.exp(-0.5 * d2 / scale**2)
    return PopulationGrid(cells=cells, counts=counts)


def make_config(
    seed=0,
    scenario="surveys",
    truth=None,
    bbox=(0.0, 0.0, 10.0, 10.0),
    spacing=0.5,
    extension=1.0,
    n_sites=100,
    household_range=(41, 81),
    grid_spacing=0.5,
    base_density=100.0,
    hotspots=((3.0, 3.0, 900.0, 1.5), (7.5, 6.0, 600.0, 1.2)),
    fine_shape=(5, 5),
    coarse_shape=(2, 2),
):
    """Assemble the desk-scale ScenarioConfig; all randomness is seed-derived."""
    truth = truth or Truth()
    site_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    xmin, ymin, xmax, ymax = bbox
    sites = np.column_stack(
        [
            site_rng.uniform(xmin, xmax, n_sites),
            site_rng.uniform(ymin, ymax, n_sites),
        ]
    )
    households = site_rng.integers(household_range[0], household_range[1] + 1, n_sites)
    grid = _hotspot_grid(bbox, grid_spacing, base_density, hotspots)
    return ScenarioConfig(
        truth=truth,
        bbox=tuple(bbox),
        spacing=spacing,
        extension=extension,
        sites=sites,
        households=households,
        grid=grid,
        fine_partition=_rect_partition(bbox, *fine_shape, "county"),
        coarse_partition=_rect_partition(bbox, *coarse_shape, "province"),
        seed=seed,
        scenario=scenario,
    )


@dataclass
class SimulatedData:
    """One draw of the latent surface and every derived observation set."""

    w_true: np.ndarray
    mesh: object
    fem: object
    survey_obs: list
    survey_projector: object
    fine_obs: list
    fine_projector: object
    coarse_obs: list
    coarse_projector: object
    config: ScenarioConfig = field(repr=False, default=None)

    def scenario_inputs(self, scenario):
        """(obs, projector) pair for one scenario name."""
        if scenario == "surveys":
            return list(self.survey_obs), self.survey_projector
        if scenario == "fine-areas":
            return list(self.fine_obs), self.fine_projector
        if scenario == "coarse-areas":
            return list(self.coarse_obs), self.coarse_projector
        if scenario == "surveys+fine":
            return (
                list(self.survey_obs) + list(self.fine_obs),
                stack_projectors([self.survey_projector, self.fine_projector]),
            )
        if scenario == "surveys+coarse":
            return (
                list(self.survey_obs) + list(self.coarse_obs),
                stack_projectors([self.survey_projector, self.coarse_projector]),
            )
        raise ValueError(f"unknown scenario {scenario!r}")


def _census_obs(config, partition, grid_field, rng, prefix):
    """Population-weighted area means of the surface plus sigma2/N_i noise."""
    truth = config.truth
    cell_area = {}
    for cell_idx, cell in enumerate(config.grid.cells):
        a = locate_area(partition, cell)
        if a is not None:
            cell_area.setdefault(a, []).append(cell_idx)
    obs = []
    for a in range(partition.n):
        idx = np.asarray(cell_area.get(a, []), dtype=int)
        if idx.size == 0:
            raise ValueError(f"area {partition.ids[a]!r} contains no grid cell")
        weights = config.grid.counts[idx]
        n_house = max(int(round(weights.sum())), 1)
        mean = truth.beta0 + float(weights @ grid_field[idx]) / weights.sum()
        noise = rng.normal(0.0, np.sqrt(truth.sigma2 / n_house))
        obs.append(
            NormalObs(value=mean + noise, weight=n_house, obs_id=str(partition.ids[a]))
        )
    return obs


def simulate_dataset(config, rng, mesh=None, fem=None):
    """Draw w ~ N(0, Q^{-1}) and generate every scenario's observations.

    Survey means are the surface at the site coordinates; census means are
    household-weighted grid-cell averages, both with variance sigma2/N noise.
    Deterministic for a seeded generator.
    """
    if mesh is None:
        mesh = build_regular_mesh(config.bbox, config.spacing, config.extension)
    if fem is None:
        fem = assemble_fem(mesh)
    truth = config.truth
    prec = build_precision(fem, theta_to_params(truth.theta))
    w = sample_gmrf(prec, rng, 1)[:, 0]

    survey_projector = point_projector(mesh, config.sites)
    site_field = survey_projector.matrix @ w
    noise = rng.normal(0.0, np.sqrt(truth.sigma2 / config.households))
    survey_obs = [
        NormalObs(
            value=float(truth.beta0 + site_field[j] + noise[j]),
            weight=int(config.households[j]),
            obs_id=f"site{j}",
        )
        for j in range(config.sites.shape[0])
    ]

    grid_proj = point_projector(mesh, config.grid.cells)
    grid_field = grid_proj.matrix @ w

    fine_obs = _census_obs(config, config.fine_partition, grid_field, rng, "county")
    coarse_obs = _census_obs(config, config.coarse_partition, grid_field, rng, "province")

    return SimulatedData(
        w_true=w,
        mesh=mesh,
        fem=fem,
        survey_obs=survey_obs,
        survey_projector=survey_projector,
        fine_obs=fine_obs,
        fine_projector=area_projector(mesh, config.fine_partition, config.grid),
        coarse_obs=coarse_obs,
        coarse_projector=area_projector(mesh, config.coarse_partition, config.grid),
        config=config,
    )


TRUTH_KEYS = ("beta0", "sigma2", "phi", "lambda2")


def _fit_row(fit, scenario, replicate, truth, w_true, node_lists):
    idx = np.concatenate(node_lists)
    counts = [nl.size for nl in node_lists]
    mse, mae = mse_mae(fit.w_mean[idx], w_true[idx], counts)
    truth_vals = {
        "beta0": truth.beta0,
        "sigma2": truth.sigma2,
        "phi": truth.phi,
        "lambda2": truth.lambda2,
    }
    row = {"scenario": scenario, "replicate": replicate, "mse": mse, "mae": mae}
    for key in TRUTH_KEYS:
        est = getattr(fit, key)
        lo, hi = getattr(fit, f"{key}_interval")
        row[key] = est
        row[f"{key}_lo"] = lo
        row[f"{key}_hi"] = hi
        row[f"{key}_covered"] = int(lo <= truth_vals[key] <= hi)
    row["converged"] = int(fit.converged)
    return row


def run_scenarios(config, n_replicates, scenarios=None, priors=None, progress=None):
    """Simulate and fit replicates of each scenario; returns per-fit rows.

    One surface draw feeds all scenarios within a replicate, mirroring a
    single-realization comparison. Fit failures are recorded per row rather
    than raised.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    scenarios = list(scenarios) if scenarios is not None else list(SCENARIOS)
    for s in scenarios:
        if s not in SCENARIOS:
            raise ValueError(f"unknown scenario {s!r}")
    priors = priors or GaussPriors()
    mesh = build_regular_mesh(config.bbox, config.spacing, config.extension)
    fem = assemble_fem(mesh)
    node_lists = nodes_in_areas(mesh, config.fine_partition)
    seqs = np.random.SeedSequence(config.seed).spawn(n_replicates)
    rows = []
    for r, seq in enumerate(seqs):
        rng = np.random.default_rng(seq)
        data = simulate_dataset(config, rng, mesh=mesh, fem=fem)
        for s in scenarios:
            obs, projector = data.scenario_inputs(s)
            try:
                fit = gaussian_fit(obs, projector, fem, priors, mesh=mesh)
                rows.append(_fit_row(fit, s, r, config.truth, data.w_true, node_lists))
            except Exception as exc:  # recorded, not fatal
                rows.append(
                    {"scenario": s, "replicate": r, "error": f"{type(exc).__name__}: {exc}"}
                )
            if progress is not None:
                progress(s, r)
    return rows


def aggregate_rows(rows):
    """Per-scenario means of MSE/MAE and coverage over successful replicates."""
    out = {}
    for s in {row["scenario"] for row in rows}:
        ok = [row for row in rows if row["scenario"] == s and "error" not in row]
        if not ok:
            out[s] = {"n": 0}
            continue
        agg = {"n": len(ok), "mse": float(np.mean([r["mse"] for r in ok])),
               "mae": float(np.mean([r["mae"] for r in ok]))}
        for key in TRUTH_KEYS:
            agg[f"{key}_coverage"] = float(np.mean([r[f"{key}_covered"] for r in ok]))
            agg[f"{key}_median"] = float(np.median([r[key] for r in ok]))
        out[s] = agg
    return out


RESULT_COLUMNS = (
    ["scenario", "replicate"]
    + [c for key in TRUTH_KEYS for c in (key, f"{key}_lo", f"{key}_hi", f"{key}_covered")]
    + ["mse", "mae", "converged", "error"]
)


def write_results_csv(rows, aggregates, path):
    """One row per (scenario, replicate) plus an aggregate row per scenario."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in RESULT_COLUMNS})
        for s in sorted(aggregates):
            agg = aggregates[s]
            if agg.get("n", 0) == 0:
                continue
            out = {"scenario": s, "replicate": "aggregate", "mse": agg["mse"], "mae": agg["mae"]}
            for key in TRUTH_KEYS:
                out[key] = agg[f"{key}_median"]
                out[f"{key}_covered"] = agg[f"{key}_coverage"]
            w.writerow({k: out.get(k, "") for k in RESULT_COLUMNS})
