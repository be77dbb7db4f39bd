import numpy as np
import pytest
from scipy.stats import multivariate_normal

from aggfield.gauss import (
    GaussPriors,
    NormalObs,
    gaussian_fit,
    latent_posterior,
    load_observations,
    log_marginal,
    mse_mae,
    predict_surface,
    save_observations,
)
from aggfield.mesh import assemble_fem, build_regular_mesh
from aggfield.project import PopulationGrid, point_projector
from aggfield.spde import build_precision, precision_matrix, sample_gmrf, theta_to_params

THETA = np.array([0.1, 0.4])
PRIORS = GaussPriors()


@pytest.fixture(scope="module")
def small_problem():
    mesh = build_regular_mesh((0, 0, 1, 1), 0.5, 0.0)  # 9 nodes
    fem = assemble_fem(mesh)
    rng = np.random.default_rng(42)
    pts = rng.uniform(0.05, 0.95, size=(12, 2))
    proj = point_projector(mesh, pts)
    prec = build_precision(fem, theta_to_params(THETA))
    w = sample_gmrf(prec, rng, 1)[:, 0]
    sigma2 = 0.3
    weights = rng.integers(1, 9, size=12).astype(float)
    values = 0.4 + proj.matrix @ w + rng.normal(0, np.sqrt(sigma2 / weights))
    obs = [NormalObs(value=v, weight=n) for v, n in zip(values, weights)]
    return mesh, fem, proj, obs, sigma2


def dense_log_marginal(obs, proj, fem, priors, sigma2, theta):
    """Oracle: evaluate the Gaussian integral with dense covariance algebra."""
    values = np.array([o.value for o in obs])
    weights = np.array([o.weight for o in obs])
    P = np.column_stack([proj.matrix.toarray(), np.ones(len(obs))])
    Q = precision_matrix(fem, theta_to_params(theta)).toarray()
    K = np.zeros((Q.shape[0] + 1, Q.shape[0] + 1))
    K[:-1, :-1] = np.linalg.inv(Q)
    K[-1, -1] = priors.beta0_var
    mean = P @ np.concatenate([np.zeros(Q.shape[0]), [priors.beta0_mean]])
    cov = P @ K @ P.T + np.diag(sigma2 / weights)
    return float(multivariate_normal(mean=mean, cov=cov).logpdf(values))


class TestLogMarginal:
    def test_matches_dense_oracle(self, small_problem):
        mesh, fem, proj, obs, sigma2 = small_problem
        for theta in [THETA, (0.5, -0.3), (-0.4, 0.8)]:
            ours = log_marginal(obs, proj, fem, PRIORS, sigma2, theta)
            oracle = dense_log_marginal(obs, proj, fem, PRIORS, sigma2, theta)
            assert ours == pytest.approx(oracle, abs=1e-8)

    def test_nonzero_beta0_prior_mean(self, small_problem):
        mesh, fem, proj, obs, sigma2 = small_problem
        priors = GaussPriors(beta0_mean=1.5, beta0_var=4.0)
        ours = log_marginal(obs, proj, fem, priors, sigma2, THETA)
        oracle = dense_log_marginal(obs, proj, fem, priors, sigma2, THETA)
        assert ours == pytest.approx(oracle, abs=1e-8)


class TestLatentPosterior:
    def test_matches_dense_gls(self, small_problem):
        mesh, fem, proj, obs, sigma2 = small_problem
        values = np.array([o.value for o in obs])
        weights = np.array([o.weight for o in obs])
        P = np.column_stack([proj.matrix.toarray(), np.ones(len(obs))])
        Q = precision_matrix(fem, theta_to_params(THETA)).toarray()
        m = Q.shape[0]
        Q_prior = np.zeros((m + 1, m + 1))
        Q_prior[:m, :m] = Q
        Q_prior[m, m] = 1.0 / PRIORS.beta0_var
        lam = np.diag(weights / sigma2)
        Q_post = Q_prior + P.T @ lam @ P
        mean_dense = np.linalg.solve(Q_post, P.T @ lam @ values)
        post = latent_posterior(obs, proj, fem, PRIORS, sigma2, THETA)
        np.testing.assert_allclose(post.mean, mean_dense, atol=1e-8)
        sd_dense = np.sqrt(np.diag(np.linalg.inv(Q_post)))
        np.testing.assert_allclose(post.marginal_sd(), sd_dense, atol=1e-8)

    def test_interpolation_limit(self, small_problem):
        # one huge-weight observation at a mesh vertex pins beta0 + w there
        mesh, fem, _, _, _ = small_problem
        proj = point_projector(mesh, [mesh.nodes[4]])
        obs = [NormalObs(value=1.23, weight=1e10)]
        post = latent_posterior(obs, proj, fem, PRIORS, 1.0, THETA)
        assert post.w_mean[4] + post.beta0_mean == pytest.approx(1.23, abs=1e-6)

    def test_information_monotonicity(self, small_problem):
        mesh, fem, proj, obs, sigma2 = small_problem
        post_small = latent_posterior(obs[:6], _slice_proj(proj, 6), fem, PRIORS, sigma2, THETA)
        post_full = latent_posterior(obs, proj, fem, PRIORS, sigma2, THETA)
        assert np.all(post_full.marginal_sd() <= post_small.marginal_sd() + 1e-12)

    def test_zero_weight_rows_equal_point_only(self, small_problem):
        from aggfield.project import stack_projectors

        mesh, fem, proj, obs, sigma2 = small_problem
        extra = [NormalObs(value=99.0, weight=0.0)] * 3
        dummy = point_projector(mesh, [(0.2, 0.2)] * 3)
        proj_big = stack_projectors([dummy, proj])
        post_aug = latent_posterior(extra + obs, proj_big, fem, PRIORS, sigma2, THETA)
        post_ref = latent_posterior(obs, proj, fem, PRIORS, sigma2, THETA)
        np.testing.assert_allclose(post_aug.mean, post_ref.mean, atol=1e-12)


def _slice_proj(proj, k):
    from aggfield.project import Projector

    return Projector(matrix=proj.matrix[:k], kind=proj.kind, row_ids=proj.row_ids[:k])


class TestGaussianFit:
    def test_recovers_on_simulated_data(self):
        rng = np.random.default_rng(5)
        mesh = build_regular_mesh((0, 0, 10, 10), 1.0, 1.0)
        fem = assemble_fem(mesh)
        theta_true = theta_to_params((0.0, 0.0)).theta  # lambda2 = 1/(4pi) ~ .08
        prec = build_precision(fem, theta_to_params(theta_true))
        w = sample_gmrf(prec, rng, 1)[:, 0]
        pts = rng.uniform(0.5, 9.5, size=(150, 2))
        proj = point_projector(mesh, pts)
        weights = rng.integers(30, 80, size=150).astype(float)
        sigma2_true = 0.25
        values = 0.3 + proj.matrix @ w + rng.normal(0, np.sqrt(sigma2_true / weights))
        obs = [NormalObs(value=v, weight=n) for v, n in zip(values, weights)]
        fit = gaussian_fit(obs, proj, fem, GaussPriors(), mesh=mesh)
        assert fit.converged
        assert fit.beta0 == pytest.approx(0.3, abs=0.5)
        assert fit.sigma2 == pytest.approx(sigma2_true, abs=0.15)
        assert fit.beta0_interval[0] < 0.3 < fit.beta0_interval[1]

    def test_requires_two_observations(self, small_problem):
        mesh, fem, proj, obs, _ = small_problem
        with pytest.raises(ValueError):
            gaussian_fit(obs[:1], _slice_proj(proj, 1), fem)


class TestPredictSurface:
    def _fit(self, small_problem):
        mesh, fem, proj, obs, sigma2 = small_problem
        return gaussian_fit(obs, proj, fem, PRIORS, mesh=mesh)

    def test_vertex_prediction_equals_posterior(self, small_problem):
        mesh = small_problem[0]
        fit = self._fit(small_problem)
        mean, sd = predict_surface(fit, [mesh.nodes[4]])
        assert mean[0] == pytest.approx(fit.beta0 + fit.w_mean[4], abs=1e-10)
        assert sd[0] > 0

    def test_centroid_matches_projector_blend(self, small_problem):
        mesh = small_problem[0]
        fit = self._fit(small_problem)
        tri = mesh.triangles[2]
        centroid = mesh.nodes[tri].mean(axis=0)
        proj = point_projector(mesh, [centroid])
        expected = proj.matrix @ fit.w_mean + fit.beta0
        mean, _ = predict_surface(fit, [centroid])
        assert mean[0] == pytest.approx(float(expected[0]), abs=1e-10)

    def test_flat_limit_constant_surface(self, small_problem):
        # enormous tau means lambda2 -> 0: the surface collapses to beta0
        mesh, fem, proj, obs, sigma2 = small_problem
        post = latent_posterior(obs, proj, fem, PRIORS, sigma2, (8.0, 0.4))
        assert np.max(np.abs(post.w_mean)) < 1e-4

    def test_outside_hull_raises(self, small_problem):
        fit = self._fit(small_problem)
        with pytest.raises(Exception, match="outside"):
            predict_surface(fit, [(5.0, 5.0)])


class TestMseMae:
    def test_exact_recovery(self):
        w = np.arange(5.0)
        assert mse_mae(w, w, [2, 3]) == (0.0, 0.0)

    def test_constant_offset(self):
        w = np.zeros(6)
        mse, mae = mse_mae(w + 0.5, w, [6])
        assert mse == pytest.approx(0.25)
        assert mae == pytest.approx(0.5)

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(9)
        what, wtrue = rng.normal(size=10), rng.normal(size=10)
        counts = [4, 6]
        mse, mae = mse_mae(what, wtrue, counts)
        manual_mse = sum((a - b) ** 2 for a, b in zip(what, wtrue)) / 10
        manual_mae = sum(abs(a - b) for a, b in zip(what, wtrue)) / 10
        assert mse == pytest.approx(manual_mse, rel=1e-12)
        assert mae == pytest.approx(manual_mae, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mse_mae(np.zeros(3), np.zeros(4), [3])
        with pytest.raises(ValueError):
            mse_mae(np.zeros(3), np.zeros(3), [4])


class TestObservationsFile:
    def test_round_trip(self, tmp_path):
        rows = [
            ("p1", "point", NormalObs(value=0.5, weight=41, obs_id="p1")),
            ("a1", "area", NormalObs(value=-0.25, weight=1000, obs_id="a1")),
        ]
        path = tmp_path / "observations.csv"
        save_observations(rows, path)
        back = load_observations(path)
        assert [(i, k) for i, k, _ in back] == [("p1", "point"), ("a1", "area")]
        assert back[0][2].value == 0.5
        assert back[1][2].weight == 1000

    def test_rejects_bad_kind(self, tmp_path):
        path = tmp_path / "observations.csv"
        path.write_text("id,kind,value,weight\nx,blob,1.0,2\n")
        with pytest.raises(ValueError, match="kind"):
            load_observations(path)

    def test_rejects_zero_weight(self, tmp_path):
        path = tmp_path / "observations.csv"
        path.write_text("id,kind,value,weight\nx,point,1.0,0\n")
        with pytest.raises(ValueError, match="weight"):
            load_observations(path)
