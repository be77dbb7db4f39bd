import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import k1

from aggfield.mesh import assemble_fem, build_regular_mesh
from aggfield.spde import (
    build_precision,
    matern_cov,
    params_to_theta,
    practical_range,
    precision_matrix,
    sample_gmrf,
    theta_to_params,
)


def dense_precision(fem, params):
    """Independent dense assembly of tau^2 (k^4 C + 2 k^2 G + G C^-1 G)."""
    C = fem.C.toarray()
    G = fem.G.toarray()
    k2 = params.kappa**2
    return params.tau**2 * (k2**2 * C + 2 * k2 * G + G @ np.linalg.inv(C) @ G)


class TestMaternCov:
    def test_zero_distance_is_variance(self):
        assert matern_cov(0.0, kappa=2.0, lambda2=0.7) == pytest.approx(0.7)

    def test_correlation_at_practical_range(self):
        # direct Bessel evaluation: sqrt(8) K_1(sqrt(8)) * sqrt(8) ~ 0.139
        kappa = 1.3
        phi = practical_range(kappa)
        corr = matern_cov(phi, kappa, 1.0)
        expected = np.sqrt(8.0) * k1(np.sqrt(8.0))
        assert corr == pytest.approx(expected, rel=1e-12)
        assert 0.10 < corr < 0.15

    @given(st.floats(0.01, 20.0), st.floats(0.1, 5.0))
    @settings(max_examples=50, deadline=None)
    def test_strictly_decreasing(self, d, kappa):
        c1 = matern_cov(d, kappa, 1.0)
        c2 = matern_cov(2 * d, kappa, 1.0)
        if c1 > 0:
            assert c2 < c1

    def test_decays_to_zero(self):
        assert matern_cov(1e4, 1.0, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            matern_cov(1.0, -1.0, 1.0)
        with pytest.raises(ValueError):
            matern_cov(1.0, 1.0, 0.0)


class TestTransforms:
    def test_paper_style_range(self):
        # kappa = exp(1/2) gives a practical range of about 1.72
        assert practical_range(np.exp(0.5)) == pytest.approx(1.7155, abs=2e-3)

    def test_unit_tau(self):
        # lambda2 = 1/(4 pi), kappa = 1 forces tau = 1
        theta = params_to_theta(1.0 / (4.0 * np.pi), np.sqrt(8.0))
        assert theta[0] == pytest.approx(0.0, abs=1e-12)
        assert theta[1] == pytest.approx(0.0, abs=1e-12)

    @given(st.floats(-3, 3), st.floats(-3, 3))
    @settings(max_examples=20, deadline=None)
    def test_round_trip(self, log_tau, log_kappa):
        params = theta_to_params((log_tau, log_kappa))
        back = params_to_theta(params.lambda2, params.practical_range)
        np.testing.assert_allclose(back, [log_tau, log_kappa], atol=1e-12)

    def test_prior_mean_arithmetic(self):
        # the degree-scale prior center (-1.17, -0.0933) sits at lambda2 = 1
        # (to the rounding of the published numbers), confirming component
        # order (log tau, log kappa)
        params = theta_to_params((-1.17, -0.0933))
        assert params.lambda2 == pytest.approx(1.0, abs=0.01)
        params_km = theta_to_params((3.24, -4.51))
        assert params_km.lambda2 == pytest.approx(1.0, abs=0.01)
        # lambda2 alone cannot distinguish the component order (it depends on
        # the product tau * kappa); the practical range can: the km-scale
        # center must give a range of a few hundred km, not a tenth of one
        assert 200.0 < params_km.practical_range < 300.0
        swapped = theta_to_params((-4.51, 3.24))
        assert swapped.practical_range < 1.0


class TestBuildPrecision:
    def setup_method(self):
        self.mesh = build_regular_mesh((0, 0, 1, 1), 0.25, 0.0)  # 25 nodes
        self.fem = assemble_fem(self.mesh)

    def test_matches_dense_oracle(self):
        params = theta_to_params((0.3, -0.2))
        prec = build_precision(self.fem, params)
        dense = dense_precision(self.fem, params)
        scale = np.abs(dense).max()
        assert np.abs(prec.Q.toarray() - dense).max() < 1e-10 * scale

    def test_tau_scaling(self):
        p1 = theta_to_params((0.0, 0.1))
        p2 = theta_to_params((np.log(2.0), 0.1))
        Q1 = precision_matrix(self.fem, p1)
        Q2 = precision_matrix(self.fem, p2)
        np.testing.assert_allclose(Q2.toarray(), 4.0 * Q1.toarray(), rtol=1e-12)

    def test_spd_and_symmetric(self):
        for theta in [(-2.0, 1.0), (1.5, -1.5), (0.0, 0.0)]:
            prec = build_precision(self.fem, theta_to_params(theta))
            Q = prec.Q.toarray()
            assert np.abs(Q - Q.T).max() < 1e-12 * np.abs(Q).max()
            assert np.linalg.eigvalsh(Q).min() > 0

    def test_logdet_matches_dense(self):
        # relative 1e-8: at the ill-conditioned corners (kappa small) both
        # computations carry condition-number-limited error
        for theta in [(-5.0, 2.0), (0.0, 0.0), (3.0, -2.0), (10.0, -4.0), (-10.0, 10.0)]:
            prec = build_precision(self.fem, theta_to_params(theta))
            _, dense_ld = np.linalg.slogdet(prec.Q.toarray())
            assert prec.logdet == pytest.approx(dense_ld, rel=1e-8, abs=1e-8)

    def test_spd_across_theta_grid(self):
        # log tau spans the full [-10, 10]; log kappa is kept above -5, where
        # float64 can still certify definiteness (the kappa^-4 condition
        # number passes 1/eps below that, so even dense eigensolvers report
        # spurious negative eigenvalues)
        for log_tau in (-10.0, -5.0, 0.0, 5.0, 10.0):
            for log_kappa in (-5.0, -2.0, 0.0, 4.0, 10.0):
                prec = build_precision(self.fem, theta_to_params((log_tau, log_kappa)))
                assert np.isfinite(prec.logdet)

    def test_two_ring_sparsity(self):
        params = theta_to_params((0.0, 0.0))
        Q = precision_matrix(self.fem, params)
        c_inv = np.diag(1.0 / self.fem.C_diag())
        G = self.fem.G.toarray()
        pattern = (self.fem.C.toarray() != 0) | (G != 0) | ((G @ c_inv @ G) != 0)
        Qd = np.abs(Q.toarray()) > 1e-14
        assert not np.any(Qd & ~pattern)


class TestSampleGmrf:
    def test_deterministic_given_seed(self):
        mesh = build_regular_mesh((0, 0, 1, 1), 0.5, 0.0)
        prec = build_precision(assemble_fem(mesh), theta_to_params((0.0, 0.5)))
        a = sample_gmrf(prec, np.random.default_rng(7), 3)
        b = sample_gmrf(prec, np.random.default_rng(7), 3)
        np.testing.assert_array_equal(a, b)

    def test_covariance_matches_dense_inverse(self):
        mesh = build_regular_mesh((0, 0, 1.5, 1), 0.25, 0.0)  # 35 nodes
        assert mesh.n_nodes <= 50
        prec = build_precision(assemble_fem(mesh), theta_to_params((0.0, 0.3)))
        n = 10000
        draws = sample_gmrf(prec, np.random.default_rng(11), n)
        emp = draws @ draws.T / n
        cov = np.linalg.inv(prec.Q.toarray())
        # entrywise 5-standard-error band, se(cov_ij) ~ sqrt((v_ii v_jj + v_ij^2)/n)
        se = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / n)
        assert np.all(np.abs(emp - cov) < 5.0 * se)

    def test_marginal_variance_near_lambda2_in_interior(self):
        params = theta_to_params(params_to_theta(0.75, 1.7155))
        mesh = build_regular_mesh((0, 0, 10, 10), 0.5, 2.0)
        prec = build_precision(assemble_fem(mesh), params)
        cov_diag = np.linalg.inv(prec.Q.toarray()).diagonal()
        interior = np.all(np.abs(mesh.nodes - 5.0) < 5.0 - 1.7155, axis=1)
        ratio = cov_diag[interior] / params.lambda2
        assert np.all(np.abs(ratio - 1.0) < 0.15)


def test_empirical_correlation_at_practical_range():
    # Monte Carlo against the Matern correlation on a fine interior lattice
    params = theta_to_params(params_to_theta(1.0, 1.7155))
    mesh = build_regular_mesh((0, 0, 10, 10), 1 / 3, 2.0)
    prec = build_precision(assemble_fem(mesh), params)
    nodes = mesh.nodes
    a = int(np.argmin(np.sum((nodes - [4.0, 5.0]) ** 2, axis=1)))
    candidates = np.nonzero(np.abs(nodes[:, 1] - nodes[a, 1]) < 1e-9)[0]
    dists = nodes[candidates, 0] - nodes[a, 0]
    b = int(candidates[np.argmin(np.abs(dists - params.practical_range))])
    draws = sample_gmrf(prec, np.random.default_rng(3), 10000)
    corr = np.corrcoef(draws[a], draws[b])[0, 1]
    assert 0.05 < corr < 0.25
