import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lwipp import density as dn
from lwipp import gp
from lwipp.environments import make_benchmark


class ConstModel:
    """Minimal model stand-in with a closed-form mean."""

    def __init__(self, fn, dim=2):
        self.fn = fn
        self.dim = dim

    def mean(self, X):
        return self.fn(np.atleast_2d(X))


class TestInputPrior:
    def test_uniform(self):
        p = dn.InputPrior.uniform()
        np.testing.assert_array_equal(p.pdf([[0.2, 0.3], [1.5, 0.5]]), [1.0, 0.0])

    def test_gaussian_matches_scipy(self):
        cov = np.array([[0.02, 0.005], [0.005, 0.01]])
        p = dn.InputPrior.gaussian([0.3, 0.6], cov)
        Z = np.random.default_rng(0).uniform(size=(20, 2))
        np.testing.assert_allclose(p.pdf(Z), stats.multivariate_normal([0.3, 0.6], cov).pdf(Z))

    def test_gaussian_integrates_to_one(self):
        p = dn.InputPrior.gaussian([0.5, 0.5], 0.01 * np.eye(2))
        g = np.linspace(-0.5, 1.5, 401)
        Z = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
        np.testing.assert_allclose(p.pdf(Z).sum() * (g[1] - g[0]) ** 2, 1.0, rtol=1e-6)

    def test_rejects_bad_covariance(self):
        with pytest.raises(ValueError):
            dn.InputPrior.gaussian([0.5, 0.5], [[1.0, 2.0], [2.0, 1.0]])


class TestKde:
    def test_binned_matches_direct(self):
        x = np.random.default_rng(0).standard_normal(5000)
        h = dn.silverman_bandwidth(x)
        grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, 1024)
        np.testing.assert_allclose(dn.kde_on_grid(x, grid, h), dn.kde_direct(x, grid, h),
                                   atol=2e-4)

    def test_narrow_bandwidth_refines(self):
        x = np.random.default_rng(1).uniform(size=300)
        h = 1e-4
        grid = np.linspace(-0.1, 1.1, 1024)
        dens = dn.kde_on_grid(x, grid, h)
        fine = np.linspace(-0.1, 1.1, 200_001)
        np.testing.assert_allclose(np.trapezoid(np.interp(fine, grid, dens), fine), 1.0,
                                   atol=0.05)

    def test_normal_oracle(self):
        x = np.random.default_rng(2).standard_normal(100_000)
        d = dn.density_from_samples(x)
        assert np.max(np.abs(d.values - stats.norm.pdf(d.grid))) < 0.02

    def test_uniform_pushforward(self):
        m = ConstModel(lambda X: X[:, 0])
        d = dn.estimate_output_density(m, 100_000, None, rng=0)
        inner = (d.grid > 0.05) & (d.grid < 0.95)
        assert np.max(np.abs(d.values[inner] - 1.0)) < 0.1

    def test_constant_output(self):
        m = ConstModel(lambda X: np.full(len(X), 3.0))
        d = dn.estimate_output_density(m, 1000, None, rng=0)
        np.testing.assert_allclose(d.integral(), 1.0, atol=1e-3)
        assert abs(d.grid[np.argmax(d.values)] - 3.0) < 1e-4

    def test_floor(self):
        x = np.random.default_rng(3).standard_normal(2000)
        d = dn.density_from_samples(x)
        assert np.all(d.values >= d.floor)
        assert d(np.array([1e6]))[0] == d.floor

    def test_min_samples(self):
        with pytest.raises(ValueError):
            dn.estimate_output_density(ConstModel(lambda X: X[:, 0]), 50, None)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(100, 5000),
       scale=st.floats(1e-3, 1e3), skew=st.floats(0.0, 3.0))
def test_density_integrates_to_one(seed, n, scale, skew):
    x = scale * np.random.default_rng(seed).standard_normal(n)
    x = x + skew * scale * x**2
    d = dn.density_from_samples(x)
    assert abs(d.integral() - 1.0) < 1e-3
    assert np.all(np.isfinite(d.values))


class TestGmm:
    def test_single_gaussian(self):
        rng = np.random.default_rng(0)
        cov = np.array([[0.01, 0.002], [0.002, 0.02]])
        X = rng.multivariate_normal([0.4, 0.6], cov, size=10_000)
        g = dn.fit_gmm(X, np.ones(len(X)), n_components=1, rng=1)
        np.testing.assert_allclose(g.means[0], [0.4, 0.6], atol=0.02)
        np.testing.assert_allclose(g.covariances[0], cov, rtol=0.1, atol=1e-4)

    def test_two_clusters(self):
        rng = np.random.default_rng(1)
        X = np.vstack([rng.normal([0.2, 0.2], 0.05, size=(3000, 2)),
                       rng.normal([0.8, 0.7], 0.05, size=(3000, 2))])
        g = dn.fit_gmm(X, np.ones(len(X)), n_components=2, rng=2)
        means = g.means[np.argsort(g.means[:, 0])]
        np.testing.assert_allclose(means, [[0.2, 0.2], [0.8, 0.7]], atol=0.05)

    def test_weighted_equals_resampled_target(self):
        # weights proportional to a Gaussian pdf on uniform points recover that Gaussian
        rng = np.random.default_rng(2)
        X = rng.uniform(size=(20_000, 2))
        w = dn.gaussian_pdf(X, np.array([0.6, 0.4]), 0.01 * np.eye(2))
        g = dn.fit_gmm(X, w, n_components=1, rng=3)
        np.testing.assert_allclose(g.means[0], [0.6, 0.4], atol=0.01)
        np.testing.assert_allclose(g.covariances[0], 0.01 * np.eye(2), atol=1.5e-3)

    def test_mass_is_mean_weight(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(size=(2000, 2))
        w = 1 + X[:, 0]
        g = dn.fit_gmm(X, w, n_components=2, rng=0)
        np.testing.assert_allclose(g.weights.sum(), w.mean())
        assert np.all(g.weights > 0)

    @pytest.mark.parametrize("seed", range(4))
    def test_em_monotone(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.uniform(size=(3000, 2))
        w = rng.uniform(size=3000) ** 3
        g = dn.fit_gmm(X, w, n_components=3, rng=seed)
        assert np.all(np.diff(g.history) >= -1e-10)

    def test_spd_covariances(self):
        rng = np.random.default_rng(4)
        X = np.vstack([rng.uniform(size=(500, 2)), np.tile([0.3, 0.3], (500, 1))])
        g = dn.fit_gmm(X, np.ones(1000), n_components=2, rng=0)
        for S in g.covariances:
            assert np.linalg.eigvalsh(S).min() >= dn.COV_FLOOR * (1 - 1e-9)

    def test_contract(self):
        with pytest.raises(ValueError):
            dn.fit_gmm(np.zeros((15, 2)), np.ones(15), n_components=2)
        with pytest.raises(ValueError):
            dn.fit_gmm(np.zeros((100, 2)), -np.ones(100))


def michalewicz_model():
    env = make_benchmark("michalewicz", noise_base=None)
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(150, 2))
    return gp.fit(X, env(X), restarts=2, rng=1)


class TestLikelihoodWeight:
    def test_constant_mean_gives_constant_weight(self):
        m = ConstModel(lambda X: np.full(len(X), 1.0))
        lw = dn.refresh_weight(m, dn.InputPrior.uniform(), None, 2000, rng=0)
        Z = np.random.default_rng(1).uniform(size=(50, 2))
        w = dn.likelihood_ratio(lw, m, Z)
        np.testing.assert_allclose(w, w[0])

    def test_tail_weighted_more(self):
        rng = np.random.default_rng(2)
        m = ConstModel(lambda X: np.sqrt(-2 * np.log(X[:, 0])) * np.cos(2 * np.pi * X[:, 1]))
        lw = dn.refresh_weight(m, dn.InputPrior.uniform(), None, 20_000, rng=rng)
        # the Box-Muller map: X[:,1] = 0.25 lands on the mode, small X[:,0] with X[:,1]=0 in the tail
        mode = np.array([[0.5, 0.25]])
        tail = np.array([[np.exp(-4.5), 0.0]])
        assert lw.raw(m, tail)[0] > lw.raw(m, mode)[0]

    def test_finite_everywhere(self):
        m = michalewicz_model()
        lw = dn.refresh_weight(m, dn.InputPrior.uniform(), None, 5000, rng=0)
        Z = np.random.default_rng(3).uniform(size=(5000, 2))
        w = lw.raw(m, Z)
        assert np.all(np.isfinite(w)) and np.all(w >= 0)

    def test_valley_outweighs_center(self):
        m = michalewicz_model()
        prior = dn.InputPrior.gaussian([0.5, 0.5], 0.01 * np.eye(2))
        lw = dn.refresh_weight(m, prior, None, 10_000, rng=0)
        g = np.linspace(0, 1, 101)
        Z = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
        w = lw.raw(m, Z)
        f = m.mean(Z)
        valley = f < np.quantile(f, 0.05)
        center = np.all(np.abs(Z - 0.5) < 0.05, axis=1)
        assert w[valley].mean() > w[center].mean()

    def test_gmm_tracks_raw_weight(self):
        m = michalewicz_model()
        prior = dn.InputPrior.gaussian([0.5, 0.5], 0.01 * np.eye(2))
        lw = dn.refresh_weight(m, prior, None, 10_000, n_components=2, rng=0)
        g = (np.arange(50) + 0.5) / 50
        Z = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
        raw, approx = lw.raw(m, Z), lw.gmm(Z)
        assert np.linalg.norm(approx - raw) / np.linalg.norm(raw) < 0.5

    def test_monotone_transform(self):
        # under y -> g(y) the output density picks up 1/g'(y), so w is rescaled
        # pointwise by g'(mu); rankings only survive once that factor is removed
        rng = np.random.default_rng(4)
        base = ConstModel(lambda X: X[:, 0] + 0.3 * X[:, 1] ** 2)
        warped = ConstModel(lambda X: np.exp(2 * (X[:, 0] + 0.3 * X[:, 1] ** 2)))
        probes = 0.05 + 0.9 * rng.uniform(size=(200, 2))
        a = dn.refresh_weight(base, dn.InputPrior.uniform(), None, 50_000, rng=5)
        b = dn.refresh_weight(warped, dn.InputPrior.uniform(), None, 50_000, rng=5)
        wa, wb = a.raw(base, probes), b.raw(warped, probes)
        jac = 2 * warped.mean(probes)
        assert stats.spearmanr(wa, wb / jac).statistic > 0.95
        # KDE boundary bias spoils a few points; the bulk agrees in value
        assert np.median(np.abs(wb / jac / wa - 1)) < 0.05

    def test_deterministic(self):
        m = michalewicz_model()
        a = dn.refresh_weight(m, dn.InputPrior.uniform(), None, 3000, rng=7)
        b = dn.refresh_weight(m, dn.InputPrior.uniform(), None, 3000, rng=7)
        np.testing.assert_array_equal(a.gmm.means, b.gmm.means)
        np.testing.assert_array_equal(a.out_density.values, b.out_density.values)
