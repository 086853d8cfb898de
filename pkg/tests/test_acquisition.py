import numpy as np
import pytest
from scipy.special import erf

from lwipp import acquisition as aq
from lwipp import gp
from lwipp.acquisition import AcquisitionContext, AcquisitionKind
from lwipp.density import GmmSurrogate, InputPrior, refresh_weight
from lwipp.environments import make_benchmark


def trained_model(seed, n=25, dim=3):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, dim))
    if dim == 3:
        X[:, 2] *= 2.0
    y = np.sin(5 * X[:, 0]) * np.cos(3 * X[:, 1]) + 0.1 * rng.standard_normal(n)
    p = gp.KernelParams(rng.uniform(0.5, 1.5), rng.uniform(0.1, 0.4, size=dim)
                        if dim == 2 else np.r_[rng.uniform(0.1, 0.4, size=2), 3.0], 1e-2)
    return gp.condition(p, X, y, offset=0.0)


def lw_context(seed, t=1.0, n_components=2):
    m = trained_model(seed)
    rng = np.random.default_rng(seed + 100)
    means = rng.uniform(0.2, 0.8, size=(n_components, 2))
    covs = np.array([np.diag(rng.uniform(0.005, 0.05, size=2)) for _ in range(n_components)])
    g = GmmSurrogate(rng.uniform(0.5, 2.0, size=n_components), means, covs)

    class W:
        gmm = g

    return AcquisitionContext(m, InputPrior.uniform(), W(), t)


class TestKind:
    def test_kappa_rules(self):
        AcquisitionKind("UCB", 1.0)
        with pytest.raises(aq.ConfigurationError):
            AcquisitionKind("UCB")
        with pytest.raises(aq.ConfigurationError):
            AcquisitionKind("US", 1.0)
        with pytest.raises(aq.ConfigurationError):
            AcquisitionKind("XYZ")

    def test_weighting(self):
        assert AcquisitionKind("IVR-LW").weighting == "LW"
        assert AcquisitionKind("US-IW").weighting == "IW"
        assert AcquisitionKind("IVR").weighting is None


class TestUncertaintySampling:
    def test_empty_model(self):
        m = gp.empty_model(gp.KernelParams(1.3, np.ones(2), 0.0))
        np.testing.assert_allclose(aq.acq_us(AcquisitionContext(m), np.random.rand(5, 2)), 1.3)

    def test_noiseless_training_point(self):
        p = gp.KernelParams(1.0, np.array([0.2, 0.2]), 0.0)
        m = gp.condition(p, [[0.3, 0.3]], [1.0])
        assert aq.acq_us(AcquisitionContext(m), [[0.3, 0.3]])[0] < 1e-9

    def test_equals_posterior_var(self):
        m = trained_model(0)
        X = np.random.default_rng(1).uniform(size=(100, 3))
        np.testing.assert_array_equal(aq.acq_us(AcquisitionContext(m), X), m.var(X))

    def test_iw_uniform_same_argmax(self):
        m = trained_model(1)
        ctx = AcquisitionContext(m, InputPrior.uniform())
        X = np.random.default_rng(2).uniform(size=(200, 3))
        assert np.argmax(aq.acq_us_weighted(ctx, X, "IW")) == np.argmax(aq.acq_us(ctx, X))

    def test_iw_two_point_ratio(self):
        m = trained_model(2, dim=2)
        prior = InputPrior.gaussian([0.5, 0.5], 0.01 * np.eye(2))
        ctx = AcquisitionContext(m, prior)
        a, b = np.array([[0.5, 0.5]]), np.array([[0.9, 0.9]])
        ratio = aq.acq_us_weighted(ctx, a, "IW")[0] / aq.acq_us_weighted(ctx, b, "IW")[0]
        expected = np.exp(0.5 * 0.32 / 0.01) * m.var(a)[0] / m.var(b)[0]
        np.testing.assert_allclose(ratio, expected, rtol=1e-10)

    def test_lw_constant_mean_ranks_like_iw(self):
        # data equal to the offset leave the posterior mean flat at that value
        m = gp.condition(gp.KernelParams(1.0, np.array([0.2, 0.2]), 1e-2),
                         [[0.2, 0.2], [0.7, 0.6]], [1.0, 1.0], offset=1.0)
        prior = InputPrior.gaussian([0.4, 0.5], 0.02 * np.eye(2))
        lw = refresh_weight(m, prior, None, 2000, rng=0)
        ctx = AcquisitionContext(m, prior, lw)
        X = np.random.default_rng(3).uniform(size=(100, 2))
        # the raw weight divides by the density of the constant mean
        w = aq.acq_us_weighted(ctx, X, "IW") / lw.out_density(np.ones(100))
        np.testing.assert_allclose(aq.acq_us_weighted(ctx, X, "LW"), w, rtol=1e-12)

    def test_missing_weight(self):
        ctx = AcquisitionContext(trained_model(0))
        with pytest.raises(aq.ConfigurationError):
            aq.acquisition_value(AcquisitionKind("US-LW"), ctx, np.zeros((1, 3)))
        with pytest.raises(aq.ConfigurationError):
            aq.acquisition_value(AcquisitionKind("IVR-LW"), ctx, np.zeros((1, 3)))


def ivr_empty_closed_form(sf2, ls, x):
    out = sf2
    for d in range(2):
        out *= 0.5 * np.sqrt(np.pi) * ls[d] * (erf((1 - x[d]) / ls[d]) + erf(x[d] / ls[d]))
    return out


class TestIvr:
    def test_empty_model_closed_form(self):
        p = gp.KernelParams(1.7, np.array([0.3, 0.2, 1.0]), 0.0)
        ctx = AcquisitionContext(gp.empty_model(p), t=0.5)
        x = np.array([[0.5, 0.5, 0.5]])
        np.testing.assert_allclose(aq.acq_ivr(ctx, x)[0],
                                   ivr_empty_closed_form(1.7, p.lengthscales, x[0]), rtol=1e-6)

    def test_nonnegative(self):
        ctx = AcquisitionContext(trained_model(3), t=1.0)
        X = np.random.default_rng(4).uniform(size=(100, 3))
        assert np.all(aq.acq_ivr(ctx, X) >= 0)

    @pytest.mark.parametrize("seed", range(3))
    def test_self_convergence(self, seed):
        ctx = AcquisitionContext(trained_model(seed), t=1.0)
        X = np.random.default_rng(seed).uniform(size=(10, 3))
        a = aq.acq_ivr(ctx, X, n_quad=64)
        b = aq.acq_ivr(ctx, X, n_quad=128)
        np.testing.assert_allclose(a, b, rtol=1e-4)

    def test_explained_point(self):
        p = gp.KernelParams(1.0, np.array([0.2, 0.2]), 0.0)
        m = gp.condition(p, [[0.3, 0.3]], [1.0])
        # only the Cholesky jitter keeps the variance off zero here
        assert aq.acq_ivr(AcquisitionContext(m), [[0.3, 0.3]])[0] < 1e-8

    def test_iw_uniform_equals_ivr(self):
        ctx = AcquisitionContext(trained_model(5), InputPrior.uniform(), t=1.0)
        X = np.random.default_rng(6).uniform(size=(30, 3))
        np.testing.assert_allclose(aq.acq_ivr_weighted(ctx, X, "IW"), aq.acq_ivr(ctx, X))


class TestIvrLikelihoodWeighted:
    @pytest.mark.parametrize("seed", range(5))
    def test_analytic_vs_quadrature(self, seed):
        ctx = lw_context(seed)
        X = np.random.default_rng(seed).uniform(size=(20, 3))
        X[:, 2] *= 2
        np.testing.assert_allclose(aq.ivr_lw_analytic(ctx, X), aq.ivr_lw_quadrature(ctx, X),
                                   rtol=1e-3)

    def test_two_dimensional_model(self):
        ctx = lw_context(0)
        ctx.model = trained_model(0, dim=2)
        X = np.random.default_rng(1).uniform(size=(10, 2))
        np.testing.assert_allclose(aq.ivr_lw_analytic(ctx, X), aq.ivr_lw_quadrature(ctx, X),
                                   rtol=1e-3)

    def test_flat_gmm_agrees_with_ivr(self):
        # short lengthscales and central probes keep the square's edges out of
        # play, so integrating over the plane or the square makes no difference
        rng = np.random.default_rng(1)
        X = rng.uniform(size=(30, 3))
        p = gp.KernelParams(1.0, np.array([0.08, 0.08, 3.0]), 1e-2)
        m = gp.condition(p, X, np.sin(6 * X[:, 0]))
        flat = GmmSurrogate(np.array([1.0]), np.array([[0.5, 0.5]]), np.array([100.0 * np.eye(2)]))

        class W:
            gmm = flat

        ctx = AcquisitionContext(m, InputPrior.uniform(), W(), 1.0)
        P = rng.uniform(0.35, 0.65, size=(20, 3))
        P[:, 2] = 1.0
        lw, ivr = aq.ivr_lw_analytic(ctx, P), aq.acq_ivr(ctx, P)
        assert np.argmax(lw) == np.argmax(ivr)
        np.testing.assert_allclose(lw / ivr, lw[0] / ivr[0], rtol=1e-3)

    def test_scale_invariant_argmax(self):
        ctx = lw_context(2)
        X = np.random.default_rng(3).uniform(size=(50, 3))
        a = aq.ivr_lw_analytic(ctx, X)
        ctx.weight.gmm = ctx.weight.gmm.scaled(37.0)
        b = aq.ivr_lw_analytic(ctx, X)
        np.testing.assert_allclose(b, 37.0 * a, rtol=1e-9)
        assert np.argmax(a) == np.argmax(b)

    def test_corrupted_constant_is_detected(self, monkeypatch):
        ctx = lw_context(3)
        X = np.random.default_rng(4).uniform(size=(5, 3))
        monkeypatch.setattr(aq, "GAUSS_NORM", 2.0 * np.pi * 1.01)
        rel = np.abs(aq.ivr_lw_analytic(ctx, X) / aq.ivr_lw_quadrature(ctx, X) - 1)
        assert rel.max() > 1e-3


def michalewicz_context(prior):
    env = make_benchmark("michalewicz", noise_base=None)
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(40, 2))
    m = gp.fit(X, env(X), restarts=3, rng=1)
    lw = refresh_weight(m, prior, None, 10_000, rng=2)
    return env, AcquisitionContext(m, prior, lw)


class TestFigureOneSetup:
    def test_lw_seeks_valley_iw_stays_central(self):
        prior = InputPrior.gaussian([0.5, 0.5], 0.01 * np.eye(2))
        env, ctx = michalewicz_context(prior)
        g = (np.arange(50) + 0.5) / 50
        G = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
        x_lw = G[np.argmax(aq.acq_ivr_weighted(ctx, G, "LW"))]
        x_iw = G[np.argmax(aq.acq_ivr_weighted(ctx, G, "IW"))]
        assert np.linalg.norm(x_iw - prior.mean) < 0.2
        mu = ctx.model.mean(G)
        at_lw = ctx.model.mean(x_lw[None])[0]
        # the LW choice sits where the surrogate predicts low (rare) values
        assert at_lw < np.quantile(mu, 0.25)


class TestClassic:
    def test_ucb_exploitation(self):
        m = trained_model(0)
        ctx = AcquisitionContext(m, y_star=0.0)
        X = np.random.default_rng(1).uniform(size=(30, 3))
        np.testing.assert_allclose(aq.acq_classic(ctx, X, "UCB", 0.0), -m.mean(X))

    def test_ei_zero_at_noiseless_observation(self):
        p = gp.KernelParams(1.0, np.array([0.2, 0.2]), 0.0)
        m = gp.condition(p, [[0.3, 0.3], [0.6, 0.6]], [1.0, 2.0])
        ctx = AcquisitionContext(m, y_star=1.0)
        # sigma there is the square root of the Cholesky jitter, about 1e-5
        assert aq.acq_classic(ctx, [[0.3, 0.3]], "EI", 0.0)[0] < 1e-5

    def test_pi_ei_match_formula(self):
        m = trained_model(4)
        ctx = AcquisitionContext(m, y_star=-0.5)
        X = np.random.default_rng(5).uniform(size=(20, 3))
        mu, var = m.mean_var(X)
        s = np.sqrt(var)
        lam = (-0.5 - mu - 0.1) / s
        from scipy.stats import norm

        np.testing.assert_allclose(aq.acq_classic(ctx, X, "PI", 0.1), norm.cdf(lam))
        np.testing.assert_allclose(aq.acq_classic(ctx, X, "EI", 0.1),
                                   s * (lam * norm.cdf(lam) + norm.pdf(lam)), rtol=1e-10)
        np.testing.assert_allclose(aq.acq_classic(ctx, X, "EI", 0.1, log=True),
                                   np.log(s * (lam * norm.cdf(lam) + norm.pdf(lam))), rtol=1e-10)

    @pytest.mark.parametrize("kappa", [1e3, 1e6])
    def test_exploration_limit(self, kappa):
        rng = np.random.default_rng(int(kappa))
        probes = rng.uniform(size=(100, 3))
        for seed in range(5):
            m = trained_model(seed)
            ctx = AcquisitionContext(m, y_star=float(m.y.min() + m.offset))
            target = np.argmax(aq.acq_us(ctx, probes))
            for tag in aq.CLASSIC:
                v = aq.acquisition_value(AcquisitionKind(tag, kappa), ctx, probes)
                assert np.all(np.isfinite(v))
                assert np.argmax(v) == target, tag

    def test_requires_y_star(self):
        with pytest.raises(aq.ConfigurationError):
            aq.acq_classic(AcquisitionContext(trained_model(0)), np.zeros((1, 3)), "EI", 1.0)


class TestConvention:
    def test_criterion_is_negated_value(self):
        ctx = lw_context(0)
        ctx.y_star = 0.0
        X = np.random.default_rng(0).uniform(size=(10, 3))
        for kind in (AcquisitionKind("US"), AcquisitionKind("IVR"), AcquisitionKind("EI", 1.0)):
            np.testing.assert_array_equal(aq.criterion(kind, ctx, X),
                                          -aq.acquisition_value(kind, ctx, X))
