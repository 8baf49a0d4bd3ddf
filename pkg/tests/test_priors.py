import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import trapezoid

from umcmc import autodiff as ad
from umcmc import priors as pr
from umcmc.training import Adam

SCHED = pr.VPSchedule()


def _time_for_mu(mu, sched=SCHED):
    """Invert mu_t = exp(-(b0 t + (b1 - b0) t^2 / 2)) for t."""
    a, b, c = 0.5 * (sched.beta_max - sched.beta_min), sched.beta_min, math.log(mu)
    return (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)


class TestLaplaceScore:
    def test_values(self):
        out = pr.laplace_score_smoothed(np.array([0.0, 2.0, -2.0, 0.5]), 1.0).value
        np.testing.assert_array_equal(out, [0.0, -1.0, 1.0, -0.5])

    def test_matches_huber_gradient(self):
        z = np.random.default_rng(0).uniform(-3, 3, 200)
        h = 1e-6
        num = (pr.smoothed_laplace_logpdf((z + h)[:, None], 0.7) - pr.smoothed_laplace_logpdf((z - h)[:, None], 0.7)) / (2 * h)
        np.testing.assert_allclose(pr.laplace_score_smoothed(z, 0.7).value, num, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 6, elements=st.floats(-10, 10)), st.floats(0.05, 5.0))
    def test_odd_and_lipschitz(self, z, lam):
        s = pr.laplace_score_smoothed(z, lam).value
        np.testing.assert_allclose(pr.laplace_score_smoothed(-z, lam).value, -s, atol=1e-15)
        d = np.abs(np.subtract.outer(s, s))
        assert np.all(d <= np.abs(np.subtract.outer(z, z)) / lam + 1e-12)


class TestPriorMean:
    def test_zero_latent(self):
        W = np.random.default_rng(1).standard_normal((5, 3))
        np.testing.assert_array_equal(pr.prior_mean(W, np.zeros(3)).value, np.full(5, 0.5))

    def test_zero_weights(self):
        z = np.random.default_rng(2).standard_normal(3)
        np.testing.assert_array_equal(pr.prior_mean(np.zeros((4, 3)), z).value, np.full(4, 0.5))

    def test_scalar_case(self):
        assert pr.prior_mean(np.array([[2.0]]), np.array([1.0])).value[0] == pytest.approx(0.880797, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pr.prior_mean(np.ones((3, 2)), np.ones(3))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, 3, elements=st.floats(-5, 5)))
    def test_strictly_inside_unit_cube(self, z):
        W = np.random.default_rng(3).standard_normal((4, 3))
        m = pr.prior_mean(W, z).value
        assert np.all((m > 0) & (m < 1))

    def test_init_scaling(self):
        prior = pr.LatentLaplacePrior.init(400, 16, np.random.default_rng(4), lam=2.0)
        assert prior.lam == pytest.approx(2.0)
        assert prior.W.std() == pytest.approx(0.25, rel=0.05)


class TestSchedule:
    def test_endpoints(self):
        assert SCHED.mu(0.0).value == 1.0
        assert SCHED.mu(1.0).value == pytest.approx(math.exp(-10.05), rel=1e-12)
        assert SCHED.mu(1.0).value == pytest.approx(4.3e-5, rel=0.01)

    def test_monotone_and_variance_preserving(self):
        t = np.linspace(0, 1, 101)
        mu, sigma = SCHED.mu_sigma(t)
        assert np.all(np.diff(mu.value) < 0)
        np.testing.assert_allclose(mu.value ** 2 + sigma.value ** 2, 1.0, atol=1e-15)

    def test_invalid_betas(self):
        with pytest.raises(ValueError):
            pr.VPSchedule(0.0, 20.0)


class TestForwardSample:
    def test_t0_is_identity(self):
        x0 = np.random.default_rng(5).standard_normal(10)
        np.testing.assert_array_equal(pr.vp_forward_sample(x0, 0.0, SCHED, np.random.default_rng(0)).value, x0)

    def test_t1_marginal(self):
        rng = np.random.default_rng(6)
        x = pr.vp_forward_sample(rng.random(100_000) * 3, 1.0, SCHED, rng).value
        assert abs(x.mean()) < 4 / math.sqrt(1e5)
        assert abs(x.var() - 1.0) < 0.02

    def test_moments_match_schedule(self):
        rng = np.random.default_rng(7)
        t = 0.3
        mu, sigma = (v.item() for v in SCHED.mu_sigma(t))
        x = pr.vp_forward_sample(np.full(100_000, 2.0), t, SCHED, rng).value
        assert abs(x.mean() - 2.0 * mu) < 4 * sigma / math.sqrt(1e5)
        assert abs(x.std() / sigma - 1.0) < 0.01

    def test_variance_preservation(self):
        rng = np.random.default_rng(8)
        x = pr.vp_forward_sample(rng.standard_normal(100_000), 0.4, SCHED, rng).value
        assert abs(x.var() - 1.0) < 0.02

    def test_deterministic(self):
        a = pr.vp_forward_sample(np.ones(5), 0.5, SCHED, np.random.default_rng(9)).value
        b = pr.vp_forward_sample(np.ones(5), 0.5, SCHED, np.random.default_rng(9)).value
        assert np.array_equal(a, b)

    def test_time_out_of_range(self):
        with pytest.raises(ValueError):
            pr.vp_forward_sample(np.ones(2), 1.5, SCHED, np.random.default_rng(0))


class TestAnalyticDenoiser:
    def test_t0_returns_input(self):
        d = pr.AnalyticGaussian(np.array([0.3]), np.array([2.0]))
        np.testing.assert_allclose(d(np.array([1.7]), 0.0, SCHED).value, [1.7], atol=1e-15)

    def test_standard_normal_conjugate(self):
        t = _time_for_mu(0.8)
        mu, sigma = (v.item() for v in SCHED.mu_sigma(t))
        assert mu == pytest.approx(0.8) and sigma == pytest.approx(0.6)
        d = pr.AnalyticGaussian(np.zeros(1), np.ones(1))
        xt = np.array([-1.0, 0.5, 2.0])
        np.testing.assert_allclose(pr.analytic_mmse_denoiser(d, xt, t, SCHED).value, 0.8 * xt, rtol=1e-12)

    def test_nonzero_mean_vs_quadrature(self):
        m0, c0, t, xt = 0.7, 0.5, 0.2, 0.9
        mu, sigma = (v.item() for v in SCHED.mu_sigma(t))
        x = np.linspace(m0 - 12 * math.sqrt(c0), m0 + 12 * math.sqrt(c0), 100_000)
        logw = -(x - m0) ** 2 / (2 * c0) - (xt - mu * x) ** 2 / (2 * sigma ** 2)
        w = np.exp(logw - logw.max())
        ref = trapezoid(x * w, x) / trapezoid(w, x)
        got = pr.AnalyticGaussian(np.array([m0]), np.array([c0]))(np.array([xt]), t, SCHED).value[0]
        assert abs(got - ref) <= 1e-6

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            pr.AnalyticGaussian(np.zeros(2), np.array([1.0, 0.0]))


class TestScoreMatching:
    def test_identity_at_t0(self):
        x = np.random.default_rng(10).standard_normal((8, 3))
        loss = pr.score_matching_loss(lambda xt, t: xt, x, np.zeros(8), SCHED, np.random.default_rng(0))
        assert loss.item() == 0.0

    def test_zero_denoiser(self):
        x = np.random.default_rng(11).standard_normal((8, 3))
        loss = pr.score_matching_loss(lambda xt, t: ad.scale(xt, 0.0), x, np.full(8, 0.5), SCHED,
                                      np.random.default_rng(0))
        assert loss.item() == pytest.approx(np.sum(x ** 2) / 8)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            pr.score_matching_loss(lambda xt, t: xt, np.zeros((0, 2)), np.zeros(0), SCHED, np.random.default_rng(0))

    def test_small_dense_gradient(self):
        rng = np.random.default_rng(12)
        den = pr.SmallDense.init(3, rng, hidden=8)
        x, t, noise = rng.standard_normal((4, 3)), rng.uniform(0.1, 0.9, 4), rng.standard_normal((4, 3))

        def f(w1):
            p = dict(den.params, W1=w1)
            return pr.score_matching_loss(lambda a, b: pr.small_dense_forward(p, a, b, SCHED), x, t, SCHED, noise=noise)

        assert ad.finite_diff_check(f, den.params["W1"]) <= 1e-6

    def test_trained_small_dense_approaches_analytic(self):
        # scalar N(0, 1) data at a fixed mid-schedule time (sigma_t ~ 0.46)
        t, batch, steps = 0.15, 2048, 3000
        rng = np.random.default_rng(1)
        den = pr.SmallDense.init(1, rng)
        opt = Adam(1e-2, 0.9, 0.999)
        for it in range(steps):
            opt.lr = 1e-2 * 0.01 ** (it / steps)
            tape = ad.Tape()
            p = tape.bind(den.params)
            loss = pr.score_matching_loss(lambda a, b: pr.small_dense_forward(p, a, b, SCHED),
                                          rng.standard_normal((batch, 1)), np.full(batch, t), SCHED, rng)
            gm = tape.backward(loss)
            opt.step(den.params, {k: gm[p[k]] for k in p})
        xs = np.linspace(-3, 3, 121)[:, None]
        ref = pr.AnalyticGaussian(np.zeros(1), np.ones(1))(xs, t, SCHED).value
        assert np.max(np.abs(den(xs, t, SCHED).value - ref)) <= 0.05
