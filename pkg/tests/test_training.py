import math

import numpy as np
import pytest

from umcmc import autodiff as ad
from umcmc import problems as pb
from umcmc import training as tr
from umcmc.kernels import ObservationBatch, UnfoldedModel, unfold_chain


def _linear_critic(u):
    u = np.asarray(u, dtype=np.float64)[None, :]
    return lambda x, y: ad.reshape(ad.matvec(u, x), (-1,))


def _const_critic(c):
    return lambda x, y: ad.add(ad.scale(ad.sum(ad._wrap(x), axis=1), 0.0), c)


def _setup(seed=0, L=2, L0=None, n_train=64, **cfg):
    rng = np.random.default_rng(seed)
    data = pb.toy_paired_data(pb.gmm_toy_problem(0.3), n_train, 4, rng)
    model = UnfoldedModel.sgs(2, 2, L, rng, L0=L0)
    disc = tr.Discriminator.init(2, 2, rng, hidden=16)
    base = dict(sd_threshold=1.0, total_steps=4, validation_interval=2, batch_size=8, n_critic=1,
                n_val=4, val_size=4, generator_lr=1e-3, discriminator_lr=1e-3)
    base.update(cfg)
    return tr.TrainingConfig(**base), data, model, disc


class TestAdversarialLoss:
    def test_constant_critic(self):
        rng = np.random.default_rng(0)
        x, y, g = rng.random((6, 3)), rng.random((6, 2)), ad.param(rng.random((6, 3)))
        out = tr.loss_adv(_const_critic(3.0), x, y, g)
        assert out.item() == 0.0
        (grad,) = ad.grad(out, [g])
        np.testing.assert_array_equal(grad, 0.0)

    def test_matched_law_large_batch(self):
        rng = np.random.default_rng(1)
        n = 100_000
        disc = tr.Discriminator.init(2, 2, rng, hidden=16)
        y = rng.standard_normal((n, 2))
        x, xhat = y + rng.standard_normal((n, 2)), y + rng.standard_normal((n, 2))
        val = tr.loss_adv(disc, x, y, ad.const(xhat)).item()
        se = math.sqrt(2.0 * disc(x, y).value.var() / n)
        assert abs(val) <= 4 * se

    def test_single_retained_layer_is_final(self):
        cfg, data, model, disc = _setup(L=3, L0=3)
        x, ob = data.batch(np.random.default_rng(2), 5)
        phi = {k: ad.const(v) for k, v in disc.params.items()}
        seeds = np.arange(5)
        terms = tr.generator_loss_terms(model, model.bind(), phi, x, ob, seeds, np.random.default_rng(3))
        final = unfold_chain(model, ob, seeds).final()
        ref = tr.loss_adv(lambda a, b: tr.disc_forward(phi, a, b), x, ob.y_flat, final)
        assert terms["adv"].item() == ref.item()

    def test_select_layers(self):
        s = [ad.const(np.full((3, 2), float(k))) for k in range(3)]
        out = tr.select_layers(s, np.array([2, 0, 1]))
        np.testing.assert_array_equal(out.value, [[2, 2], [0, 0], [1, 1]])


class TestGradientPenalty:
    def test_unit_slope_linear(self):
        rng = np.random.default_rng(4)
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        x, g = rng.random((8, 3)), rng.random((8, 3))
        assert tr.loss_gp(_linear_critic(u), x, None, g, rng.random(8)).item() <= 1e-20

    def test_zero_critic(self):
        rng = np.random.default_rng(5)
        x, g = rng.random((8, 3)), rng.random((8, 3))
        critic = lambda a, b: ad.scale(ad.sum(a, axis=1), 0.0)  # noqa: E731
        assert tr.loss_gp(critic, x, None, g, rng.random(8)).item() == pytest.approx(1.0, abs=1e-5)

    def test_double_slope_linear(self):
        rng = np.random.default_rng(6)
        u = rng.standard_normal(4)
        u *= 2.0 / np.linalg.norm(u)
        x, g = rng.random((5, 4)), rng.random((5, 4))
        assert tr.loss_gp(_linear_critic(u), x, None, g, rng.random(5)).item() == pytest.approx(1.0, abs=1e-12)

    def test_penalty_gradient_reaches_critic(self):
        rng = np.random.default_rng(7)
        disc = tr.Discriminator.init(2, 2, rng, hidden=8)
        x, y, g, alpha = rng.random((6, 2)), rng.random((6, 2)), rng.random((6, 2)), rng.random(6)

        def f(w1):
            return tr.loss_gp(lambda a, b: tr.disc_forward(dict(disc.params, W1=w1), a, b), x, y, g, alpha)

        assert ad.finite_diff_check(f, disc.params["W1"]) <= 1e-5


class TestReconstructionLosses:
    def test_l1_perfect(self):
        x = np.random.default_rng(8).random((4, 5))
        assert tr.loss_l1(ad.const(x), x).item() == 0.0

    def test_l1_constant_offset(self):
        x = np.random.default_rng(9).random((3, 7))
        assert tr.loss_l1(ad.const(x + 0.25), x).item() == pytest.approx(0.25 * 7, abs=1e-14)

    def test_l1_single_sample_trace(self):
        rng = np.random.default_rng(10)
        s, x = rng.random((4, 3)), rng.random((4, 3))
        # with one retained sample the ergodic mean is that sample
        trace_mean = tr.loss_sd([ad.const(s)]).item()
        assert trace_mean == 0.0
        assert tr.loss_l1(ad.const(s), x).item() == pytest.approx(np.abs(s - x).sum() / 4, abs=1e-14)

    def test_sd_identical_samples(self):
        s = np.random.default_rng(11).random((3, 4))
        assert tr.loss_sd([ad.const(s)] * 5).item() <= 1e-14

    def test_sd_two_samples(self):
        rng = np.random.default_rng(12)
        a, b = rng.random((5, 3)), rng.random((5, 3))
        got = tr.loss_sd([ad.const(a), ad.const(b)]).item()
        assert got == pytest.approx(np.abs(a - b).sum() / 5, rel=1e-14)

    def test_sd_permutation_invariant(self):
        rng = np.random.default_rng(13)
        s = [ad.const(rng.random((2, 3))) for _ in range(4)]
        a = tr.loss_sd(s).item()
        b = tr.loss_sd([s[2], s[0], s[3], s[1]]).item()
        assert a == pytest.approx(b, rel=1e-15)

    def test_sd_empty(self):
        with pytest.raises(ValueError):
            tr.loss_sd([])


class TestTotalLoss:
    def test_zero_weights_is_adversarial(self):
        adv = ad.const(np.array(0.7))
        out = tr.total_generator_loss(adv, ad.const(np.array(3.0)), ad.const(np.array(2.0)),
                                      ad.const(np.array(5.0)), 0.0, 0.0, 0.0)
        assert out.item() == 0.7

    def test_zero_weights_constant_critic(self):
        rng = np.random.default_rng(14)
        x, y, g = rng.random((4, 2)), rng.random((4, 2)), ad.const(rng.random((4, 2)))
        adv = tr.loss_adv(_const_critic(-1.5), x, y, g)
        z = ad.const(np.array(1.0))
        assert tr.total_generator_loss(adv, z, z, z, 0.0, 0.0, 0.0).item() == 0.0

    def test_component_sum_two_samples(self):
        rng = np.random.default_rng(15)
        x, y = rng.random((3, 2)), rng.random((3, 2))
        a, b = rng.random((3, 2)), rng.random((3, 2))
        disc = tr.Discriminator.init(2, 2, rng, hidden=8)
        m = (a + b) / 2
        adv = disc(x, y).value.mean() - disc(a, y).value.mean()
        l1 = np.abs(x - m).sum() / 3
        sd = np.abs(a - b).sum() / 3
        ps = np.abs(x - b).mean()
        samples = [ad.const(a), ad.const(b)]
        got = tr.total_generator_loss(tr.loss_adv(disc, x, y, samples[0]), tr.loss_l1(ad.const(m), x),
                                      tr.loss_sd(samples), tr.mean_abs_perceptual(x, samples[1]),
                                      1.0, 0.3, 0.5).item()
        assert got == pytest.approx(adv + l1 - 0.3 * sd + 0.5 * ps, rel=1e-13)


def _gaussian_ratio(s2, tau2, n):
    """E||x - xhat||^2 / E||x - mean of n draws||^2 for x ~ N(m, s2), xhat ~ N(m, tau2)."""
    return (s2 + tau2) / (s2 + tau2 / n)


class TestRobbinsMonro:
    def test_target(self):
        assert tr.rm_target(8) == 2.25

    def test_fixed_point(self):
        assert tr.robbins_monro_update(0.4, (2.25, 1.0), 8, 0.5) == 0.4
        assert tr.robbins_monro_update(0.4, {"mse_single": 4.5, "mse_mean": 2.0}, 8, 0.5, -1) == 0.4

    def test_never_negative(self):
        assert tr.robbins_monro_update(0.01, (100.0, 1.0), 8, 1.0) == 0.0

    def test_direction(self):
        assert tr.robbins_monro_update(1.0, (1.0, 1.0), 8, 0.1, 1) > 1.0
        assert tr.robbins_monro_update(1.0, (1.0, 1.0), 8, 0.1, -1) < 1.0

    def test_converges_on_gaussian_family(self):
        # generator spread tau = w_sd, so r increases with w_sd
        s2, n = 0.5, 8
        w, k = 0.0, 0
        for k in range(2000):
            r = _gaussian_ratio(s2, w ** 2, n)
            w = tr.robbins_monro_update(w, (r, 1.0), n, 0.5 / (k + 1) ** 0.6, direction=1)
        assert abs(_gaussian_ratio(s2, w ** 2, n) / 2.25 - 1.0) <= 0.1
        assert w ** 2 == pytest.approx(1.25 * s2 / (1 - 2.25 / n), rel=0.1)

    def test_converges_with_noisy_statistics(self):
        rng = np.random.default_rng(16)
        s2, n, m = 1.0, 8, 400
        w = 0.2
        for k in range(300):
            x = rng.normal(0.0, math.sqrt(s2), m)
            draws = rng.normal(0.0, w, (m, n))
            single = np.mean((draws[:, 0] - x) ** 2)
            mean = np.mean((draws.mean(axis=1) - x) ** 2)
            w = tr.robbins_monro_update(w, (single, mean), n, 0.5 / (k + 1) ** 0.6)
        assert abs(_gaussian_ratio(s2, w ** 2, n) / 2.25 - 1.0) <= 0.1

    def test_calibrate_direction(self):
        assert tr.calibrate_direction(lambda w: 1.0 + w, 0.0, 1.0) == 1
        assert tr.calibrate_direction(lambda w: 3.0 - w, 0.0, 1.0) == -1
        assert tr.calibrate_direction(lambda w: 2.0, 0.0, 1.0) == 1


class TestSafeguard:
    def test_below_threshold(self):
        assert tr.sd_safeguard(0.7, 0.5, 1.0) == 0.7

    def test_above_threshold(self):
        assert tr.sd_safeguard(0.7, 2.0, 1.0) == 0.0

    def test_idempotent(self):
        for mse in (0.5, 2.0):
            once = tr.sd_safeguard(0.7, mse, 1.0)
            assert tr.sd_safeguard(once, mse, 1.0) == once

    def test_threshold_positive(self):
        with pytest.raises(ValueError):
            tr.sd_safeguard(0.7, 0.5, 0.0)


class TestConfig:
    def test_threshold_required_positive(self):
        with pytest.raises(ValueError):
            tr.TrainingConfig(sd_threshold=0.0)

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            tr.TrainingConfig(sd_threshold=1.0, w_sd=-0.1)

    def test_defaults(self):
        cfg = tr.TrainingConfig(sd_threshold=1.0)
        assert cfg.w1 == 1.0 and cfg.n_critic == 5 and cfg.gp_weight == 1.0


class TestAdam:
    def test_first_step_is_lr_sign(self):
        p = {"a": np.array([1.0, -2.0])}
        tr.Adam(0.1).step(p, {"a": np.array([3.0, -0.5])})
        np.testing.assert_allclose(p["a"], [0.9, -1.9], atol=1e-8)


class TestTrain:
    def test_zero_learning_rates(self):
        cfg, data, model, disc = _setup(generator_lr=0.0, discriminator_lr=0.0)
        m0 = {k: v.copy() for k, v in model.params.items()}
        d0 = {k: v.copy() for k, v in disc.params.items()}
        cks = list(tr.train(cfg, data, model, disc, seed=3))
        assert [c.step for c in cks] == [0, 2, 4]
        for k in m0:
            assert np.array_equal(model.params[k], m0[k])
        for k in d0:
            assert np.array_equal(disc.params[k], d0[k])

    def test_parameters_move(self):
        cfg, data, model, disc = _setup()
        w0 = model.params["W"].copy()
        list(tr.train(cfg, data, model, disc, seed=3))
        assert not np.array_equal(model.params["W"], w0)

    def test_zero_steps(self):
        cfg, data, model, disc = _setup(total_steps=0)
        cks = list(tr.train(cfg, data, model, disc, seed=3))
        assert len(cks) == 1 and cks[0].step == 0

    def test_reproducible(self):
        runs = []
        for _ in range(2):
            cfg, data, model, disc = _setup()
            runs.append(list(tr.train(cfg, data, model, disc, seed=5))[-1])
        for k in runs[0].model.params:
            assert np.array_equal(runs[0].model.params[k], runs[1].model.params[k])
        np.testing.assert_equal(runs[0].log, runs[1].log)

    def test_resume_bitwise(self, tmp_path):
        cfg, data, model, disc = _setup(total_steps=6)
        full = list(tr.train(cfg, data, model, disc, seed=5))
        mid = [c for c in full if c.step == 2][0]
        mid.save(tmp_path / "mid.umc")
        cfg2, data2, model2, disc2 = _setup(total_steps=6)
        resumed = list(tr.train(cfg2, data2, model2, disc2, seed=5, resume=tr.Checkpoint.load(tmp_path / "mid.umc")))
        assert [c.step for c in resumed] == [4, 6]
        a, b = full[-1].to_record(), resumed[-1].to_record()
        assert a[0].keys() == b[0].keys()
        for k in a[0]:
            assert np.array_equal(a[0][k], b[0][k]), k
        full[-1].save(tmp_path / "a.umc")
        resumed[-1].save(tmp_path / "b.umc")
        assert (tmp_path / "a.umc").read_bytes() == (tmp_path / "b.umc").read_bytes()

    def test_checkpoint_roundtrip(self, tmp_path):
        cfg, data, model, disc = _setup()
        ck = list(tr.train(cfg, data, model, disc, seed=1))[-1]
        ck.save(tmp_path / "c.umc")
        back = tr.Checkpoint.load(tmp_path / "c.umc")
        back.save(tmp_path / "d.umc")
        assert (tmp_path / "c.umc").read_bytes() == (tmp_path / "d.umc").read_bytes()
        assert back.step == ck.step and back.w_sd == ck.w_sd

    def test_w_sd_nonnegative_and_logged(self):
        cfg, data, model, disc = _setup(w_sd=0.05, total_steps=6)
        cks = list(tr.train(cfg, data, model, disc, seed=2))
        for row in cks[-1].log[1:]:
            assert row["w_sd_next"] >= 0.0
            assert {"mse_single", "mse_mean", "ratio", "val_psnr"} <= row.keys()

    def test_safeguard_zeroes_weight(self):
        cfg, data, model, disc = _setup(w_sd=0.5, sd_threshold=1e-9)
        cks = list(tr.train(cfg, data, model, disc, seed=2))
        assert cks[-1].w_sd == 0.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_returns_last_checkpoint(self):
        cfg, data, model, disc = _setup(generator_lr=1e6, discriminator_lr=0.0, total_steps=50,
                                        calibrate_direction=False)
        model.params["log_gamma"][:] = 3.0
        with pytest.raises(tr.TrainingDivergenceError) as info:
            list(tr.train(cfg, data, model, disc, seed=2))
        last = info.value.last_checkpoint
        assert last is None or last.step < info.value.step


class TestGeneratorGradient:
    def test_matches_finite_differences(self):
        cfg, data, model, disc = _setup(L=2, L0=1, seed=17)
        model.params["log_gamma"][:] = math.log(0.2)
        x, ob = data.batch(np.random.default_rng(4), 4)
        seeds = np.array([11, 12, 13, 14])
        phi = {k: ad.const(v) for k, v in disc.params.items()}

        def f(W):
            p = {k: ad.const(v) for k, v in model.params.items()}
            p["W"] = W
            t = tr.generator_loss_terms(model, p, phi, x, ob, seeds, np.random.default_rng(9))
            return tr.total_generator_loss(t["adv"], t["l1"], t["sd"], t["ps"], 1.0, 0.2, 0.1)

        assert ad.finite_diff_check(f, model.params["W"]) <= 1e-5

    def test_validation_uses_independent_chains(self):
        cfg, data, model, disc = _setup()
        stats = tr.validation_stats(model, data, cfg, seed=0)
        assert stats["mse_single"] > stats["mse_mean"] > 0
        assert stats["ratio"] == pytest.approx(stats["mse_single"] / stats["mse_mean"])
