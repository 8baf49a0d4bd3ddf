import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from umcmc import linops as lo
from umcmc import problems as pb
from umcmc.priors import smoothed_laplace_logpdf


class TestIdx:
    def test_roundtrip_and_padding(self, tmp_path):
        imgs = np.random.default_rng(0).integers(0, 256, (3, 28, 28)).astype(np.uint8)
        imgs[0, 0, 0], imgs[0, 0, 1] = 255, 0
        path = tmp_path / "imgs.idx"
        pb.write_idx_images(path, imgs)
        ds = pb.load_idx_images(path, pad=2)
        assert ds.images.shape == (3, 32, 32)
        assert ds.images[0, 2, 2] == 1.0 and ds.images[0, 2, 3] == 0.0
        np.testing.assert_array_equal(ds.images[:, 2:-2, 2:-2], imgs / 255.0)
        assert pb.load_idx_images(path, pad=0).shape == (28, 28)

    def test_labels(self, tmp_path):
        path = tmp_path / "labels.idx"
        path.write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x03" + bytes([7, 0, 9]))
        np.testing.assert_array_equal(pb.load_idx_labels(path), [7, 0, 9])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "labels.idx"
        path.write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x01\x05")
        with pytest.raises(pb.IdxFormatError, match="magic"):
            pb.load_idx_images(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "short.idx"
        pb.write_idx_images(path, np.zeros((2, 4, 4), dtype=np.uint8))
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(pb.IdxFormatError, match="truncated"):
            pb.load_idx_images(path)


class TestBlurKernels:
    @pytest.mark.parametrize("size,ls,std", [(11, 0.3, 0.25), (19, 0.5, 0.4)])
    def test_unit_sum_nonnegative(self, size, ls, std):
        for seed in range(50):
            k = pb.sample_motion_blur_kernel(size, ls, std, np.random.default_rng(seed))
            assert k.shape == (size, size)
            assert np.all(k >= 0)
            assert abs(k.sum() - 1.0) <= 1e-12

    def test_zero_std_is_delta(self):
        k = pb.sample_motion_blur_kernel(11, 0.3, 0.0, np.random.default_rng(0))
        assert k[5, 5] == 1.0 and k.sum() == 1.0

    def test_reproducible(self):
        a = pb.sample_motion_blur_kernel(11, 0.3, 0.25, np.random.default_rng(4))
        b = pb.sample_motion_blur_kernel(11, 0.3, 0.25, np.random.default_rng(4))
        assert np.array_equal(a, b)

    def test_not_trivial(self):
        k = pb.sample_motion_blur_kernel(11, 0.3, 0.25, np.random.default_rng(1))
        assert np.count_nonzero(k) > 5

    def test_even_size_rejected(self):
        with pytest.raises(ValueError):
            pb.sample_motion_blur_kernel(10, 0.3, 0.25, np.random.default_rng(0))

    def test_matern_covariance(self):
        t = np.array([0.0, 0.2])
        c = pb.matern32_cov(t, 0.3, 2.0)
        r = math.sqrt(3) * 0.2 / 0.3
        assert c[0, 0] == 4.0
        assert c[0, 1] == pytest.approx(4.0 * (1 + r) * math.exp(-r))


class TestFourierMasks:
    def test_binary_and_hermitian(self):
        for seed in range(20):
            m = pb.sample_fourier_mask((16, 12), 6, rng=np.random.default_rng(seed))
            assert set(np.unique(m)) <= {0.0, 1.0}
            flipped = np.roll(m[::-1, ::-1], (1, 1), axis=(0, 1))
            np.testing.assert_array_equal(m, flipped)

    def test_real_roundtrip(self):
        rng = np.random.default_rng(1)
        op = lo.FourierMask(pb.sample_fourier_mask((16, 16), 8, rng=rng))
        x = rng.random((16, 16))
        u = op.apply(x)
        c = np.fft.ifft2(np.conj(op.mask) * (u[..., 0] + 1j * u[..., 1]), norm="ortho")
        assert np.max(np.abs(c.imag)) <= 1e-10

    def test_coverage_monotone_in_tracks(self):
        for seed in range(10):
            cover = [pb.sample_fourier_mask((32, 32), n, rng=np.random.default_rng(seed)).mean() for n in (1, 4, 16)]
            assert cover[0] <= cover[1] <= cover[2]
            assert cover[2] < 1.0

    def test_needs_a_track(self):
        with pytest.raises(ValueError):
            pb.sample_fourier_mask((8, 8), 0, rng=np.random.default_rng(0))


class TestObservations:
    def test_tiny_sigma_exact(self):
        rng = np.random.default_rng(2)
        op = lo.Circulant2D(rng.random((3, 3)), (6, 6))
        x = rng.random((6, 6))
        ob = pb.make_observation(x, op, 1e-300, rng)
        assert np.max(np.abs(ob.y - op.apply(x))) <= 1e-15

    def test_noise_variance(self):
        rng = np.random.default_rng(3)
        op = lo.Identity((100, 1000))
        ob = pb.make_observation(np.zeros((100, 1000)), op, 0.3, rng)
        assert abs(ob.y.var() / 0.09 - 1.0) <= 0.02

    def test_complex_noise_variance(self):
        rng = np.random.default_rng(4)
        op = lo.FourierMask(np.ones((100, 1000)))
        ob = pb.make_observation(np.zeros((100, 1000)), op, 0.3, rng)
        total = np.mean(np.sum(ob.y ** 2, axis=-1))
        assert abs(total / 0.09 - 1.0) <= 0.02

    def test_deterministic(self):
        op = lo.Identity(4)
        a = pb.make_observation(np.ones(4), op, 0.1, np.random.default_rng(5)).y
        b = pb.make_observation(np.ones(4), op, 0.1, np.random.default_rng(5)).y
        assert np.array_equal(a, b)


class TestToyPriors:
    def test_mixture_moments(self):
        prior = pb.gmm_toy_problem().prior
        x = prior.sample(200_000, np.random.default_rng(6))
        np.testing.assert_allclose(x.mean(axis=0), [0.5, 0.5], atol=0.003)
        np.testing.assert_allclose(x.std(axis=0), prior.marginal_sd(), rtol=0.01)

    def test_latent_z_law(self):
        prior = pb.LatentLaplaceToyPrior(np.eye(2), 1.0, 0.3)
        z = prior.sample_z(200_000, np.random.default_rng(7))[:, 0]
        grid = np.linspace(-15, 15, 30001)
        dens = np.exp(smoothed_laplace_logpdf(grid[:, None], 1.0))
        dens /= trapezoid(dens, grid)
        second = np.sum(grid ** 2 * dens) * (grid[1] - grid[0])
        assert abs(np.mean(z ** 2) / second - 1.0) < 0.02

    def test_dimension_limit(self):
        with pytest.raises(ValueError):
            pb.ToyProblem(pb.GaussianPrior(np.zeros(5), np.eye(5)), lo.Identity(5), 1.0)


class TestQuadrature:
    def test_gaussian_conjugate_mean(self):
        mean0, cov0 = np.array([0.2, -0.4]), np.array([[1.0, 0.3], [0.3, 0.5]])
        prob = pb.ToyProblem(pb.GaussianPrior(mean0, cov0), lo.Identity(2), 0.7, grid_points=161)
        y = np.array([0.5, 1.1])
        post = pb.toy_posterior_quadrature(prob, y)
        P = np.linalg.inv(cov0) + np.eye(2) / 0.49
        exact = np.linalg.solve(P, np.linalg.solve(cov0, mean0) + y / 0.49)
        assert np.max(np.abs(post.mean - exact)) <= 1e-6

    def test_normalisation(self):
        prob = pb.ToyProblem(pb.GaussianPrior(np.zeros(2), np.eye(2)), lo.Identity(2), 0.5)
        post = pb.toy_posterior_quadrature(prob, np.array([0.3, -0.2]))
        w = np.outer(*[np.r_[0.5, np.ones(len(a) - 2), 0.5] * (a[1] - a[0]) for a in post.grid])
        assert abs(np.sum(post.density * w) - 1.0) <= 1e-8

    def test_symmetric_mixture(self):
        mix = pb.GaussianMixturePrior([0.5, 0.5], [[1.0, -1.0], [-1.0, 1.0]], [np.eye(2) * 0.3] * 2)
        prob = pb.ToyProblem(mix, lo.Identity(2), 0.5)
        post = pb.toy_posterior_quadrature(prob, np.zeros(2))
        assert np.max(np.abs(post.mean)) <= 1e-12
        s = post.sample(100_000, np.random.default_rng(8))
        assert np.max(np.abs(s.mean(axis=0))) < 0.02

    def test_mixture_closed_form_vs_grid(self):
        prob = pb.gmm_toy_problem(0.15)
        y = np.array([[0.45, 0.55]])
        cf = pb.toy_posterior_quadrature(prob, y)
        grid = pb._x_grid_posterior(prob, y, 401)
        np.testing.assert_allclose(cf.mean, grid.mean, atol=1e-6)
        assert abs(cf.normalizer / grid.normalizer - 1.0) <= 1e-6

    def test_grid_sampler_moments(self):
        prob = pb.ToyProblem(pb.GaussianPrior(np.zeros(2), np.eye(2)), lo.Identity(2), 1.0)
        post = pb.toy_posterior_quadrature(prob, np.array([1.0, -1.0]))
        s = post.sample(100_000, np.random.default_rng(9))
        np.testing.assert_allclose(s.mean(axis=0), [0.5, -0.5], atol=0.01)
        np.testing.assert_allclose(s.var(axis=0), [0.5, 0.5], rtol=0.03)

    def test_latent_refinement_stable(self):
        W = np.array([[2.0, -1.0], [0.5, 1.5]])
        prob = pb.ToyProblem(pb.LatentLaplaceToyPrior(W, 1.0, 0.3), lo.Identity(2), 0.3)
        y = np.array([0.4, 0.8])
        coarse = pb.toy_posterior_quadrature(prob, y)
        fine = pb._latent_posterior(prob, y, 40, check=False)
        assert np.max(np.abs(coarse.mean - fine.mean)) < 1e-6

    def test_too_coarse_grid_detected(self):
        prob = pb.ToyProblem(pb.GaussianPrior(np.zeros(2), np.eye(2) * 0.01), lo.Identity(2), 0.02, grid_points=7)
        with pytest.raises(pb.GridTooCoarseError):
            pb.toy_posterior_quadrature(prob, np.array([0.5, 0.5]))
