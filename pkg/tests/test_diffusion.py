import math

import numpy as np
import pytest

from topogen import diffusion as df
from topogen.latent_fit import LatentStats


def tiny_denoiser(latent_dim=4, seed=0, out_scale=0.2):
    rng = np.random.default_rng(seed)
    cfg = df.DenoiserConfig(latent_dim=latent_dim, width=12, blocks=2,
                            dropout=0.0, time_embed_dim=8)
    w = df.denoiser_init(cfg, rng)
    w.out_w[:] = rng.normal(size=w.out_w.shape) * out_scale
    return w


class TestSchedule:
    def test_cumulative_product_example(self):
        s = df.make_schedule(2, 0.1, 0.2)
        assert s.alpha_bar == pytest.approx([0.9, 0.72])

    def test_alpha_bar_monotone_decreasing(self):
        s = df.make_schedule()
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert s.alpha_bar[-1] < s.alpha_bar[0]

    def test_default_terminal_value(self):
        s = df.make_schedule(1000, 1e-4, 0.02)
        # oracle: product in log space
        oracle = math.exp(float(np.sum(np.log1p(-np.linspace(1e-4, 0.02, 1000)))))
        assert s.alpha_bar[-1] == pytest.approx(oracle, rel=1e-12)
        assert s.alpha_bar[-1] == pytest.approx(4.04e-5, rel=5e-3)

    def test_sigma_is_sqrt_beta(self):
        s = df.make_schedule(10, 0.01, 0.05)
        assert s.sigma == pytest.approx(np.sqrt(s.beta))

    @pytest.mark.parametrize("args", [(1, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2),
                                      (10, 0.1, 1.0)])
    def test_invalid_ranges_rejected(self, args):
        with pytest.raises(ValueError):
            df.make_schedule(*args)


def manual_schedule(alpha_bar, beta=None):
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    T = len(alpha_bar)
    if beta is None:
        beta = np.full(T, 0.01)
    alpha = np.empty(T)
    alpha[0] = alpha_bar[0]
    alpha[1:] = alpha_bar[1:] / alpha_bar[:-1]
    return df.NoiseSchedule(T, np.asarray(beta), alpha, alpha_bar, np.sqrt(beta),
                            float(beta[0]), float(beta[-1]))


class TestForwardNoise:
    def test_direct_substitution(self):
        s = manual_schedule([0.25])
        out = df.forward_noise(np.array([1.0, 0.0]), 1, np.array([0.0, 1.0]), s)
        assert out == pytest.approx([0.5, math.sqrt(0.75)])
        assert out[1] == pytest.approx(0.8660254037844386)

    def test_zero_noise(self):
        s = df.make_schedule(10, 0.01, 0.05)
        z0 = np.array([2.0, -1.0])
        out = df.forward_noise(z0, 7, np.zeros(2), s)
        assert out == pytest.approx(math.sqrt(s.alpha_bar[6]) * z0)

    def test_t_out_of_range(self):
        s = df.make_schedule(10, 0.01, 0.05)
        with pytest.raises(ValueError):
            df.forward_noise(np.zeros(2), 0, np.zeros(2), s)
        with pytest.raises(ValueError):
            df.forward_noise(np.zeros(2), 11, np.zeros(2), s)

    def test_monte_carlo_moments(self):
        # empirical mean and covariance of z_t for fixed z0 over many draws
        s = df.make_schedule(100, 1e-3, 0.03)
        t, d, n = 60, 6, 10000
        rng = np.random.default_rng(0)
        z0 = rng.normal(size=d)
        draws = np.array([df.forward_noise(z0, t, rng.standard_normal(d), s)
                          for _ in range(n)])
        ab = s.alpha_bar[t - 1]
        se_mean = math.sqrt((1 - ab) / n)
        assert np.max(np.abs(draws.mean(axis=0) - math.sqrt(ab) * z0)) < 3 * se_mean
        cov = np.cov(draws.T, ddof=0)
        se_var = (1 - ab) * math.sqrt(2.0 / n)
        assert np.max(np.abs(np.diag(cov) - (1 - ab))) < 3 * se_var


class TestDenoiser:
    def test_zero_weights_zero_prediction(self):
        w = tiny_denoiser()
        for a in w.arrays():
            a[:] = 0.0
        assert np.all(df.denoiser_apply(w, np.ones(4), 5) == 0)

    def test_inference_deterministic(self):
        w = tiny_denoiser(seed=1)
        z = np.random.default_rng(2).normal(size=4)
        assert np.array_equal(df.denoiser_apply(w, z, 9), df.denoiser_apply(w, z, 9))

    def test_dropout_only_in_training(self):
        cfg = df.DenoiserConfig(latent_dim=4, width=12, blocks=2, dropout=0.5,
                                time_embed_dim=8)
        w = df.denoiser_init(cfg, np.random.default_rng(3))
        w.out_w[:] = np.random.default_rng(30).normal(size=w.out_w.shape)
        z = np.random.default_rng(4).normal(size=(1, 4))
        rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(6)
        train_a, _ = df.denoiser_forward(w, z, 3, train=True, rng=rng_a)
        train_b, _ = df.denoiser_forward(w, z, 3, train=True, rng=rng_b)
        assert not np.allclose(train_a, train_b)

    def test_input_gradient_matches_finite_differences(self):
        w = tiny_denoiser(seed=7)
        rng = np.random.default_rng(8)
        z = rng.normal(size=4)
        v = rng.normal(size=4)
        t = 17
        out, cache = df.denoiser_forward(w, z.reshape(1, -1), t)
        _, gz = df.denoiser_backward(w, cache, v.reshape(1, -1), need_param_grads=False)
        h = 1e-6
        fd = np.zeros(4)
        for i in range(4):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fd[i] = (v @ df.denoiser_apply(w, zp, t) - v @ df.denoiser_apply(w, zm, t)) / (2 * h)
        assert np.max(np.abs(gz[0] - fd) / np.maximum(1e-9, np.abs(fd))) < 1e-4

    def test_shape_mismatch_rejected(self):
        w = tiny_denoiser()
        with pytest.raises(ValueError):
            df.denoiser_apply(w, np.zeros(5), 1)


class TestPredictClean:
    def test_inverts_forward_with_true_noise(self):
        s = df.make_schedule(50, 1e-3, 0.02)
        rng = np.random.default_rng(9)
        z0 = rng.normal(size=6)
        eps = rng.standard_normal(6)
        for t in (1, 20, 50):
            z_t = df.forward_noise(z0, t, eps, s)
            back = df.predict_clean(z_t, t, eps, s)
            assert back == pytest.approx(z0, abs=1e-12)

    def test_zero_prediction(self):
        s = df.make_schedule(50, 1e-3, 0.02)
        z_t = np.array([1.0, -2.0])
        assert df.predict_clean(z_t, 10, np.zeros(2), s) == pytest.approx(
            z_t / math.sqrt(s.alpha_bar[9]))

    def test_random_case_direct_formula(self):
        s = df.make_schedule(30, 1e-3, 0.05)
        rng = np.random.default_rng(10)
        z_t, eps_hat, t = rng.normal(size=4), rng.normal(size=4), 13
        ab = s.alpha_bar[t - 1]
        expected = (z_t - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab)
        assert df.predict_clean(z_t, t, eps_hat, s) == pytest.approx(expected, abs=1e-15)


class TestDdpmStep:
    def test_zero_inputs(self):
        s = df.make_schedule(10, 0.01, 0.05)
        z = np.array([1.0, 2.0])
        out = df.ddpm_step(z, 5, np.zeros(2), np.zeros(2), s)
        assert out == pytest.approx(z / math.sqrt(s.alpha[4]))

    def test_single_step_posterior_formula(self):
        s = df.make_schedule(2, 0.1, 0.2)
        rng = np.random.default_rng(11)
        z0 = rng.normal(size=3)
        eps = rng.standard_normal(3)
        z1 = df.forward_noise(z0, 1, eps, s)
        out = df.ddpm_step(z1, 1, eps, np.zeros(3), s)
        a, ab = s.alpha[0], s.alpha_bar[0]
        expected = (z1 - (1 - a) / math.sqrt(1 - ab) * eps) / math.sqrt(a)
        assert out == pytest.approx(expected, abs=1e-15)

    def test_telescoping_product(self):
        s = df.make_schedule(40, 1e-3, 0.04)
        z = np.array([1.0, -1.0, 0.5])
        for t in range(40, 0, -1):
            z = df.ddpm_step(z, t, np.zeros(3), np.zeros(3), s)
        assert z == pytest.approx(np.array([1.0, -1.0, 0.5]) / math.sqrt(s.alpha_bar[-1]),
                                  rel=1e-10)

    def test_final_step_requires_zero_noise(self):
        s = df.make_schedule(10, 0.01, 0.05)
        with pytest.raises(ValueError):
            df.ddpm_step(np.zeros(2), 1, np.zeros(2), np.ones(2), s)


class TestSampling:
    def test_fixed_seed_reproducible(self):
        w = tiny_denoiser(seed=12)
        s = df.make_schedule(30, 1e-3, 0.05)
        a = df.sample_unguided(w, s, 3, seed=42)
        b = df.sample_unguided(w, s, 3, seed=42)
        assert np.array_equal(a, b)
        assert not np.array_equal(a[0], a[1])

    def test_zero_denoiser_moments_match_recursion(self):
        # with a zero noise prediction the chain is linear-Gaussian; compare
        # Monte Carlo moments against the closed-form variance recursion
        d, n = 4, 8000
        s = df.make_schedule(60, 1e-3, 0.02)
        w = tiny_denoiser(latent_dim=d)
        for a in w.arrays():
            a[:] = 0.0
        var = 1.0
        for t in range(s.T, 0, -1):
            var = var / s.alpha[t - 1]
            if t > 1:
                var += s.beta[t - 1]  # sigma_t^2
        rng = np.random.default_rng(13)
        z = rng.standard_normal((n, d))
        for t in range(s.T, 0, -1):
            noise = rng.standard_normal((n, d)) if t > 1 else np.zeros((n, d))
            z = z / math.sqrt(s.alpha[t - 1]) + s.sigma[t - 1] * noise
        sample_var = z.var(axis=0)
        se = var * math.sqrt(2.0 / n)
        assert np.max(np.abs(sample_var - var)) < 4 * se
        assert np.max(np.abs(z.mean(axis=0))) < 4 * math.sqrt(var / n)

    def test_point_mass_contraction(self):
        # an exactly optimal denoiser for a point-mass distribution pulls the
        # state toward the point over the final steps
        d = 4
        s = df.make_schedule(200, 1e-4, 0.02)
        c = np.array([0.5, -1.0, 0.25, 2.0])

        def oracle(z, t):
            ab = s.alpha_bar[t - 1]
            return (z - math.sqrt(ab) * c) / math.sqrt(1.0 - ab)

        diffs = []
        for seed in range(40):
            rng = df.sample_rng(seed, 0)
            dists = {}
            df.sample_chain(oracle, d, s, rng,
                            step_hook=lambda t, z: dists.__setitem__(t, float(np.linalg.norm(z - c))))
            for t in range(100, 1, -1):
                diffs.append(dists[t - 1] - dists[t])
        diffs = np.array(diffs)
        # one-sided t test at 95%: mean decrease must be negative
        t_stat = diffs.mean() / (diffs.std(ddof=1) / math.sqrt(len(diffs)))
        assert t_stat < -1.645

    def test_divergence_reports_step(self):
        w = tiny_denoiser(seed=14)
        s = df.make_schedule(20, 1e-3, 0.05)

        def bad(z, t):
            return np.full(4, np.nan) if t == 7 else df.denoiser_apply(w, z, t)

        with pytest.raises(df.TrainingDiverged, match="t=7"):
            df.sample_chain(bad, 4, s, df.sample_rng(0, 0))


class TestTraining:
    def test_single_latent_dataset(self):
        # degenerate point-mass dataset: the loss drops and unguided samples
        # land near the latent
        d = 3
        target = np.array([0.8, -0.4, 1.2])
        latents = np.tile(target, (32, 1))
        s = df.make_schedule(50, 1e-3, 0.05)
        net = df.DenoiserConfig(latent_dim=d, width=32, blocks=2, dropout=0.0,
                                time_embed_dim=16)
        cfg = df.DiffusionTrainConfig(iterations=400, batch_size=64, lr=3e-3, seed=5)
        losses = []
        w = df.train_denoiser(latents, s, cfg, net,
                              on_iteration=lambda i, l: losses.append(l))
        assert np.mean(losses[-40:]) < 0.5 * np.mean(losses[:40])
        samples = df.sample_unguided(w, s, 12, seed=3)
        dist = np.linalg.norm(samples - target, axis=1).mean()
        assert dist < 1.2  # far tighter than the ~sqrt(3)*2 of an untrained chain

    def test_fixed_seed_reproducible(self):
        latents = np.random.default_rng(6).normal(size=(16, 3))
        s = df.make_schedule(20, 1e-3, 0.05)
        net = df.DenoiserConfig(latent_dim=3, width=8, blocks=1, dropout=0.1,
                                time_embed_dim=8)
        cfg = df.DiffusionTrainConfig(iterations=10, batch_size=8, lr=1e-3, seed=1)
        w1 = df.train_denoiser(latents, s, cfg, net)
        w2 = df.train_denoiser(latents, s, cfg, net)
        for a, b in zip(w1.arrays(), w2.arrays()):
            assert np.array_equal(a, b)


class TestDenoiserCheckpoint:
    def test_round_trip(self, tmp_path):
        w = tiny_denoiser(seed=15)
        s = df.make_schedule(40, 1e-3, 0.03)
        stats = LatentStats(mean=np.arange(4.0), std=np.ones(4) * 2.0)
        df.save_denoiser(tmp_path / "d.json", w, s, stats)
        w2, s2, stats2 = df.load_denoiser(tmp_path / "d.json")
        assert s2.T == s.T and s2.beta_start == s.beta_start
        assert stats2.mean == pytest.approx(stats.mean)
        z = np.random.default_rng(0).normal(size=4)
        assert df.denoiser_apply(w2, z, 11) == pytest.approx(
            df.denoiser_apply(w, z, 11), abs=1e-5)
