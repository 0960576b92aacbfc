import math

import numpy as np
import pytest

from topogen import diffusion as df
from topogen import field_model as fm
from topogen import guidance as gd
from topogen.diffmath import PointKind, Stability, finite_diff_gradient, sigmoid
from topogen.latent_fit import LatentStats, denormalize


def tiny_models(seed=0, T=40, latent_dim=5):
    rng = np.random.default_rng(seed)
    scfg = fm.SirenConfig(hidden_width=12, hidden_layers=2, latent_dim=latent_dim, omega0=4.0)
    w = fm.init_weights(scfg, rng)
    w.mod[:] = rng.normal(size=w.mod.shape) * 0.4
    dcfg = df.DenoiserConfig(latent_dim=latent_dim, width=16, blocks=2, dropout=0.1,
                             time_embed_dim=8)
    dw = df.denoiser_init(dcfg, rng)
    dw.out_w[:] = rng.normal(size=dw.out_w.shape) * 0.2
    s = df.make_schedule(T, 1e-4, 0.02)
    stats = LatentStats(mean=rng.normal(size=latent_dim) * 0.2,
                        std=np.abs(rng.normal(size=latent_dim)) + 0.5)
    return gd.ModelBundle(w, dw, s, stats)


class TestSpecToBetas:
    def test_sink(self):
        b = gd.spec_to_betas(PointKind.SINK, None)
        assert (b.beta1, b.beta2, b.beta_s) == (1.0, 1.0, None)

    def test_source(self):
        b = gd.spec_to_betas(PointKind.SOURCE, None)
        assert (b.beta1, b.beta2) == (-1.0, -1.0)

    def test_saddle_ascending_order(self):
        b = gd.spec_to_betas(PointKind.SADDLE, None)
        assert (b.beta1, b.beta2) == (1.0, -1.0)

    def test_saddle_swapped_variant(self):
        b = gd.spec_to_betas(PointKind.SADDLE, None, swap_saddle=True)
        assert (b.beta1, b.beta2) == (-1.0, 1.0)

    def test_stability_targets(self):
        assert gd.spec_to_betas(None, Stability.STABLE).beta_s == -1.0
        assert gd.spec_to_betas(None, Stability.UNSTABLE).beta_s == 1.0

    def test_absent_inputs_absent_targets(self):
        b = gd.spec_to_betas(None, None)
        assert (b.beta1, b.beta2, b.beta_s) == (None, None, None)


class TestSpecValidation:
    def test_boundary_margin(self):
        gd.CriticalPointSpec(0.9, -0.9)
        with pytest.raises(gd.SpecError):
            gd.CriticalPointSpec(0.95, 0.0)
        with pytest.raises(gd.SpecError):
            gd.CriticalPointSpec(0.0, -0.91)

    def test_unstable_saddle_rejected(self):
        with pytest.raises(gd.SpecError):
            gd.CriticalPointSpec(0.0, 0.0, PointKind.SADDLE, Stability.UNSTABLE)
        gd.CriticalPointSpec(0.0, 0.0, PointKind.SADDLE, Stability.STABLE)

    def test_duplicate_locations_rejected(self):
        cp = gd.CriticalPointSpec(0.1, 0.2)
        with pytest.raises(gd.SpecError):
            gd.TopologySpec((cp, gd.CriticalPointSpec(0.1, 0.2, PointKind.SINK)))

    def test_empty_spec_rejected(self):
        with pytest.raises(gd.SpecError):
            gd.TopologySpec(())

    def test_guidance_config_window(self):
        with pytest.raises(gd.SpecError):
            gd.GuidanceConfig(t_start=5, t_end=5)
        with pytest.raises(gd.SpecError):
            gd.GuidanceConfig(omega=-0.1)


class TestEnergies:
    def test_presence_euclidean_norm(self):
        models = tiny_models()
        w = models.siren.copy()
        w.out_t[:] = 0.0
        w.out_b[:] = (3.0, 4.0)
        assert gd.energy_presence(w, np.zeros(5), (0.0, 0.0)) == pytest.approx(5.0)
        w.out_b[:] = 0.0
        assert gd.energy_presence(w, np.zeros(5), (0.2, 0.2)) == 0.0

    def test_type_energy_at_zero_eigenvalues(self):
        models = tiny_models()
        w = models.siren.copy()
        for a in w.arrays():
            a[:] = 0.0
        for betas in ((1, 1), (-1, -1), (1, -1)):
            assert gd.energy_type(w, np.zeros(5), (0.1, 0.1), *betas) == pytest.approx(1.0)

    def test_type_energy_derived_values(self):
        # direct evaluation of the sigmoid sum at eigenvalues (-10, -10)
        assert gd.type_energy_from_eigs(-10, -10, 1, 1) == pytest.approx(
            2 * sigmoid(-10), rel=1e-12)
        assert gd.type_energy_from_eigs(-10, -10, 1, 1) == pytest.approx(9.079e-5, rel=1e-3)
        assert gd.type_energy_from_eigs(-10, -10, -1, -1) == pytest.approx(
            2 * sigmoid(10), rel=1e-12)
        assert gd.type_energy_from_eigs(-10, -10, -1, -1) == pytest.approx(1.99991, abs=1e-5)

    def test_stability_energy_values(self):
        assert gd.stability_energy_from_delta(0.0, 1.0) == 0.5
        assert gd.stability_energy_from_delta(-16.0, 1.0) == pytest.approx(
            sigmoid(-16.0), rel=1e-12)
        assert gd.stability_energy_from_delta(-16.0, 1.0) == pytest.approx(1.125e-7, rel=1e-3)

    def test_stability_gradient_sign(self):
        # minimizing sig(-delta) pushes delta upward: d/ddelta sig(-delta) < 0
        from topogen.diffmath import sigmoid_grad

        for delta in (-3.0, 0.0, 2.5):
            d_energy_d_delta = -1.0 * sigmoid_grad(-1.0 * delta)
            assert d_energy_d_delta < 0

    def test_combined_energy_sums_components(self):
        presence = 0.0
        type_term = gd.type_energy_from_eigs(-10, -10, 1, 1)
        stability_term = gd.stability_energy_from_delta(-16.0, 1.0)
        total = presence + type_term + stability_term
        assert total == pytest.approx(9.079e-5 + 1.125e-7, rel=1e-3)

    def test_total_energy_additive_over_points(self):
        models = tiny_models(seed=3)
        rng = np.random.default_rng(4)
        z = rng.normal(size=5)
        spec = gd.TopologySpec((
            gd.CriticalPointSpec(0.2, -0.3, PointKind.SINK, Stability.UNSTABLE),
            gd.CriticalPointSpec(-0.5, 0.4, PointKind.SADDLE),
        ))
        total = gd.energy_total(models.siren, z, spec)
        separate = sum(gd.energy_total(models.siren, z, gd.TopologySpec((cp,)))
                       for cp in spec.points)
        assert total == pytest.approx(separate, abs=1e-12)

    def test_presence_gradient_matches_finite_differences(self):
        models = tiny_models(seed=5)
        rng = np.random.default_rng(6)
        z = rng.normal(size=5)
        p = (0.3, -0.2)
        spec = gd.TopologySpec((gd.CriticalPointSpec(*p),))
        _, g = gd.energy_total_and_grad(models.siren, z, spec)
        fd = finite_diff_gradient(lambda zz: gd.energy_presence(models.siren, zz, p), z, 1e-6)
        assert np.max(np.abs(g - fd) / np.maximum(1e-9, np.abs(fd))) < 1e-4

    def test_type_energy_descent_property(self):
        # one explicit gradient step with a small rate strictly decreases the
        # type energy at a non-stationary point
        models = tiny_models(seed=7)
        rng = np.random.default_rng(8)
        z = rng.normal(size=5)
        spec = gd.TopologySpec((gd.CriticalPointSpec(0.1, 0.2, PointKind.SINK),))
        e0, g = gd.energy_total_and_grad(models.siren, z, spec)
        assert np.linalg.norm(g) > 1e-8
        e1 = gd.energy_total(models.siren, z - 1e-3 * g / np.linalg.norm(g), spec)
        assert e1 < e0


class TestGuidanceGradient:
    def test_zero_energy_neighborhood_zero_gradient(self):
        models = tiny_models(seed=9)
        w = models.siren
        for a in w.arrays():
            a[:] = 0.0  # field identically zero: presence energy flat at 0
        spec = gd.TopologySpec((gd.CriticalPointSpec(0.0, 0.0),))
        cfg = gd.GuidanceConfig(omega=1.0, t_start=30, t_end=0, full_chain=False)
        g = gd.guidance_gradient(np.ones(5), 10, spec, models, cfg)
        assert np.all(g == 0)

    @pytest.mark.parametrize("seed", range(3))
    def test_full_chain_matches_finite_differences(self, seed):
        models = tiny_models(seed=seed + 20)
        rng = np.random.default_rng(seed)
        z_t = rng.normal(size=5)
        t = int(rng.integers(2, models.schedule.T))
        spec = gd.TopologySpec((
            gd.CriticalPointSpec(0.2, -0.3, PointKind.SINK, Stability.UNSTABLE),))
        cfg = gd.GuidanceConfig(omega=1.0, t_start=models.schedule.T, t_end=0)
        g = gd.guidance_gradient(z_t, t, spec, models, cfg)

        def f(zz):
            eps = df.denoiser_apply(models.denoiser, zz, t)
            z_hat = df.predict_clean(zz, t, eps, models.schedule)
            return gd.energy_total(models.siren, denormalize(z_hat, models.stats), spec)

        fd = finite_diff_gradient(f, z_t, 1e-6)
        assert np.max(np.abs(g - fd) / np.maximum(1e-9, np.abs(fd))) < 1e-3

    def test_stop_gradient_is_scaled_pullback(self):
        models = tiny_models(seed=30)
        rng = np.random.default_rng(31)
        z_t = rng.normal(size=5)
        t = 15
        spec = gd.TopologySpec((gd.CriticalPointSpec(-0.4, 0.1, PointKind.SOURCE),))
        cfg = gd.GuidanceConfig(omega=1.0, t_start=30, t_end=0, full_chain=False)
        g = gd.guidance_gradient(z_t, t, spec, models, cfg)
        eps = df.denoiser_apply(models.denoiser, z_t, t)
        z_hat = df.predict_clean(z_t, t, eps, models.schedule)
        _, g_raw = gd.energy_total_and_grad(models.siren, denormalize(z_hat, models.stats), spec)
        expected = models.stats.std * g_raw / math.sqrt(models.schedule.alpha_bar[t - 1])
        assert g == pytest.approx(expected, abs=1e-15)


class TestGuidedSampling:
    def test_omega_zero_step_equals_plain_step(self):
        models = tiny_models(seed=40)
        rng = np.random.default_rng(41)
        z_t = rng.normal(size=5)
        t = 12
        cfg = gd.GuidanceConfig(omega=0.0, t_start=30, t_end=0)
        spec = gd.TopologySpec((gd.CriticalPointSpec(0.0, 0.0, PointKind.SINK),))
        noise_rng_a = np.random.default_rng(7)
        noise_rng_b = np.random.default_rng(7)
        guided = gd.guided_step(z_t, t, spec, models, cfg, noise_rng_a)
        eps = df.denoiser_apply(models.denoiser, z_t, t)
        plain = df.ddpm_step(z_t, t, eps, noise_rng_b.standard_normal(5), models.schedule)
        assert np.array_equal(guided, plain)

    def test_outside_window_equals_plain_step(self):
        models = tiny_models(seed=42)
        rng = np.random.default_rng(43)
        z_t = rng.normal(size=5)
        cfg = gd.GuidanceConfig(omega=2.0, t_start=20, t_end=5)
        spec = gd.TopologySpec((gd.CriticalPointSpec(0.0, 0.0),))
        for t in (25, 3):  # above the window, below the window
            a = gd.guided_step(z_t, t, spec, models, cfg, np.random.default_rng(1))
            eps = df.denoiser_apply(models.denoiser, z_t, t)
            b = df.ddpm_step(z_t, t, eps,
                             np.random.default_rng(1).standard_normal(5) if t > 1 else np.zeros(5),
                             models.schedule)
            assert np.array_equal(a, b)

    def test_omega_zero_chain_equals_unguided(self):
        models = tiny_models(seed=44)
        spec = gd.TopologySpec((gd.CriticalPointSpec(0.3, 0.3, PointKind.SADDLE),))
        cfg = gd.GuidanceConfig(omega=0.0, t_start=30, t_end=0)
        for seed in range(5):
            guided = gd.guided_sample(spec, models, cfg, seed)
            unguided = df.sample_unguided(models.denoiser, models.schedule, 1, seed)[0]
            assert np.array_equal(guided, denormalize(unguided, models.stats))

    def test_fixed_seed_reproducible(self):
        models = tiny_models(seed=45)
        spec = gd.TopologySpec((gd.CriticalPointSpec(0.2, 0.1, PointKind.SINK),))
        cfg = gd.GuidanceConfig(omega=1.0, t_start=30, t_end=0)
        a = gd.guided_sample(spec, models, cfg, 11)
        b = gd.guided_sample(spec, models, cfg, 11)
        assert np.array_equal(a, b)


class TestWireFormat:
    def test_round_trip(self):
        doc = {"points": [{"x": 0.25, "y": -0.5, "type": "sink", "stability": "unstable"},
                          {"x": -0.1, "y": 0.3, "type": None, "stability": None}],
               "omega": 1.5, "seed": 3}
        spec, overrides = gd.spec_from_dict(doc)
        assert spec.points[0].kind is PointKind.SINK
        assert spec.points[0].stability is Stability.UNSTABLE
        assert spec.points[1].kind is None
        assert overrides == {"omega": 1.5, "seed": 3}
        assert gd.spec_to_dict(spec)["points"] == doc["points"]

    def test_bad_enum_rejected(self):
        with pytest.raises(gd.SpecError):
            gd.spec_from_dict({"points": [{"x": 0, "y": 0, "type": "vortex"}]})

    def test_out_of_domain_rejected(self):
        with pytest.raises(gd.SpecError):
            gd.spec_from_dict({"points": [{"x": 1.5, "y": 0}]})

    def test_missing_points_rejected(self):
        with pytest.raises(gd.SpecError):
            gd.spec_from_dict({"omega": 1.0})
        with pytest.raises(gd.SpecError):
            gd.spec_from_dict({"points": []})
