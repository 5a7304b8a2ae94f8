"""Schedule construction, forward/reverse transitions, the denoiser and the
full reverse chain."""

import warnings

import numpy as np
import pytest

from trajdiff import diffusion as dff
from trajdiff import numerics as nm
from trajdiff.distribution import NormStats


class TestSchedule:
    def test_default_linear_schedule(self):
        s = dff.build_schedule(100)
        assert s.alpha[0] == 1.0
        assert np.all(np.diff(s.alpha) < 0)
        assert s.alpha[100] < 0.1

    def test_full_tau_when_not_accelerated(self):
        s = dff.build_schedule(20, beta_end=0.3)
        np.testing.assert_array_equal(s.tau, np.arange(1, 21))

    def test_single_step_chain(self):
        # K = 1 with a constant beta of 0.5
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            s = dff.build_schedule(1, beta_start=0.5, beta_end=0.6)
        np.testing.assert_allclose(s.alpha, [1.0, 0.5])

    def test_far_from_noise_warns(self):
        with pytest.warns(RuntimeWarning, match="far from standard noise"):
            dff.build_schedule(10, beta_start=1e-4, beta_end=1e-3)

    def test_even_tau_ends_at_k(self):
        s = dff.build_schedule(200, steps=100)
        assert len(s.tau) == 100
        assert s.tau[-1] == 200
        assert np.all(np.diff(s.tau) > 0)

    def test_restriding(self):
        s = dff.build_schedule(200, steps=100)
        s10 = s.with_steps(10)
        assert len(s10.tau) == 10 and s10.tau[-1] == 200
        np.testing.assert_array_equal(s10.alpha, s.alpha)

    def test_invalid_subsequence_length(self):
        with pytest.raises(nm.NumericsError):
            dff.build_schedule(10, beta_end=0.3, steps=11)

    def test_invalid_beta_range(self):
        with pytest.raises(nm.NumericsError):
            dff.build_schedule(10, beta_start=0.3, beta_end=0.2)

    def test_ddpm_matching_gamma_satisfies_bound(self):
        s = dff.build_schedule(100, gamma_mode="ddpm-matching")
        assert s.gamma[0] == 0.0
        assert np.all(s.gamma[1:] ** 2 <= (1.0 - s.alpha[:-1])[1:] + 1e-12)
        assert np.all(s.gamma[1:] > 0)


class TestForwardMarginal:
    def test_identity_at_step_zero(self):
        s = dff.build_schedule(10, beta_end=0.3)
        y0 = np.random.default_rng(0).normal(size=(2, 3, 5))
        out = dff.forward_marginal(y0, 0, np.zeros_like(y0), s)
        np.testing.assert_allclose(out.value, y0)
        assert out.step == 0

    def test_hand_computed_value(self):
        # alpha = 0.25: sqrt(0.25) * y0 + sqrt(0.75) * eps
        s = dff.Schedule(1, np.array([1.0, 0.25]), np.zeros(1), np.array([1]),
                         0.75, 0.76)
        out = dff.forward_marginal(np.array([1.0, 2.0]), 1,
                                   np.array([1.0, -1.0]), s)
        np.testing.assert_allclose(out.value, [1.3660, 0.1340], atol=5e-5)

    def test_noise_endpoint(self):
        s = dff.Schedule(1, np.array([1.0, 1e-10]), np.zeros(1), np.array([1]),
                         0.5, 0.6)
        y0 = np.full((4,), 1e3)
        eps = np.random.default_rng(1).normal(size=4)
        out = dff.forward_marginal(y0, 1, eps, s)
        np.testing.assert_allclose(out.value, eps, atol=2e-2)

    def test_shape_mismatch(self):
        s = dff.build_schedule(10, beta_end=0.3)
        with pytest.raises(nm.NumericsError, match="shape"):
            dff.forward_marginal(np.zeros(3), 1, np.zeros(4), s)

    def test_tensor_path_matches_array_path(self):
        s = dff.build_schedule(10, beta_end=0.3)
        y0 = np.random.default_rng(2).normal(size=(2, 5))
        eps = np.random.default_rng(3).normal(size=(2, 5))
        a = dff.forward_marginal(y0, 4, eps, s).value
        t = dff.forward_marginal(nm.constant(y0), 4, nm.constant(eps), s).value
        np.testing.assert_allclose(t.data, a, rtol=1e-6)


@pytest.fixture
def den_setup():
    cfg = dff.DenoiserConfig(t_future=12, guidance_dim=8, width=16, blocks=2,
                             step_dim=8)
    params = dff.init_denoiser_params(cfg, np.random.default_rng(0))
    sched = dff.build_schedule(50, beta_end=0.2, steps=25)
    return cfg, params, sched


class TestDenoiser:
    def test_output_shape(self, den_setup):
        cfg, params, sched = den_setup
        state = np.random.default_rng(1).normal(size=(3, 12, 5))
        g = np.random.default_rng(2).normal(size=(3, 8))
        out = dff.denoiser_apply(state, 10, g, params, cfg, sched)
        assert out.shape == (3, 12, 5)

    def test_identical_rows_identical_outputs(self, den_setup):
        cfg, params, sched = den_setup
        state = np.random.default_rng(1).normal(size=(2, 12, 5))
        state[1] = state[0]
        g = np.tile(np.random.default_rng(2).normal(size=(1, 8)), (2, 1))
        out = dff.denoiser_apply(state, 7, g, params, cfg, sched).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_step_index_changes_output(self, den_setup):
        cfg, params, sched = den_setup
        state = np.random.default_rng(1).normal(size=(1, 12, 5))
        g = np.random.default_rng(2).normal(size=(1, 8))
        a = dff.denoiser_apply(state, 5, g, params, cfg, sched).data
        b = dff.denoiser_apply(state, 40, g, params, cfg, sched).data
        assert np.abs(a - b).max() > 1e-6

    def test_per_row_steps(self, den_setup):
        cfg, params, sched = den_setup
        state = np.random.default_rng(1).normal(size=(2, 12, 5))
        state[1] = state[0]
        g = np.zeros((2, 8))
        both = dff.denoiser_apply(state, np.array([5, 40]), g, params, cfg,
                                  sched).data
        solo5 = dff.denoiser_apply(state[:1], 5, g[:1], params, cfg, sched).data
        np.testing.assert_allclose(both[0], solo5[0], atol=1e-5)

    def test_guidance_row_mismatch(self, den_setup):
        cfg, params, sched = den_setup
        with pytest.raises(nm.NumericsError, match="rows"):
            dff.denoiser_apply(np.zeros((2, 12, 5)), 5, np.zeros((3, 8)),
                               params, cfg, sched)

    def test_noisy_sample_step_consistency(self, den_setup):
        cfg, params, sched = den_setup
        sample = dff.NoisySample(np.zeros((1, 12, 5)), 9)
        with pytest.raises(nm.NumericsError, match="disagrees"):
            dff.denoiser_apply(sample, 8, np.zeros((1, 8)), params, cfg, sched)

    def test_step_embedding_distinct_over_range(self):
        emb = dff.step_embedding(np.arange(1, 301), 32)
        assert len(np.unique(emb.round(6), axis=0)) == 300


class TestPosterior:
    def test_equal_alpha_is_identity(self):
        rng = np.random.default_rng(0)
        y_k = rng.normal(size=(2, 3, 5))
        y0h = rng.normal(size=(2, 3, 5))
        out = dff.posterior_mean(y_k, y0h, a_from=0.37, a_to=0.37, gamma=0.0)
        np.testing.assert_allclose(out, y_k, rtol=1e-9)

    def test_final_step_recovers_clean_estimate(self):
        sched = dff.build_schedule(50, beta_end=0.2)
        rng = np.random.default_rng(1)
        y_k = rng.normal(size=(2, 3, 5))
        y0h = rng.normal(size=(2, 3, 5))
        out = dff.posterior_step(y_k, y0h, k_from=7, k_to=0, schedule=sched)
        np.testing.assert_allclose(out, y0h, rtol=1e-9)

    def test_transition_order_enforced(self):
        sched = dff.build_schedule(50, beta_end=0.2)
        with pytest.raises(nm.NumericsError, match="transition"):
            dff.posterior_step(np.zeros(3), np.zeros(3), 5, 9, sched)

    def test_gamma_bound_enforced(self):
        sched = dff.build_schedule(50, beta_end=0.2)
        with pytest.raises(nm.NumericsError, match="gamma"):
            dff.posterior_step(np.zeros(3), np.zeros(3), 10, 5, sched,
                               rng=np.random.default_rng(0), gamma=1.5)

    def test_stochastic_step_requires_rng(self):
        sched = dff.build_schedule(50, beta_end=0.2, gamma_mode="ddpm-matching")
        with pytest.raises(nm.NumericsError, match="rng"):
            dff.posterior_step(np.zeros(3), np.zeros(3), 10, 5, sched)

    def test_maximal_gamma_reproduces_forward_marginal(self):
        # with gamma = sqrt(1 - alpha[k_to]) the transition distribution is
        # exactly the forward marginal of the clean estimate
        sched = dff.build_schedule(50, beta_end=0.2)
        k_from, k_to = 40, 15
        y0h = np.array([0.7])
        y_k = np.array([1.3])
        gamma = np.sqrt(1.0 - sched.alpha[k_to])
        rng = np.random.default_rng(5)
        draws = np.array([
            dff.posterior_step(y_k, y0h, k_from, k_to, sched, rng=rng,
                               gamma=float(gamma))[0]
            for _ in range(10_000)])
        want_mean = np.sqrt(sched.alpha[k_to]) * y0h[0]
        want_var = 1.0 - sched.alpha[k_to]
        assert abs(draws.mean() - want_mean) < 0.03 * max(1.0, abs(want_mean))
        assert abs(draws.var() - want_var) < 0.03 * want_var

    def test_marginal_consistency_of_matching_chain(self):
        # forward to step j then ddpm-matching posterior to i reproduces the
        # forward marginal at i (moment check over 10k draws)
        sched = dff.build_schedule(60, beta_end=0.15, gamma_mode="ddpm-matching")
        j, i = 50, 20
        y0 = np.array([0.9])
        rng = np.random.default_rng(8)
        n = 10_000
        eps = rng.standard_normal((n, 1))
        y_j = dff.forward_marginal(np.tile(y0, (n, 1)), j, eps, sched).value
        y_i = dff.posterior_step(y_j, np.tile(y0, (n, 1)), j, i, sched, rng=rng)
        want_mean = np.sqrt(sched.alpha[i]) * y0[0]
        want_var = 1.0 - sched.alpha[i]
        assert abs(y_i.mean() - want_mean) < 0.03 * max(1.0, abs(want_mean))
        assert abs(y_i.var() - want_var) < 0.03 * want_var


class TestReverseGenerate:
    def _setup(self):
        cfg = dff.DenoiserConfig(t_future=12, guidance_dim=4, width=16,
                                 blocks=1, step_dim=8)
        params = dff.init_denoiser_params(cfg, np.random.default_rng(0))
        sched = dff.build_schedule(40, beta_end=0.25, steps=10)
        guidance = np.random.default_rng(1).normal(size=(3, 4))
        return cfg, params, sched, guidance

    def test_deterministic_given_seed(self):
        cfg, params, sched, g = self._setup()
        norm = NormStats.identity()
        a = dff.reverse_generate(g, sched, params, cfg, norm,
                                 np.random.default_rng(42), n_runs=2)
        b = dff.reverse_generate(g, sched, params, cfg, norm,
                                 np.random.default_rng(42), n_runs=2)
        for fa, fb in zip(a, b):
            np.testing.assert_array_equal(fa.raw, fb.raw)
        assert np.abs(a[0].raw - a[1].raw).max() > 1e-6  # runs differ

    def test_untrained_model_still_yields_valid_fields(self):
        cfg, params, sched, g = self._setup()
        (field,) = dff.reverse_generate(g, sched, params, cfg,
                                        NormStats.identity(),
                                        np.random.default_rng(0))
        assert np.isfinite(field.raw).all()
        assert (field.sigmas > 0).all()
        assert (np.abs(field.rhos) <= 0.99).all()

    def test_stochastic_chain_differs_across_calls(self):
        cfg, params, _, g = self._setup()
        sched = dff.build_schedule(40, beta_end=0.25, steps=10,
                                   gamma_mode="ddpm-matching")
        norm = NormStats.identity()
        a = dff.reverse_generate(g, sched, params, cfg, norm,
                                 np.random.default_rng(42))
        b = dff.reverse_generate(g, sched, params, cfg, norm,
                                 np.random.default_rng(42))
        assert np.abs(a[0].raw - b[0].raw).max() > 1e-8

    def test_stochastic_chain_reproducible_with_pinned_chain_rng(self):
        cfg, params, _, g = self._setup()
        sched = dff.build_schedule(40, beta_end=0.25, steps=10,
                                   gamma_mode="ddpm-matching")
        norm = NormStats.identity()
        a = dff.reverse_generate(g, sched, params, cfg, norm,
                                 np.random.default_rng(42),
                                 chain_rng=np.random.default_rng(1))
        b = dff.reverse_generate(g, sched, params, cfg, norm,
                                 np.random.default_rng(42),
                                 chain_rng=np.random.default_rng(1))
        np.testing.assert_array_equal(a[0].raw, b[0].raw)

    def test_oracle_denoiser_gives_zero_loss(self):
        # theta == eps makes the noise-matching objective exactly zero
        from trajdiff.training import loss_diffusion
        sched = dff.build_schedule(40, beta_end=0.25, steps=10)
        cfg = dff.DenoiserConfig(t_future=12, guidance_dim=4, width=16,
                                 blocks=1, step_dim=8)
        rng = np.random.default_rng(0)
        y0 = nm.constant(rng.normal(size=(3, 12, 5)))
        g = nm.constant(rng.normal(size=(3, 4)))
        ks = np.array([10, 20, 40])
        eps = rng.standard_normal((3, 12, 5))
        oracle = lambda noisy, k, guid, p, c, s: nm.constant(eps)
        loss = loss_diffusion(y0, g, ks, eps, sched, {}, cfg, denoiser=oracle)
        assert loss.item() == 0.0
