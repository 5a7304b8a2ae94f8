"""Loss components, optimizer behavior, the fit loop and resumption."""

import math

import numpy as np
import pytest

from trajdiff import data, diffusion, training
from trajdiff import numerics as nm
from trajdiff.distribution import SIGMA_FLOOR
from trajdiff.model import Model, ModelConfig

MICRO = ModelConfig(conv_channels=4, d_phi=4, d_psi=4, denoiser_width=8,
                    denoiser_blocks=1, step_dim=4, k_total=20, steps=10,
                    beta_end=0.4)


def _windows(n_scenes=2, peds=3, frames=25, seed=1, **kw):
    cfg = data.SynthConfig(n_scenes=n_scenes, peds_per_scene=peds,
                           frames=frames, seed=seed, **kw)
    return data.window_scenes(data.synthesize_scenes(cfg), stride=5)


def _sigma_one_raw(future):
    # raw statistics whose constrained view is N(future, I, rho=0)
    n, t, _ = future.shape
    raw = np.zeros((n, t, 5))
    raw[..., :2] = future
    raw[..., 2:4] = np.log(np.expm1(1.0 - SIGMA_FLOOR))
    return raw


class TestLossDiffusion:
    def _inputs(self, rows=6):
        rng = np.random.default_rng(0)
        sched = diffusion.build_schedule(20, beta_end=0.4, steps=10)
        cfg = diffusion.DenoiserConfig(t_future=12, guidance_dim=4, width=8,
                                       blocks=1, step_dim=4)
        params = diffusion.init_denoiser_params(cfg, rng)
        y0 = nm.constant(rng.normal(size=(rows, 12, 5)))
        g = nm.constant(rng.normal(size=(rows, 4)))
        ks = sched.tau[rng.integers(0, 10, size=rows)]
        eps = rng.standard_normal((rows, 12, 5))
        return y0, g, ks, eps, sched, params, cfg

    def test_oracle_denoiser_zero(self):
        y0, g, ks, eps, sched, params, cfg = self._inputs()
        oracle = lambda noisy, k, guid, p, c, s: nm.constant(eps)
        loss = training.loss_diffusion(y0, g, ks, eps, sched, params, cfg,
                                       denoiser=oracle)
        assert loss.item() == 0.0

    def test_zero_denoiser_near_one(self):
        rows = 16
        y0, g, ks, eps, sched, params, cfg = self._inputs(rows)
        zero = lambda noisy, k, guid, p, c, s: nm.constant(np.zeros((rows, 12, 5)))
        loss = training.loss_diffusion(y0, g, ks, eps, sched, params, cfg,
                                       denoiser=zero)
        # mean of eps^2 over rows*60 elements: 3 sigma band of chi2 mean
        dim = rows * 60
        assert abs(loss.item() - 1.0) < 3 * math.sqrt(2.0 / dim)

    def test_batch_order_permutation_invariant(self):
        y0, g, ks, eps, sched, params, cfg = self._inputs()
        loss = training.loss_diffusion(y0, g, ks, eps, sched, params, cfg)
        perm = np.random.default_rng(5).permutation(6)
        loss_p = training.loss_diffusion(
            nm.constant(y0.data[perm]), nm.constant(g.data[perm]), ks[perm],
            eps[perm], sched, params, cfg)
        assert math.isclose(loss.item(), loss_p.item(), rel_tol=1e-5)


class TestLossLikelihood:
    def test_unit_sigma_at_means(self):
        rng = np.random.default_rng(0)
        future = rng.normal(size=(3, 12, 2))
        raw = _sigma_one_raw(future)
        loss = training.loss_likelihood(nm.constant(future), nm.constant(raw))
        expected = 3 * 12 * math.log(2 * math.pi)
        assert math.isclose(loss.item(), expected, rel_tol=1e-4)

    def test_shrinking_sigma_decreases_loss_at_mode(self):
        rng = np.random.default_rng(1)
        future = rng.normal(size=(2, 12, 2))
        raw = _sigma_one_raw(future)
        base = training.loss_likelihood(nm.constant(future), nm.constant(raw)).item()
        raw2 = raw.copy()
        raw2[..., 2:4] -= 2.0
        smaller = training.loss_likelihood(nm.constant(future),
                                           nm.constant(raw2)).item()
        assert smaller < base

    def test_matches_naive_double_loop(self):
        from trajdiff import distribution as dist
        rng = np.random.default_rng(2)
        future = rng.normal(size=(3, 12, 2))
        raw = rng.normal(size=(3, 12, 5))
        with nm.precision(np.float64):
            loss = training.loss_likelihood(nm.constant(future),
                                            nm.constant(raw), n_windows=1)
        field = dist.StatsField(raw)
        naive = 0.0
        for n in range(3):
            for t in range(12):
                naive -= dist.log_pdf(future[n, t], field.gaussian(n, t))
        assert abs(loss.item() - naive) < 1e-5


class TestLossConsistency:
    def test_exact_match_is_zero(self):
        future = np.random.default_rng(0).normal(size=(3, 12, 2))
        raw = _sigma_one_raw(future)
        loss = training.loss_consistency(nm.constant(future), nm.constant(raw))
        assert abs(loss.item()) < 1e-10

    def test_three_four_five_offset(self):
        future = np.random.default_rng(1).normal(size=(4, 12, 2))
        raw = _sigma_one_raw(future)
        raw[:, 0, 0] += 3.0
        raw[:, 0, 1] += 4.0
        loss = training.loss_consistency(nm.constant(future), nm.constant(raw))
        assert math.isclose(loss.item(), 25.0, rel_tol=1e-5)

    def test_only_first_future_step_matters(self):
        future = np.random.default_rng(2).normal(size=(2, 12, 2))
        raw = _sigma_one_raw(future)
        base = training.loss_consistency(nm.constant(future), nm.constant(raw)).item()
        raw[:, 1:, :2] += 99.0
        after = training.loss_consistency(nm.constant(future), nm.constant(raw)).item()
        assert math.isclose(base, after, abs_tol=1e-9)


class TestTrainStep:
    def test_converter_grads_flow_only_through_diffusion_when_weighted_out(self):
        windows = _windows()
        mdl = Model.initialize(MICRO, 0)
        mdl.norm = training.freeze_normalization(mdl, windows)
        rng = np.random.default_rng(0)
        with nm.ComputationRecord():
            total, _, _ = training.batch_losses(windows[:2], mdl, rng, (1.0, 0.0, 0.0))
        grads = nm.backward(total, mdl.params)
        rng2 = np.random.default_rng(0)
        with nm.ComputationRecord():
            ctx = mdl.encode(windows[:2])
            fut = nm.constant(np.concatenate([w.future for w in windows[:2]]))
            raw = mdl.convert(fut)
            from trajdiff.distribution import normalize_tensor
            y0n = normalize_tensor(raw, mdl.norm)
            ks, eps = training.draw_step_noise([w.n_peds for w in windows[:2]],
                                               mdl.schedule, rng2, 12)
            diff_only = training.loss_diffusion(y0n, ctx.embedding, ks, eps,
                                                mdl.schedule, mdl.params,
                                                mdl.config.denoiser_config())
        grads2 = nm.backward(diff_only, mdl.params)
        for name in mdl.params:
            if name.startswith("conv."):
                np.testing.assert_allclose(grads[name].data, grads2[name].data,
                                           atol=1e-7)

    def test_step_is_deterministic(self):
        windows = _windows()

        def one_run():
            mdl = Model.initialize(MICRO, 3)
            mdl.norm = training.freeze_normalization(mdl, windows)
            opt = training.AdamState(mdl.params)
            cfg = training.TrainConfig(seed=3)
            training.train_step(windows[:2], mdl, cfg, opt,
                                np.random.default_rng(9))
            return {k: p.data.copy() for k, p in mdl.params.items()}

        a, b = one_run(), one_run()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_loss_decreases_on_small_synthetic_set(self):
        # 50-window set, 200 steps at package defaults
        windows = _windows(n_scenes=5, peds=4, frames=65, seed=7)[:50]
        assert len(windows) == 50
        cfg = training.TrainConfig(batch_size=8, epochs=29, seed=0,
                                   checkpoint_every=10 ** 6)
        _, rows = training.fit(windows, cfg, MICRO, out_dir="/tmp/tjd_dec")
        assert len(rows) >= 200
        first = np.mean([r[1] for r in rows[:10]])
        at200 = np.mean([r[1] for r in rows[190:200]])
        assert at200 < 0.7 * first

    def test_lambda_scaling_scales_loss_and_keeps_gradient_direction(self):
        windows = _windows()
        mdl = Model.initialize(MICRO, 1)
        mdl.norm = training.freeze_normalization(mdl, windows)

        def loss_and_grads(scale):
            rng = np.random.default_rng(4)
            with nm.ComputationRecord():
                total, _, _ = training.batch_losses(
                    windows[:2], mdl, rng, (scale, scale, scale))
            grads = nm.backward(total, mdl.params)
            vec = np.concatenate([g.data.ravel().astype(np.float64)
                                  for _, g in sorted(grads.items())])
            return total.item(), vec

        l1, g1 = loss_and_grads(1.0)
        l3, g3 = loss_and_grads(3.0)
        assert math.isclose(l3, 3.0 * l1, rel_tol=1e-4)
        cos = g1 @ g3 / (np.linalg.norm(g1) * np.linalg.norm(g3))
        assert cos > 1.0 - 1e-6
        assert math.isclose(np.linalg.norm(g3), 3 * np.linalg.norm(g1),
                            rel_tol=1e-4)

    def test_non_finite_loss_aborts_with_diagnostics(self):
        windows = _windows()
        mdl = Model.initialize(MICRO, 0)
        mdl.norm = training.freeze_normalization(mdl, windows)
        opt = training.AdamState(mdl.params)
        mdl.params["den.out.b"] = nm.parameter(np.full(60, 1e30))
        with pytest.raises(nm.NumericsError, match="optimizer step"):
            training.train_step(windows[:1], mdl, training.TrainConfig(), opt,
                                np.random.default_rng(0))


class TestObjectiveGradients:
    def test_full_objective_passes_finite_differences(self):
        # micro model: widths <= 8, N = 2, T' = 3
        micro = ModelConfig(t_future=3, conv_channels=3, d_phi=3, d_psi=3,
                            denoiser_width=8, denoiser_blocks=1, step_dim=4,
                            k_total=10, steps=5, beta_end=0.5)
        cfg = data.SynthConfig(n_scenes=1, peds_per_scene=2, frames=11, seed=2)
        windows = data.window_scenes(data.synthesize_scenes(cfg), t_fut=3,
                                     stride=11)
        assert windows and windows[0].n_peds == 2
        with nm.precision(np.float64):
            mdl = Model.initialize(micro, 0)
            mdl.norm = training.freeze_normalization(mdl, windows)
            frozen = np.random.default_rng(5)
            ks, eps = training.draw_step_noise(
                [w.n_peds for w in windows], mdl.schedule, frozen, 3)

            def f(params):
                mdl.params = params
                ctx = mdl.encode(windows)
                fut = nm.constant(np.concatenate([w.future for w in windows]))
                raw = mdl.convert(fut)
                from trajdiff.distribution import normalize_tensor
                l_llh = training.loss_likelihood(fut, raw, len(windows))
                l_con = training.loss_consistency(fut, raw)
                l_diff = training.loss_diffusion(
                    normalize_tensor(raw, mdl.norm), ctx.embedding, ks, eps,
                    mdl.schedule, params, mdl.config.denoiser_config())
                return nm.add(nm.add(l_diff, l_llh), l_con)

            report = nm.finite_difference_check(f, mdl.params, step=1e-3,
                                                tolerance=1e-2)
        assert report["pass"], report


class TestFit:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            training.fit([], training.TrainConfig(), MICRO)

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            training.TrainConfig(lambda_diffusion=0, lambda_likelihood=0,
                                 lambda_consistency=0).validate()
        with pytest.raises(ValueError):
            training.TrainConfig(batch_size=0).validate()

    def test_log_has_one_row_per_step_with_components(self, tmp_path):
        windows = _windows()
        cfg = training.TrainConfig(batch_size=4, epochs=2, seed=0,
                                   checkpoint_every=10 ** 6)
        _, rows = training.fit(windows, cfg, MICRO, out_dir=str(tmp_path))
        spe = math.ceil(len(windows) / 4)
        assert len(rows) == 2 * spe
        log = (tmp_path / "training_log.csv").read_text().splitlines()
        assert log[2] == ",".join(training.LOG_COLUMNS)
        assert len(log) == 3 + len(rows)
        for row in rows:
            assert all(math.isfinite(v) for v in row[1:5])

    def test_resume_matches_straight_through(self, tmp_path):
        windows = _windows()
        cfg = training.TrainConfig(batch_size=4, epochs=10, seed=5,
                                   checkpoint_every=6)
        straight_dir = tmp_path / "straight"
        resumed_dir = tmp_path / "resumed"
        final_a, _ = training.fit(windows, cfg, MICRO, out_dir=str(straight_dir))
        # rerun only up to the mid checkpoint, then resume from it
        training.fit(windows, cfg, MICRO, out_dir=str(resumed_dir))
        mid = resumed_dir / "ckpt_000006.tjdf"
        assert mid.exists()
        final_b, _ = training.fit(windows, cfg, MICRO, out_dir=str(resumed_dir),
                                  resume_from=str(mid))
        a, _, _ = Model.load(final_a)
        b, _, _ = Model.load(final_b)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data,
                                          b.params[name].data)
