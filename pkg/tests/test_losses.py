import numpy as np
import pytest
from numpy.testing import assert_allclose
from uqvae import losses, nnet
from uqvae.bayes import GaussianModel, map_laplace_affine
from uqvae.errors import InsufficientSamples, SingularC
from uqvae.forward import AffineModel, exp_map
from uqvae.linalg import SPDMatrix, mahalanobis_sq

from conftest import random_lower, random_spd


def affine_instance(seed, d=4, o=6, noise_scale=1.0):
    rng = np.random.default_rng(seed)
    prior = GaussianModel(rng.standard_normal(d), random_spd(d, seed + 1))
    noise = GaussianModel(
        0.2 * rng.standard_normal(o), random_spd(o, seed + 2, scale=noise_scale)
    )
    fwd = AffineModel(rng.standard_normal((o, d)), rng.standard_normal(o))
    y = rng.standard_normal(o)
    return fwd, prior, noise, y


def exp_instance(seed, d=3):
    rng = np.random.default_rng(seed)
    fwd = exp_map(d)
    prior = GaussianModel(0.3 * rng.standard_normal(d), random_spd(d, seed + 1, 0.2))
    noise = GaussianModel(0.05 * rng.standard_normal(d), random_spd(d, seed + 2, 0.05))
    y = np.exp(prior.mean) + 0.1 * rng.standard_normal(d)
    return fwd, prior, noise, y


class TestLossTheta:
    def test_identity_instance_closed_form(self):
        # F = identity, everything else trivial: only the three theta^2
        # trace/spread terms survive
        d = 1
        fwd = AffineModel(np.eye(d))
        prior = GaussianModel(np.zeros(d), SPDMatrix(np.eye(d)))
        noise = GaussianModel(np.zeros(d), SPDMatrix(np.eye(d)))
        cfg = losses.ThetaLossConfig(forward=fwd, prior=prior, noise=noise,
                                     y=np.zeros(d), theta=1e-4)
        val, calls = losses.loss_theta(np.zeros(d), np.eye(d), cfg)
        assert_allclose(val, 3e-8, rtol=1e-12)
        assert calls == d + 1

    def test_affine_spread_equals_trace_identity(self, rng):
        # for affine F the perturbation sum reproduces
        # theta^2 tr(Ge^-1 F G F^T) exactly
        fwd, prior, noise, y = affine_instance(60)
        d = prior.dim
        mu = rng.standard_normal(d)
        c = random_lower(d, 61)
        for theta in (1e-2, 1e-4):
            cfg = losses.ThetaLossConfig(forward=fwd, prior=prior, noise=noise,
                                         y=y, theta=theta)
            val, _ = losses.loss_theta(mu, c, cfg)
            gamma = c @ c.T
            expected = (
                theta**2 * np.trace(prior.cov.solve(gamma))
                + theta**2 * np.trace(SPDMatrix(gamma).solve(prior.cov.mat))
                + mahalanobis_sq(mu - prior.mean, prior.cov)
                + mahalanobis_sq(y - noise.mean - fwd.eval(mu), noise.cov)
                + theta**2 * np.trace(noise.cov.solve(fwd.F @ gamma @ fwd.F.T))
            )
            assert_allclose(val, expected, rtol=1e-12)

    def test_nonaffine_matches_termwise_recomputation(self, rng):
        fwd, prior, noise, y = exp_instance(62)
        d = prior.dim
        mu = 0.2 * rng.standard_normal(d)
        c = random_lower(d, 63)
        theta = 1e-3
        cfg = losses.ThetaLossConfig(forward=fwd, prior=prior, noise=noise,
                                     y=y, theta=theta)
        val, calls = losses.loss_theta(mu, c, cfg)
        assert calls == d + 1
        gamma = c @ c.T
        gpr_i = np.linalg.inv(prior.cov.mat)
        ge_i = np.linalg.inv(noise.cov.mat)
        f0 = np.exp(mu)
        expected = (
            theta**2 * np.trace(np.linalg.inv(gamma) @ prior.cov.mat)
            + (mu - prior.mean) @ gpr_i @ (mu - prior.mean)
            + theta**2 * np.trace(gpr_i @ gamma)
            + (y - noise.mean - f0) @ ge_i @ (y - noise.mean - f0)
        )
        for k in range(d):
            dk = np.exp(mu + theta * c[:, k]) - f0
            expected += dk @ ge_i @ dk
        assert_allclose(val, expected, rtol=1e-11)

    def test_call_accounting_exact(self):
        fwd, prior, noise, y = exp_instance(64, d=5)
        cfg = losses.ThetaLossConfig(forward=fwd, prior=prior, noise=noise, y=y)
        before = fwd.call_count
        _, calls = losses.loss_theta(prior.mean, prior.cov.chol, cfg)
        assert calls == 6
        assert fwd.call_count - before == 6

    def test_rejects_singular_c(self):
        fwd, prior, noise, y = exp_instance(65)
        cfg = losses.ThetaLossConfig(forward=fwd, prior=prior, noise=noise, y=y)
        c = prior.cov.chol.copy()
        c[0, 0] = 0.0
        with pytest.raises(SingularC):
            losses.loss_theta(prior.mean, c, cfg)


class TestGradLossTheta:
    def test_finite_differences(self):
        for seed in range(4):
            fwd, prior, noise, y = exp_instance(70 + seed)
            d = prior.dim
            rng = np.random.default_rng(seed)
            mu = 0.3 * rng.standard_normal(d)
            c = random_lower(d, 500 + seed)
            cfg = losses.ThetaLossConfig(forward=fwd, prior=prior, noise=noise,
                                         y=y, theta=1e-2)
            dmu, dc = losses.grad_loss_theta(mu, c, cfg)
            h = 1e-6
            for i in range(d):
                e = np.zeros(d); e[i] = h
                up, _ = losses.loss_theta(mu + e, c, cfg)
                dn, _ = losses.loss_theta(mu - e, c, cfg)
                fd = (up - dn) / (2 * h)
                assert abs(fd - dmu[i]) < 1e-4 * max(abs(fd), 1e-6)
            for i in range(d):
                for j in range(i + 1):
                    e = np.zeros((d, d)); e[i, j] = h
                    up, _ = losses.loss_theta(mu, c + e, cfg)
                    dn, _ = losses.loss_theta(mu, c - e, cfg)
                    fd = (up - dn) / (2 * h)
                    assert abs(fd - dc[i, j]) < 1e-4 * max(abs(fd), 1e-6)

    def test_zero_at_affine_stationary_point(self):
        fwd, prior, noise, y = affine_instance(80)
        cfg = losses.ThetaLossConfig(forward=fwd, prior=prior, noise=noise, y=y)
        mu_hat, c_hat, _ = losses.minimize_theta_direct(cfg)
        dmu, dc = losses.grad_loss_theta(mu_hat, c_hat, cfg)
        assert np.linalg.norm(dmu) < 1e-8
        # C-gradient carries the theta^2 scale; compare against it
        assert np.abs(dc).max() < 1e-8 * cfg.theta**2 / 1e-8

    def test_trace_gradient_scales_with_theta_squared(self, rng):
        # zero out the data terms by matching y and mu exactly: remaining
        # C-gradient comes from the trace terms and scales as theta^2
        d = 3
        fwd = AffineModel(np.zeros((2, d)))
        prior = GaussianModel(np.zeros(d), random_spd(d, 81))
        noise = GaussianModel(np.zeros(2), SPDMatrix(np.eye(2)))
        c = random_lower(d, 82)
        grads = {}
        for theta in (1e-2, 5e-3):
            cfg = losses.ThetaLossConfig(forward=fwd, prior=prior, noise=noise,
                                         y=np.zeros(2), theta=theta)
            _, dc = losses.grad_loss_theta(np.zeros(d), c, cfg)
            grads[theta] = dc
        assert_allclose(grads[1e-2], 4.0 * grads[5e-3], rtol=1e-10)


class TestRecoverPosteriorTheta:
    def test_prior_fixed_point(self):
        gpr = random_spd(3, 90)
        mu, gamma = losses.recover_posterior_theta(np.ones(3), gpr.chol, gpr)
        assert_allclose(mu, np.ones(3))
        assert_allclose(gamma.mat, gpr.mat, rtol=1e-12)

    def test_scalar_case(self):
        c_hat = np.array([[np.sqrt(2.0)]])
        _, gamma = losses.recover_posterior_theta(
            np.zeros(1), c_hat, SPDMatrix([[4.0]])
        )
        assert_allclose(gamma.mat, [[1.0]], rtol=1e-12)

    def test_always_spd_for_random_factors(self):
        for seed in range(20):
            d = 2 + seed % 4
            c_hat = random_lower(d, 900 + seed)
            gpr = random_spd(d, 950 + seed)
            _, gamma = losses.recover_posterior_theta(np.zeros(d), c_hat, gpr)
            assert np.all(np.diag(gamma.chol) > 0)


class TestLossAlpha:
    def test_zero_spread_collapses_to_point_misfit(self, rng):
        # with epsilon forced to zero every draw sits at mu, so the
        # sampled term reduces to alpha * |y - muE - F(mu)|^2
        fwd, prior, noise, y = exp_instance(100)
        d = prior.dim
        mu = 0.2 * rng.standard_normal(d)
        c = random_lower(d, 103)
        cfg = losses.AlphaLossConfig(forward=fwd, prior=prior, noise=noise,
                                     y=y, alpha=0.5, k_samples=16)
        eps = np.zeros((16, d))
        val, calls = losses.loss_alpha(mu, c, cfg, eps)
        assert calls == 16
        point = 0.5 * mahalanobis_sq(y - noise.mean - fwd.eval(mu), noise.cov)
        gamma = SPDMatrix(c @ c.T)
        lines12 = 0.5 * (
            mahalanobis_sq(mu - prior.mean, gamma)
            + np.trace(gamma.solve(prior.cov.mat))
            + mahalanobis_sq(mu - prior.mean, prior.cov)
            + np.trace(prior.cov.solve(gamma.mat))
        )
        assert_allclose(val, lines12 + point, rtol=1e-10)

    def test_affine_sample_average_converges_to_closed_form(self):
        fwd, prior, noise, y = affine_instance(101)
        d = prior.dim
        c = random_lower(d, 102)
        mu = prior.mean + 0.3
        cfg = losses.AlphaLossConfig(forward=fwd, prior=prior, noise=noise,
                                     y=y, alpha=0.5, k_samples=1 << 14)
        val_s, calls = losses.loss_alpha(mu, c, cfg)
        val_e = losses.loss_alpha_affine(mu, c, cfg)
        assert calls == 1 << 14
        assert abs(val_s - val_e) < 0.02 * abs(val_e)

    def test_scalar_identity_instance_hand_value(self):
        d = 1
        fwd = AffineModel(np.eye(d))
        prior = GaussianModel(np.zeros(d), SPDMatrix(np.eye(d)))
        noise = GaussianModel(np.zeros(d), SPDMatrix(np.eye(d)))
        cfg = losses.AlphaLossConfig(forward=fwd, prior=prior, noise=noise,
                                     y=np.array([1.0]), alpha=0.5, k_samples=4)
        mu = np.array([0.5])
        c = np.array([[2.0]])
        val = losses.loss_alpha_affine(mu, c, cfg)
        # lines: (1-a)(mu^2/G + Gpr/G) + a(mu^2 + G) + a((y-mu)^2 + G)
        expected = 0.5 * (0.25 / 4 + 1.0 / 4) + 0.5 * (0.25 + 4.0) + 0.5 * (0.25 + 4.0)
        assert_allclose(val, expected, rtol=1e-12)

    def test_gradients_match_finite_differences(self):
        for seed in range(3):
            fwd, prior, noise, y = exp_instance(110 + seed)
            d = prior.dim
            rng = np.random.default_rng(seed)
            mu = 0.3 * rng.standard_normal(d)
            c = random_lower(d, 700 + seed)
            cfg = losses.AlphaLossConfig(forward=fwd, prior=prior, noise=noise,
                                         y=y, alpha=0.35, k_samples=32,
                                         seed=seed)
            eps = cfg.draw_eps()
            dmu, dc = losses.grad_loss_alpha(mu, c, cfg, eps)
            h = 1e-6
            for i in range(d):
                e = np.zeros(d); e[i] = h
                up, _ = losses.loss_alpha(mu + e, c, cfg, eps)
                dn, _ = losses.loss_alpha(mu - e, c, cfg, eps)
                fd = (up - dn) / (2 * h)
                assert abs(fd - dmu[i]) < 1e-4 * max(abs(fd), 1e-6)
            for i in range(d):
                for j in range(i + 1):
                    e = np.zeros((d, d)); e[i, j] = h
                    up, _ = losses.loss_alpha(mu, c + e, cfg, eps)
                    dn, _ = losses.loss_alpha(mu, c - e, cfg, eps)
                    fd = (up - dn) / (2 * h)
                    assert abs(fd - dc[i, j]) < 1e-4 * max(abs(fd), 1e-6)


class TestRecoverPosteriorAlpha:
    def test_prior_centered_simplification(self, rng):
        d = 3
        gpr = random_spd(d, 120)
        g_hat = random_spd(d, 121)
        g_lap = random_spd(d, 122)
        mu_pr = rng.standard_normal(d)
        mu, gamma = losses.recover_posterior_alpha(
            mu_pr, g_hat.mat, g_lap, mu_pr, gpr, alpha=0.5
        )
        assert_allclose(mu, mu_pr, atol=1e-12)
        expected = g_hat.mat @ np.linalg.inv(gpr.mat) @ g_hat.mat
        assert_allclose(gamma.mat, expected, rtol=1e-9)

    def test_scalar_case(self):
        mu, gamma = losses.recover_posterior_alpha(
            np.zeros(1), np.array([[2.0]]), SPDMatrix([[1.0]]),
            np.zeros(1), SPDMatrix([[4.0]]), alpha=0.5,
        )
        assert_allclose(gamma.mat, [[1.0]], rtol=1e-12)


class TestTheoremRecoveries:
    def test_affine_direct_theta_recovers_map_laplace(self):
        fwd, prior, noise, y = affine_instance(130, d=5, o=7)
        u_map, g_lap = map_laplace_affine(fwd, prior, noise, y)
        cfg = losses.ThetaLossConfig(forward=fwd, prior=prior, noise=noise,
                                     y=y, theta=1e-4)
        mu_hat, c_hat, _ = losses.minimize_theta_direct(cfg)
        mu_post, g_post = losses.recover_posterior_theta(mu_hat, c_hat, prior.cov)
        assert np.abs(mu_post - u_map).max() / np.abs(u_map).max() < 1e-6
        rel_f = np.linalg.norm(g_post.mat - g_lap.mat) / np.linalg.norm(g_lap.mat)
        assert rel_f < 1e-3

    def test_affine_direct_alpha_recovers_map_laplace(self):
        fwd, prior, noise, y = affine_instance(131, d=5, o=7)
        u_map, g_lap = map_laplace_affine(fwd, prior, noise, y)
        cfg = losses.AlphaLossConfig(forward=fwd, prior=prior, noise=noise,
                                     y=y, alpha=0.5, k_samples=8)
        mu_hat, c_hat, _ = losses.minimize_alpha_affine_direct(cfg)
        mu_post, g_post = losses.recover_posterior_alpha(
            mu_hat, c_hat @ c_hat.T, g_lap, prior.mean, prior.cov, 0.5
        )
        assert np.abs(mu_post - u_map).max() / np.abs(u_map).max() < 1e-6
        rel_f = np.linalg.norm(g_post.mat - g_lap.mat) / np.linalg.norm(g_lap.mat)
        assert rel_f < 1e-3

    def test_random_starts_reach_the_same_recovery(self):
        fwd, prior, noise, y = affine_instance(132, d=3, o=4)
        u_map, g_lap = map_laplace_affine(fwd, prior, noise, y)
        cfg = losses.ThetaLossConfig(forward=fwd, prior=prior, noise=noise, y=y)
        rng = np.random.default_rng(5)
        for _ in range(3):
            mu0 = prior.mean + rng.standard_normal(3)
            c0 = random_lower(3, int(rng.integers(1 << 30)))
            mu_hat, c_hat, _ = losses.minimize_theta_direct(cfg, mu0=mu0, c0=c0)
            mu_post, g_post = losses.recover_posterior_theta(mu_hat, c_hat, prior.cov)
            assert np.abs(mu_post - u_map).max() / np.abs(u_map).max() < 1e-5
            assert np.linalg.norm(g_post.mat - g_lap.mat) < 1e-2 * np.linalg.norm(g_lap.mat)


class TestBatchedPaths:
    def test_theta_batch_matches_per_sample(self, rng):
        fwd, prior, noise, _ = exp_instance(140)
        d = prior.dim
        b = 6
        mus = 0.3 * rng.standard_normal((b, d))
        cs = np.stack([random_lower(d, 300 + i) for i in range(b)])
        ys = rng.standard_normal((b, d))
        vals, dmus, dcs, calls = losses.theta_batch_value_grad(
            mus, cs, ys, fwd, prior, noise, 1e-3
        )
        assert calls == b * (d + 1)
        for i in range(b):
            cfg = losses.ThetaLossConfig(forward=fwd, prior=prior, noise=noise,
                                         y=ys[i], theta=1e-3)
            val, _ = losses.loss_theta(mus[i], cs[i], cfg)
            dmu, dc = losses.grad_loss_theta(mus[i], cs[i], cfg)
            assert_allclose(vals[i], val, rtol=1e-12)
            assert_allclose(dmus[i], dmu, rtol=1e-9, atol=1e-12)
            assert_allclose(dcs[i], dc, rtol=1e-9, atol=1e-12)

    def test_alpha_batch_matches_per_sample(self, rng):
        fwd, prior, noise, _ = exp_instance(141)
        d = prior.dim
        b, k = 5, 24
        mus = 0.3 * rng.standard_normal((b, d))
        cs = np.stack([random_lower(d, 400 + i) for i in range(b)])
        ys = rng.standard_normal((b, d))
        eps = np.random.default_rng(9).standard_normal((k, d))
        vals, dmus, dcs, calls = losses.alpha_batch_value_grad(
            mus, cs, ys, fwd, prior, noise, 0.4, eps
        )
        assert calls == b * k
        for i in range(b):
            cfg = losses.AlphaLossConfig(forward=fwd, prior=prior, noise=noise,
                                         y=ys[i], alpha=0.4, k_samples=k)
            val, _ = losses.loss_alpha(mus[i], cs[i], cfg, eps)
            dmu, dc = losses.grad_loss_alpha(mus[i], cs[i], cfg, eps)
            assert_allclose(vals[i], val, rtol=1e-12)
            assert_allclose(dmus[i], dmu, rtol=1e-9, atol=1e-12)
            assert_allclose(dcs[i], dc, rtol=1e-9, atol=1e-12)


class TestDecoderTraining:
    def test_linear_target_is_realizable(self, rng):
        d, o, m = 3, 2, 200
        w = rng.standard_normal((o, d))
        x = rng.uniform(0, 1, (m, d))
        t = x @ w.T
        spec = nnet.MLPSpec(d, 0, 1, o)
        opt = losses.OptConfig(epochs=1500, lr=3e-2, seed=0)
        params, history = losses.train_decoder(spec, x, t, opt)
        assert history[-1].val_loss < 1e-6

    def test_constant_targets_learned(self, rng):
        x = rng.uniform(0, 1, (60, 2))
        t = np.full((60, 3), 0.4)
        spec = nnet.MLPSpec(2, 1, 8, 3)
        params, history = losses.train_decoder(
            spec, x, t, losses.OptConfig(epochs=800, lr=1e-2, seed=1)
        )
        assert history[-1].train_loss < 1e-5

    def test_beats_variance_baseline_on_smooth_map(self, rng):
        d = 5
        x = rng.uniform(0, 1, (400, d))
        t = np.exp(0.5 * x)
        spec = nnet.MLPSpec(d, 2, 32, d)
        params, history = losses.train_decoder(
            spec, x, t, losses.OptConfig(epochs=600, lr=3e-3, seed=2)
        )
        baseline = t[: (9 * 400) // 10].var()
        assert history[-1].val_loss < 0.05 * baseline


class TestDecoderErrorStats:
    def test_perfect_decoder_gives_jitter_only(self, rng):
        fwd = exp_map(2)
        u = rng.standard_normal((10, 2)) * 0.3
        err = losses.decoder_error_stats(fwd, fwd, u)
        assert_allclose(err.mu_dec, 0.0, atol=1e-14)
        assert np.abs(err.gamma_dec.mat - 1e-12 * np.eye(2)).max() < 1e-13

    def test_constant_bias_recovered(self, rng):
        fwd = exp_map(2)
        bias = np.array([0.5, -0.25])
        u = rng.standard_normal((12, 2)) * 0.3
        preds = fwd.eval_many(u) - bias  # decoder that underestimates by bias
        err = losses.decoder_error_stats_from_pairs(preds, fwd.eval_many(u))
        assert_allclose(err.mu_dec, bias, atol=1e-12)
        assert np.abs(err.gamma_dec.mat).max() < 1e-10

    def test_matches_two_pass_covariance(self, rng):
        resid = rng.standard_normal((40, 3))
        preds = np.zeros((40, 3))
        err = losses.decoder_error_stats_from_pairs(preds, resid)
        mu = resid.mean(axis=0)
        two_pass = (resid - mu).T @ (resid - mu) / 39
        assert_allclose(err.mu_dec, mu)
        assert_allclose(err.gamma_dec.mat, two_pass, rtol=1e-12)

    def test_insufficient_samples_rejected(self, rng):
        with pytest.raises(InsufficientSamples):
            losses.decoder_error_stats_from_pairs(
                rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
            )


class TestEncoderTraining:
    def test_initialized_encoder_outputs_prior(self, rng):
        d, o = 3, 4
        prior = GaussianModel(rng.standard_normal(d), random_spd(d, 150, 0.3))
        spec = nnet.MLPSpec(o, 1, 16, nnet.head_dim(d))
        params = nnet.init_encoder(spec, prior.mean, prior.cov.chol, seed=3)
        for _ in range(10):
            y = rng.uniform(0, 1, o)
            raw, _ = nnet.forward(params, y)
            out = nnet.decode_head(raw, d)
            assert np.abs(out.mu - prior.mean).max() < 1e-3
            assert np.abs(out.C - prior.cov.chol).max() < 1e-3

    def test_single_layer_linear_encoder_affine_case(self):
        # with an affine map, a linear encoder head trained on the
        # perturbation loss recovers the closed-form posterior per sample
        rng = np.random.default_rng(160)
        d, o, m = 2, 3, 40
        prior = GaussianModel(np.array([0.2, -0.4]), random_spd(d, 161, 0.3))
        noise = GaussianModel(np.zeros(o), SPDMatrix(0.05 * np.eye(o)))
        fwd = AffineModel(rng.standard_normal((o, d)), rng.standard_normal(o))
        u = prior.sample(rng, m)
        y_rows = fwd.eval_many(u) + noise.sample(rng, m)
        spec = nnet.MLPSpec(o, 0, 1, nnet.head_dim(d))
        cfg = losses.EncoderTrainConfig(loss="theta", theta=1e-4)
        opt = losses.OptConfig(epochs=4000, lr=2e-2, seed=4)
        params, history = losses.train_encoder(
            spec, y_rows, fwd, prior, noise, cfg, opt
        )
        assert history[-1].train_loss < history[0].train_loss
        worst_mu, worst_g = 0.0, 0.0
        for y in y_rows[:8]:
            u_map, g_lap = map_laplace_affine(fwd, prior, noise, y)
            raw, _ = nnet.forward(params, y)
            out = nnet.decode_head(raw, d)
            mu_post, g_post = losses.recover_posterior_theta(out.mu, out.C, prior.cov)
            worst_mu = max(worst_mu, np.abs(mu_post - u_map).max() / np.abs(u_map).max())
            worst_g = max(
                worst_g,
                np.linalg.norm(g_post.mat - g_lap.mat) / np.linalg.norm(g_lap.mat),
            )
        assert worst_mu < 0.02
        assert worst_g < 0.05

    def test_single_sample_training_approaches_direct_optimum(self):
        fwd, prior, noise, y = exp_instance(170)
        d = prior.dim
        cfg_loss = losses.ThetaLossConfig(forward=fwd, prior=prior, noise=noise, y=y)
        mu_hat, c_hat, _ = losses.minimize_theta_direct(cfg_loss)
        best, _ = losses.loss_theta(mu_hat, c_hat, cfg_loss)
        spec = nnet.MLPSpec(d, 1, 32, nnet.head_dim(d))
        cfg = losses.EncoderTrainConfig(loss="theta", theta=cfg_loss.theta)
        opt = losses.OptConfig(epochs=3000, lr=5e-3, seed=5)
        params, history = losses.train_encoder(
            spec, np.tile(y, (2, 1)), fwd, prior, noise, cfg, opt
        )
        # training loss approaches the direct minimum for this observation
        assert history[-1].train_loss < best * 1.01 + 1e-9

    def test_training_is_reproducible(self):
        fwd, prior, noise, y = exp_instance(171)
        d = prior.dim
        rng = np.random.default_rng(7)
        y_rows = y + 0.05 * rng.standard_normal((6, d))
        spec = nnet.MLPSpec(d, 1, 8, nnet.head_dim(d))
        cfg = losses.EncoderTrainConfig(loss="theta")
        runs = []
        for _ in range(2):
            fwd.reset_calls()
            params, history = losses.train_encoder(
                spec, y_rows, fwd, prior, noise, cfg,
                losses.OptConfig(epochs=40, lr=1e-3, seed=8),
            )
            runs.append((params, [h.train_loss for h in history]))
        assert runs[0][1] == runs[1][1]
        for w0, w1 in zip(runs[0][0].weights, runs[1][0].weights):
            assert_allclose(w0, w1, rtol=0, atol=0)

    def test_alpha_training_runs_and_descends(self):
        fwd, prior, noise, y = exp_instance(172)
        d = prior.dim
        rng = np.random.default_rng(9)
        y_rows = y + 0.05 * rng.standard_normal((6, d))
        spec = nnet.MLPSpec(d, 1, 8, nnet.head_dim(d))
        cfg = losses.EncoderTrainConfig(loss="alpha", alpha=0.5, k_samples=64)
        params, history = losses.train_encoder(
            spec, y_rows, fwd, prior, noise, cfg,
            losses.OptConfig(epochs=150, lr=3e-3, seed=10),
        )
        assert history[-1].train_loss < history[0].train_loss
