import numpy as np
import pytest
from numpy.testing import assert_allclose

from uqvae.errors import DimensionMismatch, ForwardFailure
from uqvae.forward import AffineModel, ElementwiseAffineWrapped, exp_map


class TestExpMap:
    def test_zero_maps_to_ones(self):
        assert_allclose(exp_map(4).eval(np.zeros(4)), np.ones(4))

    def test_prior_mean_value(self):
        y = exp_map(3).eval(np.full(3, -3.0))
        assert_allclose(y, np.exp(-3.0), rtol=1e-15)

    def test_jacobian_matches_finite_differences(self, rng):
        model = exp_map(5)
        u = rng.standard_normal(5)
        jac = model.jacobian(u)
        h = 1e-6
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            fd = (model.eval(u + e) - model.eval(u - e)) / (2 * h)
            assert np.abs(fd - jac[:, i]).max() < 1e-6 * max(np.abs(fd).max(), 1)

    def test_overflow_guard(self):
        with pytest.raises(ForwardFailure):
            exp_map(2).eval(np.array([800.0, 0.0]))

    def test_call_counter_counts_rows(self):
        model = exp_map(3)
        model.eval(np.zeros(3))
        model.eval_many(np.zeros((7, 3)))
        assert model.call_count == 8
        model.reset_calls()
        assert model.call_count == 0

    def test_dimension_checked(self):
        with pytest.raises(DimensionMismatch):
            exp_map(3).eval(np.zeros(4))


class TestAffineModel:
    def test_evaluation_and_jacobian(self, rng):
        f = rng.standard_normal((4, 3))
        b = rng.standard_normal(4)
        model = AffineModel(f, b)
        u = rng.standard_normal(3)
        assert_allclose(model.eval(u), f @ u + b)
        assert_allclose(model.jacobian(u), f)

    def test_vjp(self, rng):
        f = rng.standard_normal((4, 3))
        model = AffineModel(f)
        u = rng.standard_normal((5, 3))
        w = rng.standard_normal((5, 4))
        assert_allclose(model.vjp_many(u, w), w @ f)


class TestNormalizedWrapper:
    def test_wraps_scales_consistently(self, rng):
        inner = exp_map(3)
        a = rng.uniform(0.5, 2.0, 3)
        b = rng.uniform(-0.5, 0.5, 3)
        c = rng.uniform(0.5, 2.0, 3)
        d = rng.uniform(-0.5, 0.5, 3)
        wrapped = ElementwiseAffineWrapped(inner, a, b, c, d)
        u = rng.standard_normal(3)
        u_bar = u * a + b
        assert_allclose(wrapped.eval(u_bar), np.exp(u) * c + d, rtol=1e-12)

    def test_wrapped_jacobian_chain_rule(self, rng):
        inner = exp_map(2)
        a, b = np.array([2.0, 0.5]), np.array([0.1, -0.2])
        c, d = np.array([3.0, 1.5]), np.array([0.0, 0.3])
        wrapped = ElementwiseAffineWrapped(inner, a, b, c, d)
        u_bar = rng.standard_normal(2)
        jac = wrapped.jacobian(u_bar)
        h = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (wrapped.eval(u_bar + e) - wrapped.eval(u_bar - e)) / (2 * h)
            assert_allclose(jac[:, i], fd, rtol=1e-5)

    def test_wrapped_vjp_matches_jacobian(self, rng):
        inner = exp_map(3)
        wrapped = ElementwiseAffineWrapped(
            inner, rng.uniform(0.5, 2, 3), rng.standard_normal(3),
            rng.uniform(0.5, 2, 3), rng.standard_normal(3),
        )
        u = rng.standard_normal((4, 3))
        w = rng.standard_normal((4, 3))
        got = wrapped.vjp_many(u, w)
        for i in range(4):
            assert_allclose(got[i], wrapped.jacobian(u[i]).T @ w[i], rtol=1e-10)

    def test_counter_counts_on_wrapper(self):
        inner = exp_map(2)
        wrapped = ElementwiseAffineWrapped(inner, np.ones(2), np.zeros(2),
                                           np.ones(2), np.zeros(2))
        wrapped.eval_many(np.zeros((5, 2)))
        assert wrapped.call_count == 5
