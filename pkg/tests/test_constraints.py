"""Constraint layers: exact conservation, differentiability, equivariance."""
import numpy as np

from stagflow import tensor as T
from stagflow.constraints import (divfree_increments, divfree_update,
                                  mass_correction, mass_correction_np,
                                  momentum_correction, momentum_correction_np)
from stagflow.grid import PERIODIC, GridSpec, INSState, curl_of_potential, divergence
from stagflow.symmetry import P4M, act_cell, act_staggered, act_vertex
from stagflow.tensor import Tensor

from helpers import gradcheck


class TestMassCorrection:
    def test_constant_becomes_zero(self):
        out = mass_correction(Tensor(np.full((1, 1, 4, 4), 5.0)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 1, 4, 4)))

    def test_zero_mean_unchanged(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 1, 5, 5))
        x -= x.mean()
        out = mass_correction(Tensor(x))
        np.testing.assert_allclose(out.data, x, atol=1e-16)

    def test_matches_loop_oracle_and_exact_zero_mean(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 5))
        out = mass_correction_np(x)
        m = 0.0
        for v in x.ravel():
            m += v
        m /= x.size
        np.testing.assert_allclose(out, x - m, atol=1e-15)
        assert abs(out.mean()) <= 1e-15

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(1, 1, 4, 4)))
        once = mass_correction(x)
        twice = mass_correction(once)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-16)

    def test_jacobian_vector_products(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
        target = rng.normal(size=(1, 1, 4, 4))

        def loss():
            return T.mse_loss(mass_correction(w), target)

        gradcheck(loss, {"w": w})

    def test_commutes_with_group_actions(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 5))
        for g in P4M:
            lhs = mass_correction_np(act_cell(g, x))
            rhs = act_cell(g, mass_correction_np(x))
            np.testing.assert_allclose(lhs, rhs, atol=1e-14)


class TestMomentumCorrection:
    def test_constant_becomes_zero(self):
        du, dv = momentum_correction(Tensor(np.full((1, 1, 4, 4), 2.0)),
                                     Tensor(np.full((1, 1, 4, 4), -3.0)))
        assert not du.data.any() and not dv.data.any()

    def test_sum_preserved_after_update(self):
        rng = np.random.default_rng(5)
        g = GridSpec(6, 6, 1.0, PERIODIC)
        u0 = rng.normal(size=(6, 6))
        du, dv = momentum_correction_np(rng.normal(size=(6, 6)),
                                        rng.normal(size=(6, 6)))
        assert abs((u0 + du).sum() - u0.sum()) <= 1e-12 * max(1.0, abs(u0.sum()))

    def test_gradients(self):
        rng = np.random.default_rng(6)
        w = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)

        def loss():
            du, dv = momentum_correction(w, T.scale(w, 2.0))
            return T.mse_loss(T.add(du, dv), np.zeros((1, 1, 4, 4)))

        gradcheck(loss, {"w": w})

    def test_commutes_with_group_actions(self):
        rng = np.random.default_rng(7)
        grid = GridSpec(6, 6, 1.0, PERIODIC)
        u = rng.normal(size=(6, 6))
        v = rng.normal(size=(6, 6))
        for g in P4M:
            ug, vg = act_staggered(g, u, v, grid)
            lhs = momentum_correction_np(ug, vg)
            cu, cv = momentum_correction_np(u, v)
            rhs = act_staggered(g, cu, cv, grid)
            np.testing.assert_allclose(lhs[0], rhs[0], atol=1e-14)
            np.testing.assert_allclose(lhs[1], rhs[1], atol=1e-14)


class TestDivfreeUpdate:
    def _state(self, rng, n=8, dx=0.5):
        grid = GridSpec(n, n, dx, PERIODIC)
        u, v = curl_of_potential(rng.normal(size=(n, n)), grid)
        return INSState(grid, u, v)

    def test_zero_potential_identity(self):
        s = self._state(np.random.default_rng(8))
        out = divfree_update(np.zeros((8, 8)), s)
        np.testing.assert_array_equal(out.u, s.u)
        np.testing.assert_array_equal(out.v, s.v)

    def test_divergence_and_momentum_preserved(self):
        rng = np.random.default_rng(9)
        s = self._state(rng)
        a = rng.normal(size=(8, 8))
        out = divfree_update(a, s)
        d0 = divergence(s.u, s.v, s.grid)
        d1 = divergence(out.u, out.v, out.grid)
        assert np.max(np.abs(d1 - d0)) <= 1e-12
        assert abs(out.u.sum() - s.u.sum()) <= 1e-12
        assert abs(out.v.sum() - s.v.sum()) <= 1e-12

    def test_momentum_correction_is_noop_on_curl(self):
        # curl increments are already zero-mean, so composing with the
        # momentum correction (the M+rho-u configuration) changes nothing
        rng = np.random.default_rng(10)
        a = Tensor(rng.normal(size=(1, 1, 8, 8)))
        du, dv = divfree_increments(a, 0.5)
        cu, cv = momentum_correction(du, dv)
        assert np.max(np.abs(cu.data - du.data)) <= 1e-12
        assert np.max(np.abs(cv.data - dv.data)) <= 1e-12

    def test_gradients(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.normal(size=(1, 1, 5, 5)), requires_grad=True)
        tu = rng.normal(size=(1, 1, 5, 5))
        tv = rng.normal(size=(1, 1, 5, 5))

        def loss():
            du, dv = divfree_increments(a, 0.7)
            return T.add(T.mse_loss(du, tu), T.mse_loss(dv, tv))

        gradcheck(loss, {"a": a})

    def test_equivariance_of_curl_update(self):
        rng = np.random.default_rng(12)
        s = self._state(rng, n=6, dx=1.0)
        a = rng.normal(size=(6, 6))
        for g in P4M:
            lhs = divfree_update(act_vertex(g, a),
                                 INSState(s.grid, *act_staggered(g, s.u, s.v, s.grid)))
            base = divfree_update(a, s)
            ru, rv = act_staggered(g, base.u, base.v, s.grid)
            np.testing.assert_allclose(lhs.u, ru, atol=1e-13)
            np.testing.assert_allclose(lhs.v, rv, atol=1e-13)
