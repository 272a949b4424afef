"""Equivariance and hand-checked cases for input, hidden and output layers."""
import numpy as np
import pytest

from stagflow import tensor as T
from stagflow.grid import CLOSED, PERIODIC, GridSpec, divergence
from stagflow.layers import (CollocatedInputLayer, GroupConv,
                             OutputCoefficients, ScalarOutputLayer,
                             StaggeredInputLayer, VectorOutputLayer,
                             VertexOutputLayer, curl_tensor, group_mean)
from stagflow.symmetry import (P1, P4, P4M, GroupElement, act_cell,
                               act_regular, act_staggered, act_vertex,
                               compose)
from stagflow.tensor import Tensor

from helpers import gradcheck

N_DRAWS = 10
TOL = 1e-12


def rand_fields(rng, grid, centers):
    cen = rng.normal(size=(1, centers, grid.ny, grid.nx)) if centers else None
    u = rng.normal(size=(1, 1) + grid.facex_shape)
    v = rng.normal(size=(1, 1) + grid.facey_shape)
    return cen, u, v


def input_layer_error(layer, grid, rng, centers):
    group = layer.group
    cen, u, v = rand_fields(rng, grid, centers)

    def fwd(c, uu, vv):
        out = layer.forward(c, uu, vv)
        return out.data.reshape(layer.out_channels, group.order, grid.ny, grid.nx)

    base = fwd(cen, u, v)
    worst = 0.0
    for g in group:
        if g.is_identity:
            continue
        ug, vg = act_staggered(g, u[0, 0], v[0, 0], grid)
        cg = act_cell(g, cen[0])[None] if cen is not None else None
        lhs = fwd(cg, ug[None, None], vg[None, None])
        rhs = act_regular(g, base, group)
        worst = max(worst, np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)))
    return worst


class TestInputLayers:
    @pytest.mark.parametrize("group", [P4, P4M])
    @pytest.mark.parametrize("bc,centers", [(CLOSED, 2), (PERIODIC, 0)])
    def test_equivariance_random_draws(self, group, bc, centers):
        grid = GridSpec(6, 6, 1.0, bc)
        rng = np.random.default_rng(0)
        for _ in range(N_DRAWS):
            layer = StaggeredInputLayer(group, 3, centers, 3, bc, rng)
            layer.bias.data[:] = rng.normal(size=3)
            assert input_layer_error(layer, grid, rng, centers) <= TOL

    def test_zero_inputs_zero_bias_zero_output(self):
        grid = GridSpec(5, 5, 1.0, CLOSED)
        rng = np.random.default_rng(1)
        layer = StaggeredInputLayer(P4M, 2, 2, 3, CLOSED, rng)
        out = layer.forward(np.zeros((1, 2, 5, 5)),
                            np.zeros((1, 1, 5, 4)), np.zeros((1, 1, 4, 5)))
        np.testing.assert_array_equal(out.data, np.zeros_like(out.data))

    def test_ins_zero_inputs_zero_output(self):
        rng = np.random.default_rng(20)
        layer = StaggeredInputLayer(P4M, 2, 0, 3, PERIODIC, rng)
        out = layer.forward(None, np.zeros((1, 1, 6, 6)),
                            np.zeros((1, 1, 6, 6)))
        np.testing.assert_array_equal(out.data, np.zeros_like(out.data))

    def test_unit_center_kernel_reproduces_zeta(self):
        # 1x1 W_center = 1 on the zeta channel, W_u = W_v = 0, zero bias:
        # every group channel is zeta itself
        grid = GridSpec(5, 5, 1.0, CLOSED)
        rng = np.random.default_rng(2)
        layer = StaggeredInputLayer(P4, 1, 2, 1, CLOSED, rng)
        layer.wc.data[:] = 0.0
        layer.wc.data[0, 0, 0, 0] = 1.0
        layer.wu.data[:] = 0.0
        layer.wv.data[:] = 0.0
        layer.bias.data[:] = 0.0
        zeta = rng.normal(size=(5, 5))
        cen = np.stack([zeta, np.zeros((5, 5))])[None]
        out = layer.forward(cen, np.zeros((1, 1, 5, 4)), np.zeros((1, 1, 4, 5)))
        np.testing.assert_array_equal(out.data[0, 0], zeta)

    def test_delta_u_kernel_alignment(self):
        # W_u with a single 1 at the +1/2 tap reproduces u at the centers
        # to its right face; the -1/2 tap sees the wrapped shift
        grid = GridSpec(6, 6, 1.0, PERIODIC)
        rng = np.random.default_rng(3)
        layer = StaggeredInputLayer(P4, 1, 0, 3, PERIODIC, rng)
        layer.wu.data[:] = 0.0
        layer.wv.data[:] = 0.0
        layer.bias.data[:] = 0.0
        u = rng.normal(size=(6, 6))
        layer.wu.data[0, 0, 1, 1] = 1.0  # dy = 0, dx = +1/2
        out = layer.forward(None, u[None, None], np.zeros((1, 1, 6, 6)))
        np.testing.assert_allclose(out.data[0, 0], u, atol=1e-15)
        layer.wu.data[0, 0, 1, :] = [1.0, 0.0]  # dy = 0, dx = -1/2
        out = layer.forward(None, u[None, None], np.zeros((1, 1, 6, 6)))
        np.testing.assert_allclose(out.data[0, 0], np.roll(u, 1, axis=1),
                                   atol=1e-15)

    def test_collocated_lifting_breaks_equivariance(self):
        grid = GridSpec(8, 8, 1.0, PERIODIC)
        rng = np.random.default_rng(4)
        layer = CollocatedInputLayer(P4M, 3, 0, 3, PERIODIC, rng)
        err = input_layer_error(layer, grid, rng, 0)
        assert err > 1e-3

    def test_input_gradients(self):
        grid = GridSpec(4, 4, 1.0, CLOSED)
        rng = np.random.default_rng(5)
        layer = StaggeredInputLayer(P4, 2, 1, 3, CLOSED, rng)
        cen = rng.normal(size=(1, 1, 4, 4))
        u = rng.normal(size=(1, 1, 4, 3))
        v = rng.normal(size=(1, 1, 3, 4))
        target = rng.normal(size=(1, 8, 4, 4))

        def loss():
            return T.mse_loss(layer.forward(cen, u, v), target)

        gradcheck(loss, layer.params())


class TestGroupConv:
    @pytest.mark.parametrize("group", [P1, P4, P4M])
    def test_equivariance(self, group):
        n = 6
        rng = np.random.default_rng(6)
        for _ in range(N_DRAWS):
            conv = GroupConv(group, 2, 2, 3, PERIODIC, rng, "h")
            conv.bias.data[:] = rng.normal(size=2)
            x = rng.normal(size=(2, group.order, n, n))

            def fwd(x4):
                out = conv.forward(Tensor(x4.reshape(1, -1, n, n)))
                return out.data.reshape(2, group.order, n, n)

            base = fwd(x)
            for g in group:
                if g.is_identity:
                    continue
                lhs = fwd(act_regular(g, x, group))
                rhs = act_regular(g, base, group)
                assert np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)) <= TOL

    def test_identity_filter_is_identity(self):
        # k = 1 delta over the group axis: out(g) = in(g)
        rng = np.random.default_rng(7)
        conv = GroupConv(P4, 2, 2, 1, PERIODIC, rng, "h")
        conv.w.data[:] = 0.0
        for c in range(2):
            conv.w.data[c, c, 0, 0, 0] = 1.0  # identity group element
        conv.bias.data[:] = 0.0
        x = rng.normal(size=(1, 8, 5, 5))
        out = conv.forward(Tensor(x))
        np.testing.assert_allclose(out.data, x, atol=1e-15)

    def test_composition_stays_equivariant(self):
        n = 5
        rng = np.random.default_rng(8)
        c1 = GroupConv(P4M, 1, 2, 3, PERIODIC, rng, "a")
        c2 = GroupConv(P4M, 2, 1, 3, PERIODIC, rng, "b")
        x = rng.normal(size=(1, 8, n, n))

        def fwd(x4):
            out = c2.forward(T.gelu(c1.forward(Tensor(x4.reshape(1, -1, n, n)))))
            return out.data.reshape(1, 8, n, n)

        base = fwd(x)
        for g in P4M:
            if g.is_identity:
                continue
            lhs = fwd(act_regular(g, x, P4M))
            rhs = act_regular(g, base, P4M)
            assert np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)) <= TOL

    def test_gradients(self):
        rng = np.random.default_rng(9)
        conv = GroupConv(P4, 1, 1, 3, PERIODIC, rng, "h")
        x = rng.normal(size=(1, 4, 4, 4))
        target = rng.normal(size=(1, 4, 4, 4))

        def loss():
            return T.mse_loss(conv.forward(Tensor(x)), target)

        gradcheck(loss, conv.params())


class TestScalarOutput:
    def test_constant_regular_gives_constant_cell(self):
        rng = np.random.default_rng(10)
        layer = ScalarOutputLayer(P4M, 1, 3, PERIODIC, rng)
        x = np.ones((1, 8, 6, 6)) * 2.5
        out = layer.forward(Tensor(x)).data[0, 0]
        assert np.max(np.abs(out - out[0, 0])) < 1e-13

    def test_zero_input_zero_bias_zero_output(self):
        rng = np.random.default_rng(11)
        layer = ScalarOutputLayer(P4, 2, 3, PERIODIC, rng)
        out = layer.forward(Tensor(np.zeros((1, 8, 5, 5))))
        np.testing.assert_array_equal(out.data, np.zeros((1, 1, 5, 5)))

    @pytest.mark.parametrize("group", [P4, P4M])
    def test_invariant_output_equivariance(self, group):
        n = 6
        rng = np.random.default_rng(12)
        for _ in range(N_DRAWS):
            layer = ScalarOutputLayer(group, 2, 3, PERIODIC, rng)
            layer.conv.bias.data[:] = rng.normal()
            x = rng.normal(size=(2, group.order, n, n))

            def fwd(x4):
                return layer.forward(Tensor(x4.reshape(1, -1, n, n))).data[0, 0]

            base = fwd(x)
            for g in group:
                if g.is_identity:
                    continue
                lhs = fwd(act_regular(g, x, group))
                rhs = act_cell(g, base)
                assert np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)) <= TOL


class TestVectorOutput:
    def test_zero_input_zero_output(self):
        layer = VectorOutputLayer(P4)
        u, v = layer.forward(Tensor(np.zeros((1, 4, 5, 5))))
        assert not u.data.any() and not v.data.any()

    @pytest.mark.parametrize("group", [P4, P4M])
    def test_equivariance(self, group):
        n = 6
        grid = GridSpec(n, n, 1.0, PERIODIC)
        rng = np.random.default_rng(13)
        layer = VectorOutputLayer(group)
        for _ in range(N_DRAWS):
            p = rng.normal(size=(1, group.order, n, n))

            def fwd(p4):
                u, v = layer.forward(Tensor(p4.reshape(1, -1, n, n)))
                return u.data[0, 0], v.data[0, 0]

            ub, vb = fwd(p)
            for g in group:
                if g.is_identity:
                    continue
                ul, vl = fwd(act_regular(g, p, group))
                ur, vr = act_staggered(g, ub, vb, grid)
                scale = max(np.max(np.abs(ur)), np.max(np.abs(vr)))
                err = max(np.max(np.abs(ul - ur)), np.max(np.abs(vl - vr)))
                assert err / scale <= TOL

    def test_p4_canonical_hand_expansion(self):
        # free vector (1,0,0,0) under the pinned ordering [e,r,r2,r3]:
        #   u(c+1/2) = p(c+1, ch0) - p(c, ch2)
        #   v(r+1/2) = p(r+1, ch1) - p(r, ch3)
        rng = np.random.default_rng(14)
        p = rng.normal(size=(1, 4, 5, 5))
        layer = VectorOutputLayer(P4)
        u, v = layer.forward(Tensor(p.reshape(1, 4, 5, 5)))
        np.testing.assert_allclose(
            u.data[0, 0], np.roll(p[0, 0], -1, axis=1) - p[0, 2], atol=1e-15)
        np.testing.assert_allclose(
            v.data[0, 0], np.roll(p[0, 1], -1, axis=0) - p[0, 3], atol=1e-15)

    def test_coefficient_chains_validate(self):
        co = OutputCoefficients(P4, (1.0, 0.0, 0.0, 0.0))
        # round-trips through the full (c,d,e,f) validation
        OutputCoefficients.from_full(P4, co.c, co.d, co.e, co.f)
        bad = co.d.copy()
        bad[0] += 1.0
        with pytest.raises(ValueError, match="constraint chains"):
            OutputCoefficients.from_full(P4, co.c, bad, co.e, co.f)

    def test_general_free_vector_still_equivariant(self):
        n = 6
        grid = GridSpec(n, n, 1.0, PERIODIC)
        rng = np.random.default_rng(15)
        free = rng.normal(size=4)
        for group in (P4, P4M):
            layer = VectorOutputLayer(group, OutputCoefficients(group, free))
            p = rng.normal(size=(1, group.order, n, n))

            def fwd(p4):
                u, v = layer.forward(Tensor(p4.reshape(1, -1, n, n)))
                return u.data[0, 0], v.data[0, 0]

            ub, vb = fwd(p)
            for g in group:
                if g.is_identity:
                    continue
                ul, vl = fwd(act_regular(g, p, group))
                ur, vr = act_staggered(g, ub, vb, grid)
                scale = max(np.max(np.abs(ur)), np.max(np.abs(vr)))
                assert max(np.max(np.abs(ul - ur)),
                           np.max(np.abs(vl - vr))) / scale <= TOL


class TestVertexOutput:
    def test_zero_input_zero_potential(self):
        rng = np.random.default_rng(16)
        layer = VertexOutputLayer(P4M, 1, rng)
        out = layer.forward(Tensor(np.zeros((1, 8, 5, 5))))
        np.testing.assert_array_equal(out.data, np.zeros((1, 1, 5, 5)))

    def test_constant_input_constant_potential_zero_curl(self):
        rng = np.random.default_rng(17)
        layer = VertexOutputLayer(P4, 1, rng)
        out = layer.forward(Tensor(np.full((1, 4, 5, 5), 1.7)))
        a = out.data[0, 0]
        assert np.max(np.abs(a - a[0, 0])) < 1e-13
        du, dv = curl_tensor(Tensor(a[None, None]), 1.0)
        assert np.max(np.abs(du.data)) < 1e-13
        assert np.max(np.abs(dv.data)) < 1e-13

    @pytest.mark.parametrize("group", [P4, P4M])
    def test_pseudoscalar_equivariance(self, group):
        n = 6
        rng = np.random.default_rng(18)
        for _ in range(N_DRAWS):
            layer = VertexOutputLayer(group, 2, rng)
            x = rng.normal(size=(2, group.order, n, n))

            def fwd(x4):
                return layer.forward(Tensor(x4.reshape(1, -1, n, n))).data[0, 0]

            base = fwd(x)
            for g in group:
                if g.is_identity:
                    continue
                lhs = fwd(act_regular(g, x, group))
                rhs = act_vertex(g, base)
                assert np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)) <= TOL


class TestFullStack:
    @pytest.mark.parametrize("group", [P4, P4M])
    def test_lift_hidden_output_curl_chain(self, group):
        # input layer -> gelu -> group conv -> gelu -> vertex head -> curl:
        # the whole chain must commute with staggered actions at 1e-10
        n = 6
        grid = GridSpec(n, n, 0.5, PERIODIC)
        rng = np.random.default_rng(19)
        lift = StaggeredInputLayer(group, 2, 0, 3, PERIODIC, rng)
        lift.bias.data[:] = rng.normal(size=2)
        hidden = GroupConv(group, 2, 2, 3, PERIODIC, rng, "h")
        head = VertexOutputLayer(group, 2, rng)

        def fwd(u, v):
            r = T.gelu(lift.forward(None, u[None, None], v[None, None]))
            r = T.gelu(hidden.forward(r))
            a = head.forward(r)
            du, dv = curl_tensor(a, grid.dx)
            return du.data[0, 0], dv.data[0, 0]

        u = rng.normal(size=(n, n))
        v = rng.normal(size=(n, n))
        ub, vb = fwd(u, v)
        assert np.max(np.abs(divergence(ub, vb, grid))) < 1e-12
        for g in group:
            if g.is_identity:
                continue
            ug, vg = act_staggered(g, u, v, grid)
            ul, vl = fwd(ug, vg)
            ur, vr = act_staggered(g, ub, vb, grid)
            scale = max(np.max(np.abs(ur)), np.max(np.abs(vr)))
            assert max(np.max(np.abs(ul - ur)),
                       np.max(np.abs(vl - vr))) / scale <= 1e-10
