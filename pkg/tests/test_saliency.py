import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from gamkit.backend import capture
from gamkit.errors import EmptyInput, ShapeError
from gamkit.saliency import (
    EXP_OVERFLOW,
    SaliencyMap,
    explain,
    gam_aggregate,
    gam_layer_map,
    gcpp_beta,
    grad_cam,
    grad_campp,
    normalize_minmax,
    relu_clamp,
    resize_bicubic,
)
from gamkit.scoring import ScoreSpec

# a 1e-3 lattice keeps products clear of float underflow
lattice = st.integers(-5000, 5000).map(lambda v: v / 1000)
pairs = st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda shp: st.tuples(
        arrays(np.float64, shp, elements=lattice),
        arrays(np.float64, shp, elements=lattice),
    )
)
TARGET = (9, 7)


class TestPrimitives:
    def test_relu_clamp(self):
        np.testing.assert_array_equal(relu_clamp([[1, -1], [2, 0]]), [[1, 0], [2, 0]])
        np.testing.assert_array_equal(relu_clamp(-np.ones((3, 2))), np.zeros((3, 2)))
        g = np.abs(np.random.default_rng(0).normal(size=(4, 4)))
        np.testing.assert_array_equal(relu_clamp(g), g)

    def test_resize_constant(self):
        np.testing.assert_allclose(resize_bicubic(np.full((3, 2), 4.2), (11, 5)), 4.2, atol=1e-12)

    def test_resize_identity(self):
        g = np.random.default_rng(1).normal(size=(5, 4))
        np.testing.assert_allclose(resize_bicubic(g, (5, 4)), g, atol=1e-9)

    def test_resize_ramp_monotone(self):
        out = resize_bicubic([[0.0, 1.0], [0.0, 1.0]], (4, 4))
        assert np.all(np.diff(out, axis=1) >= -1e-12)

    @pytest.mark.parametrize("shape,target", [((2, 2), (4, 4)), ((6, 5), (13, 17)), ((1, 3), (7, 2)), ((7, 7), (224, 224))])
    def test_resize_matches_reference(self, shape, target):
        g = np.random.default_rng(2).normal(size=shape)
        np.testing.assert_allclose(resize_bicubic(g, target), oracles.bicubic(g, target), atol=1e-12)

    def test_resize_close_to_opencv(self):
        cv2 = pytest.importorskip("cv2")
        g = np.random.default_rng(3).normal(size=(6, 5))
        ref = cv2.resize(g, (17, 13), interpolation=cv2.INTER_CUBIC)
        np.testing.assert_allclose(resize_bicubic(g, (13, 17)), ref, atol=1e-5)

    def test_normalize(self):
        out, degenerate = normalize_minmax([[0, 2], [4, 2]])
        np.testing.assert_array_equal(out, [[0, 0.5], [1, 0.5]])
        assert not degenerate
        out, degenerate = normalize_minmax(np.full((3, 3), 7.0))
        assert degenerate and not out.any()

    @given(arrays(np.float64, (4, 5), elements=st.floats(-1e6, 1e6, allow_nan=False)))
    def test_normalize_endpoints(self, g):
        out, degenerate = normalize_minmax(g)
        if g.max() > g.min():
            assert out.min() == 0.0 and out.max() == 1.0 and not degenerate


class TestGam:
    def test_hand_example(self):
        m = gam_layer_map([[[1, 2], [0, 3]]], [[[1, -1], [2, 0]]], (2, 2))
        np.testing.assert_array_equal(m.grid, [[1, 0], [0, 0]])
        assert not m.degenerate and m.method == "GAM"

    def test_negative_gradients_degenerate(self):
        m = gam_layer_map(np.ones((2, 3, 3)), -np.ones((2, 3, 3)), (6, 6))
        assert m.degenerate and not m.grid.any()

    def test_duplicate_channel(self):
        rng = np.random.default_rng(4)
        h, g = rng.uniform(size=(1, 3, 3)), rng.normal(size=(1, 3, 3))
        single = gam_layer_map(h, g, (5, 5))
        double = gam_layer_map(np.concatenate([h, h]), np.concatenate([g, g]), (5, 5))
        np.testing.assert_allclose(single.grid, double.grid, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            gam_layer_map(np.ones((2, 3, 3)), np.ones((2, 3, 4)), (4, 4))

    def test_aggregate(self):
        a = SaliencyMap(np.array([[1.0, 0.0]]))
        b = SaliencyMap(np.array([[0.0, 1.0]]))
        np.testing.assert_array_equal(gam_aggregate([a, b]).grid, [[0.5, 0.5]])
        np.testing.assert_array_equal(gam_aggregate([a]).grid, a.grid)
        np.testing.assert_array_equal(gam_aggregate([a, a]).grid, a.grid)
        assert gam_aggregate([a, b]).n_layers == 2
        with pytest.raises(EmptyInput):
            gam_aggregate([])

    @given(pairs)
    def test_matches_direct_oracle(self, hg):
        h, g = hg
        np.testing.assert_allclose(gam_layer_map(h, g, TARGET).grid, oracles.gam_layer(h, g, TARGET), atol=1e-9)

    @given(pairs, st.floats(-100, -1e-3), st.integers(0, 2**31))
    def test_negative_gradient_suppression(self, hg, value, seed):
        h, g = hg
        neg = g < 0
        g2 = g.copy()
        g2[neg] = value * np.random.default_rng(seed).uniform(0.1, 10, size=neg.sum())
        np.testing.assert_array_equal(gam_layer_map(h, g, TARGET).grid, gam_layer_map(h, g2, TARGET).grid)


class TestGradCam:
    def test_negative_pooled_gradient(self):
        h = np.abs(np.random.default_rng(5).normal(size=(1, 3, 3)))
        m, dec = grad_cam(h, -np.ones_like(h), (6, 6))
        assert dec.alpha[0] == -1.0
        assert m.degenerate and not m.grid.any()

    def test_unit_gradient(self):
        h = np.abs(np.random.default_rng(6).normal(size=(1, 3, 4)))
        m, _ = grad_cam(h, np.ones_like(h), (6, 8))
        expected, _ = normalize_minmax(resize_bicubic(h[0], (6, 8)))
        np.testing.assert_allclose(m.grid, expected, atol=1e-12)

    def test_masking_fixture(self):
        h = np.array([[[1.0, 0.0], [0.0, 0.0]]] * 2)
        g = np.stack([np.ones((2, 2)), -2 * np.ones((2, 2))])
        m, dec = grad_cam(h, g, (2, 2))
        np.testing.assert_array_equal(dec.A, -h[0])
        np.testing.assert_array_equal(dec.N, -2 * h[0])
        np.testing.assert_array_equal(dec.P, h[0])
        assert m.degenerate and m.grid[0, 0] == 0.0
        assert gam_layer_map(h, g, (2, 2)).grid[0, 0] > 0

    @given(pairs)
    def test_decomposition(self, hg):
        h, g = hg
        _, dec = grad_cam(h, g, TARGET)
        np.testing.assert_allclose(dec.A, dec.N + dec.P, atol=1e-9)
        assert np.all(grad_cam(np.abs(h), g, TARGET)[1].P >= 0)


class TestGradCamPP:
    def test_vanishing_third_order_term(self):
        h = np.array([[[1.0, -1.0], [2.0, -2.0]]])
        g = np.array([[[0.5, 2.0], [0.0, 3.0]]])
        beta = gcpp_beta(h, g)
        np.testing.assert_array_equal(beta, [[[0.5, 0.5], [0.0, 0.5]]])

    def test_zero_gradient(self):
        h = np.ones((2, 3, 3))
        m, coeffs, overflow = grad_campp(h, np.zeros_like(h), 1.0, (4, 4))
        assert not coeffs.beta.any() and m.degenerate and not overflow

    def test_overflow_flag(self):
        rng = np.random.default_rng(7)
        h, g = rng.uniform(size=(3, 4, 4)), rng.uniform(size=(3, 4, 4))
        m, _, overflow = grad_campp(h, g, 800.0, (8, 8))
        assert overflow and m.overflow
        assert np.all(np.isfinite(m.grid)) and m.grid.min() >= 0 and m.grid.max() <= 1
        assert not grad_campp(h, g, 700.0, (8, 8))[2]
        assert EXP_OVERFLOW == pytest.approx(709.78, abs=0.01)

    def test_beta_matches_uncancelled_derivatives(self):
        # s linear in h; differentiate exp(s) two and three times with autograd
        rng = np.random.default_rng(8)
        h = rng.uniform(0, 1, size=(2, 3, 3))
        w = rng.normal(size=(2, 3, 3))
        ht = torch.tensor(h, requires_grad=True)
        es = torch.exp((torch.tensor(w) * torch.relu(ht)).sum())
        (d1,) = torch.autograd.grad(es, ht, create_graph=True)
        g = w.copy()
        expected = np.zeros_like(h)
        for idx in np.ndindex(h.shape):
            (d2,) = torch.autograd.grad(d1[idx], ht, create_graph=True)
            (d3,) = torch.autograd.grad(d2[idx], ht, retain_graph=True)
            second, third = d2[idx].item(), d3[idx].item()
            denom = 2 * second + h[idx[0]].sum() * third
            expected[idx] = second / denom if denom != 0 else 0.0
        np.testing.assert_allclose(gcpp_beta(h, g), expected, rtol=1e-10)


class TestInvariants:
    @given(pairs, st.floats(0.01, 100))
    def test_positive_scale(self, hg, a):
        h, g = hg
        np.testing.assert_allclose(gam_layer_map(h, a * g, TARGET).grid, gam_layer_map(h, g, TARGET).grid, atol=1e-9)
        np.testing.assert_allclose(grad_cam(h, a * g, TARGET)[0].grid, grad_cam(h, g, TARGET)[0].grid, atol=1e-9)

    @settings(max_examples=50)
    @given(pairs, st.randoms(use_true_random=False))
    def test_channel_permutation(self, hg, rnd):
        h, g = hg
        perm = list(range(h.shape[0]))
        rnd.shuffle(perm)
        for fn in (
            lambda a, b: gam_layer_map(a, b, TARGET),
            lambda a, b: grad_cam(a, b, TARGET)[0],
            lambda a, b: grad_campp(a, b, 1.0, TARGET)[0],
        ):
            np.testing.assert_allclose(fn(h[perm], g[perm]).grid, fn(h, g).grid, atol=1e-9)

    @given(pairs, pairs)
    def test_range_and_aggregate_bounds(self, hg1, hg2):
        maps = [gam_layer_map(*hg1, TARGET), grad_cam(*hg2, TARGET)[0], grad_campp(*hg1, 3.0, TARGET)[0]]
        for m in maps:
            assert m.grid.min() >= 0 and m.grid.max() <= 1
            if not m.degenerate:
                assert m.grid.min() == 0 and m.grid.max() == 1
        agg = gam_aggregate(maps)
        stack = np.stack([m.grid for m in maps])
        assert np.all(agg.grid >= stack.min(axis=0) - 1e-12)
        assert np.all(agg.grid <= stack.max(axis=0) + 1e-12)


class TestExplain:
    def test_single_layer(self, toy, toy_image):
        spec = ScoreSpec.logit(1)
        cap = capture(toy, toy_image, spec, ["block2"])
        expected = gam_layer_map(cap.activations["block2"], cap.gradients["block2"], (8, 8))
        got = explain(toy, toy_image, spec, "gam", 1)
        np.testing.assert_array_equal(got.grid, expected.grid)
        assert got.score == pytest.approx(cap.score)

    def test_deterministic(self, toy, toy_image):
        spec = ScoreSpec.logit(0)
        for method in ("gam", "gc", "gcpp"):
            a, b = explain(toy, toy_image, spec, method, 2), explain(toy, toy_image, spec, method, 2)
            np.testing.assert_array_equal(a.grid, b.grid)

    def test_two_layers_compose(self, toy, toy_image):
        spec = ScoreSpec.logit(2)
        cap = capture(toy, toy_image, spec, toy.list_layers())
        hs = [a for _, a in cap.activations.entries]
        gs = [g for _, g in cap.gradients.entries]
        got = explain(toy, toy_image, spec, "gam", 2)
        np.testing.assert_allclose(got.grid, oracles.gam(hs, gs, (8, 8)), atol=1e-9)
        assert got.n_layers == 2

    def test_bad_n(self, toy, toy_image):
        with pytest.raises(ValueError):
            explain(toy, toy_image, ScoreSpec.logit(0), "gam", 3)
        with pytest.raises(ValueError):
            explain(toy, toy_image, ScoreSpec.logit(0), "lime", 1)
