import numpy as np
import pytest

from synthdetect import forensic as F
from synthdetect.tensor import Tensor

from oracles import npr_naive, sobel_naive


def _rand_img(h=8, w=8, seed=0, channels=3):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((1, channels, h, w)))


class TestNpr:
    def test_constant_image_gives_zero(self):
        img = Tensor(np.full((1, 3, 8, 8), 0.5))
        out = F.npr_extract(img)
        assert out.shape == (1, 9, 8, 8)
        assert np.abs(out.data).max() == 0.0

    def test_channel_count_for_l2(self):
        out = F.npr_extract(_rand_img(), F.NprConfig(l=2))
        assert out.shape[1] == 3 * (2 * 2 - 1)

    def test_single_grid_reference_convention(self):
        a, b, c, d = 1.0, 2.0, 4.0, 8.0
        img = Tensor(np.array([[[[a, b], [c, d]]]]))
        out = F.npr_extract(img, F.NprConfig(l=2))
        # channels carry (b-a, c-a, d-a), tiled over the grid footprint
        assert out.shape == (1, 3, 2, 2)
        np.testing.assert_array_equal(out.data[0, 0], np.full((2, 2), b - a))
        np.testing.assert_array_equal(out.data[0, 1], np.full((2, 2), c - a))
        np.testing.assert_array_equal(out.data[0, 2], np.full((2, 2), d - a))

    def test_nearest_neighbor_upsampled_image_is_exactly_zero(self):
        rng = np.random.default_rng(1)
        small = rng.random((1, 3, 4, 4))
        up = np.repeat(np.repeat(small, 2, axis=2), 2, axis=3)
        out = F.npr_extract(Tensor(up), F.NprConfig(l=2))
        assert np.abs(out.data).max() == 0.0

    @pytest.mark.parametrize("l", [2, 4])
    def test_matches_nested_loop_oracle(self, l):
        for seed in range(10):
            img = _rand_img(8, 8, seed=seed)
            out = F.npr_extract(img, F.NprConfig(l=l))
            ref = npr_naive(img.data, l)
            np.testing.assert_array_equal(out.data, ref)

    def test_shift_invariance_and_linear_scaling(self):
        img = _rand_img(seed=2)
        base = F.npr_extract(img).data
        shifted = F.npr_extract(Tensor(img.data + 0.37)).data
        np.testing.assert_allclose(shifted, base, atol=1e-15)
        scaled = F.npr_extract(Tensor(img.data * 3.0)).data
        np.testing.assert_allclose(scaled, base * 3.0, rtol=1e-12)

    def test_indivisible_dims_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            F.npr_extract(_rand_img(9, 8), F.NprConfig(l=2))

    def test_grid_too_small_rejected(self):
        with pytest.raises(ValueError, match=">= 2"):
            F.NprConfig(l=1)


class TestGradientExtract:
    def test_identity_linear_backbone_gives_ones(self):
        bb = F.FixedBackbone(seed=1)
        # single conv layer: one output channel summing an identity tap
        w = np.zeros((1, 3, 3, 3))
        w[0, 0, 1, 1] = 1.0
        w[0, 1, 1, 1] = 1.0
        w[0, 2, 1, 1] = 1.0
        bb.weights = [Tensor(w)]
        img = _rand_img(6, 6, seed=3)
        g = F.gradient_extract(img, bb)
        np.testing.assert_array_equal(g.data, np.ones((1, 3, 6, 6)))

    def test_matches_finite_difference_probe(self):
        bb = F.FixedBackbone(seed=1)
        img = _rand_img(8, 8, seed=4)
        g = F.gradient_extract(img, bb)
        rng = np.random.default_rng(5)
        h = 1e-5
        for _ in range(20):
            c = rng.integers(0, 3)
            i = rng.integers(0, 8)
            j = rng.integers(0, 8)
            xp = img.data.copy()
            xp[0, c, i, j] += h
            xm = img.data.copy()
            xm[0, c, i, j] -= h
            from synthdetect import tensor as T
            with T.no_grad():
                fp = bb.forward(Tensor(xp)).data.sum()
                fm = bb.forward(Tensor(xm)).data.sum()
            fd = (fp - fm) / (2 * h)
            ad = g.data[0, c, i, j]
            assert abs(ad - fd) / max(abs(ad), abs(fd), 1e-8) < 1e-3

    def test_deterministic_and_backbone_untouched(self):
        bb = F.FixedBackbone(seed=7)
        before = [w.data.copy() for w in bb.weights]
        img = _rand_img(8, 8, seed=6)
        g1 = F.gradient_extract(img, bb)
        g2 = F.gradient_extract(img, bb)
        np.testing.assert_array_equal(g1.data, g2.data)
        for w, snap in zip(bb.weights, before):
            np.testing.assert_array_equal(w.data, snap)
            assert w.grad is None

    def test_backbone_seeded_identically(self):
        a = F.FixedBackbone(seed=11)
        b = F.FixedBackbone(seed=11)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa.data, wb.data)


class TestSobel:
    def test_constant_is_zero(self):
        img = Tensor(np.full((1, 3, 8, 8), 0.3))
        out = F.sobel_gradient(img)
        assert out.shape == (1, 6, 8, 8)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-15)

    def test_vertical_step_edge(self):
        h = 0.5
        x = np.zeros((1, 1, 8, 8))
        x[:, :, :, 4:] = h
        out = F.sobel_gradient(Tensor(x))
        gx, gy = out.data[0, 0], out.data[0, 1]
        # horizontal kernel responds with 4*step on both edge columns
        np.testing.assert_allclose(gx[:, 3], 4 * h)
        np.testing.assert_allclose(gx[:, 4], 4 * h)
        np.testing.assert_allclose(gx[:, :3], 0.0, atol=1e-15)
        np.testing.assert_allclose(gy, 0.0, atol=1e-15)

    def test_horizontal_ramp_interior(self):
        s = 0.25
        ramp = s * np.arange(8)[None, :] * np.ones((8, 1))
        out = F.sobel_gradient(Tensor(ramp[None, None]))
        np.testing.assert_allclose(out.data[0, 0][:, 1:-1], 8 * s,
                                   rtol=1e-12)

    def test_matches_loop_oracle(self):
        img = _rand_img(8, 8, seed=8)
        out = F.sobel_gradient(img)
        ref = sobel_naive(img.data)
        np.testing.assert_array_equal(out.data, ref)
