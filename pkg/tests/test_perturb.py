import numpy as np
import pytest

from synthdetect import model as M
from synthdetect import perturb as P
from synthdetect import training as TR
from synthdetect.image_io import ImageU8

from oracles import dct2_8x8_naive
from test_training import _toy_sets, tiny_config


def _img(h=16, w=16, seed=0):
    rng = np.random.default_rng(seed)
    return ImageU8(w, h, rng.integers(0, 256, (h, w, 3), dtype=np.uint8))


def _const(value, h=16, w=16):
    return ImageU8(w, h, np.full((h, w, 3), value, dtype=np.uint8))


def _psnr(a, b):
    mse = np.mean((a.pixels.astype(float) - b.pixels.astype(float)) ** 2)
    return np.inf if mse == 0 else 10 * np.log10(255.0 ** 2 / mse)


class TestJpeg:
    def test_dct_matches_textbook_oracle(self):
        rng = np.random.default_rng(1)
        block = rng.uniform(-128, 127, (8, 8))
        got = P.dct2_8x8(block)
        ref = dct2_8x8_naive(block)
        assert np.abs(got - ref).max() < 1e-10
        back = P.idct2_8x8(got)
        assert np.abs(back - block).max() < 1e-10

    def test_impulse_block_coefficients(self):
        block = np.zeros((8, 8))
        block[0, 0] = 1.0
        got = P.dct2_8x8(block)
        ref = dct2_8x8_naive(block)
        assert np.abs(got - ref).max() < 1e-10

    def test_quality_scaling_formula(self):
        # q=50 keeps the tables; q=100 collapses them to all ones
        np.testing.assert_array_equal(
            P.scaled_quant_table(P.LUMA_TABLE, 50), P.LUMA_TABLE)
        np.testing.assert_array_equal(
            P.scaled_quant_table(P.LUMA_TABLE, 100), np.ones((8, 8)))
        q10 = P.scaled_quant_table(P.LUMA_TABLE, 10)
        assert q10.max() <= 255 and q10.min() >= 1
        assert q10[0, 0] == np.floor((16 * 500 + 50) / 100)

    def test_q100_near_lossless_on_smooth_gradient(self):
        i = np.arange(32)
        grad = (i[:, None] * 4 + i[None, :] * 3).astype(np.uint8)
        img = ImageU8(32, 32, np.stack([grad] * 3, axis=-1))
        out = P.jpeg_like(img, 100)
        assert _psnr(img, out) > 40.0

    def test_mid_gray_constant_exact_at_any_quality(self):
        for q in (1, 10, 50, 90, 100):
            img = _const(128)
            out = P.jpeg_like(img, q)
            assert out == img, q

    def test_any_constant_exact_at_q100(self):
        for v in (0, 3, 77, 129, 255):
            img = _const(v)
            out = P.jpeg_like(img, 100)
            assert out == img, v

    def test_constant_dc_quantization_shift_bounded(self):
        # non-128 constants can shift by DC quantization at low quality
        img = _const(129)
        out = P.jpeg_like(img, 50)
        diff = np.abs(out.pixels.astype(int) - img.pixels.astype(int))
        assert diff.max() <= 2
        assert (out.pixels == out.pixels[0, 0]).all()  # stays constant

    def test_q100_bounded_error_on_random_images(self):
        for seed in range(5):
            img = _img(24, 40, seed=seed)
            out = P.jpeg_like(img, 100)
            diff = np.abs(out.pixels.astype(int) - img.pixels.astype(int))
            assert diff.max() <= 25

    def test_quality_out_of_range(self):
        with pytest.raises(ValueError, match="quality"):
            P.jpeg_like(_img(), 0)
        with pytest.raises(ValueError, match="quality"):
            P.jpeg_like(_img(), 101)

    def test_non_multiple_of_8_dims(self):
        img = _img(19, 13, seed=3)
        out = P.jpeg_like(img, 80)
        assert (out.height, out.width) == (19, 13)

    def test_deterministic(self):
        img = _img(seed=4)
        assert P.jpeg_like(img, 75) == P.jpeg_like(img, 75)


class TestBlur:
    def test_sigma_zero_identity(self):
        img = _img(seed=5)
        out = P.gaussian_blur(img, 0.0)
        assert out == img

    def test_constant_unchanged(self):
        img = _const(93)
        assert P.gaussian_blur(img, 2.5) == img

    def test_impulse_center_weight(self):
        h = w = 17
        px = np.zeros((h, w, 3), dtype=np.uint8)
        px[8, 8] = 255
        out = P.gaussian_blur(ImageU8(w, h, px), 1.0)
        radius = 3
        xs = np.arange(-radius, radius + 1)
        k = np.exp(-0.5 * xs ** 2)
        k /= k.sum()
        expected = round(255 * k[radius] ** 2)
        assert abs(int(out.pixels[8, 8, 0]) - expected) <= 1

    def test_mean_preserved_within_rounding(self):
        img = _img(32, 32, seed=6)
        out = P.gaussian_blur(img, 2.0)
        assert abs(out.pixels.mean() - img.pixels.mean()) < 1.0

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError, match="sigma"):
            P.gaussian_blur(_img(), -1.0)


class TestNoise:
    def test_sigma_zero_identity(self):
        img = _img(seed=7)
        assert P.gaussian_noise(img, 0.0, seed=1) == img

    def test_same_seed_identical(self):
        img = _img(seed=8)
        a = P.gaussian_noise(img, 5.0, seed=42)
        b = P.gaussian_noise(img, 5.0, seed=42)
        assert a == b
        c = P.gaussian_noise(img, 5.0, seed=43)
        assert c != a

    def test_empirical_std_matches_sigma(self):
        img = _const(128, 256, 256)
        out = P.gaussian_noise(img, 10.0, seed=3)
        resid = out.pixels.astype(float) - 128.0
        assert abs(resid.std() - 10.0) / 10.0 < 0.03
        assert abs(resid.mean()) < 0.2

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError, match="sigma"):
            P.gaussian_noise(_img(), -0.5, seed=1)


class TestSpecs:
    def test_parse(self):
        specs = P.parse_specs("jpeg:80, blur:1.5,noise:3")
        assert [(s.kind, s.level) for s in specs] == [
            ("jpeg", 80.0), ("blur", 1.5), ("noise", 3.0)]

    def test_parse_rejects_garbage(self):
        with pytest.raises(ValueError, match="kind:level"):
            P.parse_specs("blur=2")
        with pytest.raises(ValueError, match="unknown perturbation"):
            P.parse_specs("warp:2")


class TestSweep:
    def _trained(self):
        det = M.build(tiny_config(), seed=9)
        data = _toy_sets(det, n=16, seed=60)
        tcfg = TR.TrainConfig(lr=2e-3, batch=4, epochs=2, warmup_iters=1,
                              seed=1)
        TR.train_on_features(det, data, data, tcfg, TR.FocalLossConfig())
        return det

    def _images(self, det, n=10, seed=70):
        from synthdetect import toydata
        images, labels = [], []
        for i in range(n // 2):
            images.append(toydata.make_real(seed + i,
                                            det.config.image_size))
            labels.append(0)
            images.append(toydata.make_fake(seed + 500 + i,
                                            det.config.image_size,
                                            "nearest"))
            labels.append(1)
        return images, labels

    def test_identity_row_equals_eval_report(self):
        det = self._trained()
        images, labels = self._images(det)
        data = TR.prepare_split(det, images, labels)
        thr = 0.5
        ref_acc, ref_ap = P.evaluate_split(det, data, thr)
        report = P.robustness_sweep(det, images, labels,
                                    [P.PerturbSpec("blur", 0.0)], thr)
        assert report.rows[0] == ("blur", 0.0, ref_acc, ref_ap)

    def test_row_count_and_order(self):
        det = self._trained()
        images, labels = self._images(det, n=6)
        specs = [P.PerturbSpec("noise", 2.0, seed=5),
                 P.PerturbSpec("blur", 1.0),
                 P.PerturbSpec("noise", 1.0, seed=5)]
        report = P.robustness_sweep(det, images, labels, specs, 0.5)
        assert [(r[0], r[1]) for r in report.rows] == [
            ("blur", 1.0), ("noise", 1.0), ("noise", 2.0)]

    def test_sweep_bit_reproducible(self):
        det = self._trained()
        images, labels = self._images(det, n=8)
        specs = P.parse_specs("blur:1,noise:2", seed=11)
        a = P.report_csv(P.robustness_sweep(det, images, labels, specs,
                                            0.5))
        b = P.report_csv(P.robustness_sweep(det, images, labels, specs,
                                            0.5))
        assert a == b
        assert a.startswith("kind,level,acc,ap\n")

    def test_empty_test_split_rejected(self):
        det = self._trained()
        with pytest.raises(ValueError, match="empty"):
            P.robustness_sweep(det, [], [], [P.PerturbSpec("blur", 1.0)],
                               0.5)
