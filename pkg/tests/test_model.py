import numpy as np
import pytest

from synthdetect import model as M
from synthdetect import tensor as T
from synthdetect.image_io import ImageU8

from gradcheck import fd_gradcheck  # noqa: F401  (kept for parity with suite)


def small_config(**kw):
    base = dict(image_size=16, head_channels=(6, 8), attn_dk=8, attn_dv=4,
                attn_heads=2, embed_dim=32, n_fadc_blocks=2, bands=2)
    base.update(kw)
    return M.DetectorConfig(**base)


def _batch(det, n=2, seed=0):
    rng = np.random.default_rng(seed)
    s = det.config.image_size
    x = rng.random((n, 3, s, s))
    phis = None
    if det.config.use_semantic:
        v = rng.standard_normal((n, det.config.embed_dim))
        phis = v / np.linalg.norm(v, axis=1, keepdims=True)
    return x, phis


class TestBuild:
    def test_deterministic_init(self):
        a = M.build(small_config(), seed=5)
        b = M.build(small_config(), seed=5)
        assert a.census() == b.census()
        for n in a.params:
            np.testing.assert_array_equal(a.params[n].data,
                                          b.params[n].data)

    def test_different_seeds_differ(self):
        a = M.build(small_config(), seed=1)
        b = M.build(small_config(), seed=2)
        assert not np.array_equal(a.params["fc/w"].data,
                                  b.params["fc/w"].data)

    def test_all_branches_off_rejected(self):
        with pytest.raises(M.InvalidConfig, match="at least one"):
            M.build(small_config(use_npr=False, use_grad=False,
                                 use_semantic=False), seed=1)

    def test_parameter_count_matches_hand_tally(self):
        cfg = M.DetectorConfig()  # default desk configuration
        det = M.build(cfg, seed=1)
        cf = 9 + 3 + cfg.attn_dv
        assert cfg.fused_channels == cf
        attn = (cfg.embed_dim * cfg.attn_dk + 12 * cfg.attn_dk
                + 12 * cfg.attn_dv)
        approx = 2 * (cf * cf * 9 + cf)
        per_block = (cf * cf * 9 + cf * 9 + cf + cf + 1
                     + cfg.bands * cf + cfg.bands)
        fadc = cfg.n_fadc_blocks * per_block
        sattn = 2 * 49 + 1
        c1, c2 = cfg.head_channels
        head1 = c1 * cf * 9 + 3 * c1
        head2 = c2 * c1 * 9 + 3 * c2
        fc = c2 + 1
        expected = attn + approx + fadc + sattn + head1 + head2 + fc
        assert det.n_parameters(trainable_only=True) == expected
        # frozen backbone tensors are stored but not trainable
        frozen = det.n_parameters(trainable_only=False) - expected
        assert frozen == 8 * 3 * 9 + 16 * 8 * 9 + 16 * 16 * 9 + 16 * 16 * 9

    def test_ablation_removes_exactly_that_branch(self):
        full = set(M.build(small_config(), seed=1).census())
        no_sem = set(M.build(small_config(use_semantic=False),
                             seed=1).census())
        assert full - no_sem == {"attn/w_q", "attn/w_k", "attn/w_v"}
        no_grad = set(M.build(small_config(use_grad=False), seed=1).census())
        assert full - no_grad == {f"fixed_backbone/conv{i}_w"
                                  for i in range(4)}
        no_npr = set(M.build(small_config(use_npr=False), seed=1).census())
        assert full - no_npr == set()  # the NPR branch has no parameters


class TestForward:
    def test_scalar_logit_and_determinism(self):
        det = M.build(small_config(), seed=3)
        x, phis = _batch(det, n=1, seed=1)
        with T.no_grad():
            a = det.forward_batch(x, phis)
            b = det.forward_batch(x, phis)
        assert a.shape == (1,)
        np.testing.assert_array_equal(a.data, b.data)
        assert np.isfinite(a.data).all()

    def test_missing_embedding_rejected(self):
        det = M.build(small_config(), seed=3)
        x, _ = _batch(det, n=1)
        with pytest.raises(ValueError, match="missing embedding"):
            det.forward_batch(x, None)

    def test_wrong_size_rejected(self):
        det = M.build(small_config(), seed=3)
        with pytest.raises(ValueError, match="does not match"):
            det.forward_batch(np.zeros((1, 3, 32, 32)), None)

    def test_each_branch_is_live(self):
        x, _ = _batch(M.build(small_config(), seed=4), n=1, seed=2)
        logits = {}
        for name, kw in [("full", {}), ("no_npr", {"use_npr": False}),
                         ("no_grad", {"use_grad": False}),
                         ("no_sem", {"use_semantic": False})]:
            det = M.build(small_config(**kw), seed=4)
            _, phis = _batch(det, n=1, seed=2)
            with T.no_grad():
                logits[name] = float(det.forward_batch(x, phis).data[0])
        assert len({round(v, 9) for v in logits.values()}) == 4

    def test_forward_scalar_api_with_image(self):
        det = M.build(small_config(), seed=5)
        rng = np.random.default_rng(3)
        img = ImageU8(20, 20, rng.integers(0, 256, (20, 20, 3),
                                           dtype=np.uint8))
        a = det.forward(img)
        b = det.forward(img)
        assert a == b and np.isfinite(a)

    def test_train_mode_updates_bn_buffers(self):
        det = M.build(small_config(), seed=6)
        x, phis = _batch(det, n=4, seed=4)
        before = det.buffers["head1/bn_mean"].copy()
        det.forward_batch(x, phis, training=True, dropout_seed=1)
        assert not np.array_equal(before, det.buffers["head1/bn_mean"])


class TestEndToEndGradient:
    def test_logit_gradient_matches_finite_differences(self):
        det = M.build(small_config(), seed=7)
        x, phis = _batch(det, n=1, seed=5)
        feats = det.extract_local_features(x)
        probes = ["attn/w_q", "fadc0/w", "fadc1/pred_w", "head2/w", "fc/w",
                  "sattn/w", "approx/conv1_w"]
        out = det.forward_from_features(feats, phis)
        T.backward(out)
        h = 1e-5
        rng = np.random.default_rng(6)
        for name in probes:
            p = det.params[name]
            assert p.grad is not None, name
            flat = p.data.ravel()
            idx = int(rng.integers(0, flat.size))
            orig = flat[idx]
            with T.no_grad():
                flat[idx] = orig + h
                fp = float(det.forward_from_features(feats, phis).data[0])
                flat[idx] = orig - h
                fm = float(det.forward_from_features(feats, phis).data[0])
                flat[idx] = orig
            fd = (fp - fm) / (2 * h)
            ad = p.grad.ravel()[idx]
            denom = max(abs(ad), abs(fd), 1e-6)
            assert abs(ad - fd) / denom < 1e-3, \
                f"{name}: autodiff {ad:.8g} vs fd {fd:.8g}"


class TestWeightsFile:
    def test_roundtrip_bit_exact(self, tmp_path):
        det = M.build(small_config(), seed=8)
        x, phis = _batch(det, n=1, seed=7)
        with T.no_grad():
            before = det.forward_batch(x, phis).data.copy()
        p = tmp_path / "w.fwts"
        M.save_weights(det, p)
        # load into a model built from a different seed
        other = M.build(small_config(), seed=99)
        M.load_weights(other, p)
        for n in det.params:
            np.testing.assert_array_equal(det.params[n].data,
                                          other.params[n].data)
        with T.no_grad():
            after = other.forward_batch(x, phis).data
        np.testing.assert_array_equal(before, after)

    def test_golden_fixture_bytes(self, tmp_path):
        import struct
        blob = b"FWTS" + struct.pack("<II", 1, 1)
        name = b"layer/w"
        blob += struct.pack("<I", len(name)) + name
        blob += struct.pack("<I", 2) + struct.pack("<2I", 2, 3)
        vals = [1.0, 2.0, 3.0, 4.0, 5.0, 6.5]
        blob += struct.pack("<6d", *vals)
        p = tmp_path / "g.fwts"
        p.write_bytes(blob)
        loaded = M.read_weights_file(p)
        np.testing.assert_array_equal(loaded["layer/w"],
                                      np.array(vals).reshape(2, 3))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.fwts"
        p.write_bytes(b"XWTS" + bytes(8))
        with pytest.raises(M.WeightsFormatError, match="magic"):
            M.read_weights_file(p)

    def test_census_mismatch_names_offender(self, tmp_path):
        det = M.build(small_config(), seed=9)
        p = tmp_path / "w.fwts"
        M.save_weights(det, p)
        other = M.build(small_config(use_semantic=False), seed=9)
        with pytest.raises(M.WeightsFormatError, match="attn/w_q"):
            M.load_weights(other, p)

    def test_shape_mismatch_names_offender(self, tmp_path):
        det = M.build(small_config(), seed=10)
        p = tmp_path / "w.fwts"
        M.save_weights(det, p)
        other = M.build(small_config(head_channels=(6, 10)), seed=10)
        with pytest.raises(M.WeightsFormatError, match="head2/w"):
            M.load_weights(other, p)

    def test_truncated_payload(self, tmp_path):
        det = M.build(small_config(), seed=11)
        p = tmp_path / "w.fwts"
        M.save_weights(det, p)
        data = p.read_bytes()
        p.write_bytes(data[:-4])
        with pytest.raises(M.WeightsFormatError, match="truncated|trailing"):
            M.read_weights_file(p)
