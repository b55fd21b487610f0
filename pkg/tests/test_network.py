import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stylerank._checksum import ChecksumError, FormatError
from stylerank.network import NetworkModel, fingerprint, load_checkpoint, save_checkpoint
from stylerank.network import checkpoint as ckpt
from stylerank.network import layers as L
from stylerank.network.model import ArchitectureError, LayerSpec, conv, dense, minibn_body
from oracles import conv2d_loops, numeric_gradient, relative_error, softmax_direct


class TestReluSoftmaxCE:
    def test_relu_values(self):
        assert L.relu(np.float64(-1.5)) == 0.0
        assert L.relu(np.float64(2.0)) == 2.0
        assert L.relu(np.float64(0.0)) == 0.0

    def test_softmax_uniform(self):
        np.testing.assert_allclose(L.softmax(np.zeros(3)), [1 / 3] * 3, atol=1e-15)

    def test_softmax_stability(self):
        p = L.softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(p))
        assert abs(p[0] - 1.0) < 1e-12 and abs(p[1]) < 1e-12

    def test_softmax_direct_formula(self):
        np.testing.assert_allclose(L.softmax(np.array([1.0, 2.0, 3.0])), softmax_direct([1, 2, 3]), rtol=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-500, 500), min_size=1, max_size=12))
    def test_softmax_rows_sum_to_one_and_positive(self, z):
        p = L.softmax(np.array([z, [v * 0.5 for v in z]]))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(p >= 0)

    def test_softmax_strictly_positive_moderate_logits(self):
        p = L.softmax(np.random.default_rng(0).normal(0, 20, (50, 9)))
        assert np.all(p > 0)

    def test_cross_entropy_values(self):
        assert L.cross_entropy(np.eye(3), [0, 1, 2]) == 0.0
        assert L.cross_entropy(np.full((4, 9), 1 / 9), [0, 3, 5, 8]) == pytest.approx(math.log(9), abs=1e-12)
        assert L.cross_entropy(np.array([[0.7, 0.2, 0.1]]), [0]) == pytest.approx(-math.log(0.7), abs=1e-12)
        assert round(-math.log(0.7), 4) == 0.3567 and round(math.log(9), 4) == 2.1972

    def test_cross_entropy_floor(self):
        assert L.cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))

    def test_cross_entropy_shape_errors(self):
        with pytest.raises(ValueError):
            L.cross_entropy(np.eye(3), [0, 1])
        with pytest.raises(ValueError):
            L.cross_entropy(np.eye(3), [0, 1, 3])


class TestConv:
    def test_pointwise_identity(self):
        x = np.random.default_rng(0).random((2, 5, 5, 3))
        w = np.ones((1, 1, 3, 1))
        out, _ = L.conv2d_forward(x, w)
        np.testing.assert_allclose(out[..., 0], x.sum(axis=-1), rtol=1e-15)

    def test_ones_kernel_on_constant(self):
        x = np.full((1, 6, 6, 2), 0.25)
        out, _ = L.conv2d_forward(x, np.ones((3, 3, 2, 1)))
        assert out.shape == (1, 4, 4, 1)
        np.testing.assert_allclose(out, 9 * 0.25 * 2)

    @pytest.mark.parametrize("h,w,k,stride,padding", [(5, 5, 3, 1, 0), (7, 6, 3, 2, 1), (16, 16, 3, 1, 1),
                                                      (9, 11, 5, 2, 2), (4, 4, 1, 1, 0)])
    def test_matches_loops_exactly_on_integers(self, h, w, k, stride, padding):
        rng = np.random.default_rng(h * w + k)
        x = rng.integers(-4, 5, (2, h, w, 3)).astype(np.float64)
        wt = rng.integers(-3, 4, (k, k, 3, 4)).astype(np.float64)
        b = rng.integers(-2, 3, 4).astype(np.float64)
        out, _ = L.conv2d_forward(x, wt, b, stride, padding)
        np.testing.assert_array_equal(out, conv2d_loops(x, wt, b, stride, padding))

    def test_matches_loops_on_random_floats(self):
        rng = np.random.default_rng(1)
        x = rng.random((1, 5, 5, 2))
        wt = rng.normal(size=(3, 3, 2, 3))
        out, _ = L.conv2d_forward(x, wt)
        np.testing.assert_allclose(out, conv2d_loops(x, wt), rtol=1e-13, atol=1e-13)

    def test_output_size_formula(self):
        assert L.conv_output_size(64, 3, 1, 1) == 64
        assert L.conv_output_size(7, 3, 2, 0) == 3

    def test_incompatible_shapes(self):
        with pytest.raises(ValueError):
            L.conv2d_forward(np.zeros((1, 4, 4, 3)), np.zeros((3, 3, 2, 1)))
        with pytest.raises(ValueError):
            L.conv2d_forward(np.zeros((1, 2, 2, 1)), np.zeros((3, 3, 1, 1)))


class TestBatchNorm:
    def test_train_normalizes(self):
        x = np.random.default_rng(0).normal(3, 5, (8, 4, 4, 6))
        out, _, _, _ = L.batchnorm_forward_train(x, np.ones(6), np.zeros(6), 1e-5)
        assert np.max(np.abs(out.mean(axis=(0, 1, 2)))) < 1e-5
        assert np.max(np.abs(out.var(axis=(0, 1, 2)) - 1)) < 1e-4

    def test_affine(self):
        x = np.random.default_rng(1).normal(0, 1, (16, 5))
        out, _, _, _ = L.batchnorm_forward_train(x, np.full(5, 2.0), np.full(5, 3.0), 1e-5)
        np.testing.assert_allclose(out.mean(axis=0), 3.0, atol=1e-5)
        np.testing.assert_allclose(out.std(axis=0), 2.0, atol=1e-4)

    def test_infer_with_batch_stats_matches_train(self):
        x = np.random.default_rng(2).normal(1, 2, (6, 3, 3, 4))
        g, b = np.array([1.0, 0.5, 2.0, 1.5]), np.array([0.0, 1.0, -1.0, 0.2])
        train_out, _, mean, var = L.batchnorm_forward_train(x, g, b, 1e-5)
        infer_out = L.batchnorm_forward_infer(x, g, b, mean, var, 1e-5)
        np.testing.assert_allclose(infer_out, train_out, atol=1e-5)

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError):
            L.batchnorm_forward_train(np.zeros((1, 2, 2, 3)), np.ones(3), np.zeros(3), 1e-5)

    def test_running_stats_ema(self):
        m = NetworkModel(minibn_body(4, (2,)), 2, (4, 4, 3), seed=0, dtype=np.float64)
        x = np.random.default_rng(3).random((5, 4, 4, 3))
        conv_out, _ = L.conv2d_forward(x, m.params["body.0.weight"], None, 1, 1)
        mean, var = conv_out.mean(axis=(0, 1, 2)), conv_out.var(axis=(0, 1, 2))
        m.forward(x, "train")
        np.testing.assert_allclose(m.state["body.1.running_mean"], 0.9 * 0 + 0.1 * mean, rtol=1e-12)
        np.testing.assert_allclose(m.state["body.1.running_var"], 0.9 * 1 + 0.1 * var, rtol=1e-12)
        assert np.all(m.state["body.1.running_var"] >= 0)


def _check_layer_grad(forward, inputs, h=1e-6):
    """Gradient of sum(out * r) for a random projection r, analytic vs numeric."""
    out, backward = forward()
    r = np.random.default_rng(0).normal(size=out.shape)
    analytic = backward(r)

    def f():
        return float(np.sum(forward()[0] * r))

    for name, arr in inputs.items():
        num = numeric_gradient(f, arr, h)
        assert relative_error(analytic[name], num) < 1e-6, name


class TestLayerGradients:
    def test_conv(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)

        def fwd():
            out, cache = L.conv2d_forward(x, w, b, 2, 1)
            return out, lambda d: dict(zip("xwb", L.conv2d_backward(d, cache)))

        _check_layer_grad(fwd, {"x": x, "w": w, "b": b})

    def test_batchnorm(self):
        rng = np.random.default_rng(1)
        x, g, b = rng.normal(size=(4, 3, 3, 2)), rng.normal(size=2), rng.normal(size=2)

        def fwd():
            out, cache, _, _ = L.batchnorm_forward_train(x, g, b, 1e-5)
            return out, lambda d: dict(zip("xgb", L.batchnorm_backward(d, cache)))

        _check_layer_grad(fwd, {"x": x, "g": g, "b": b})

    def test_maxpool_dense_gap(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 4, 4, 3))

        def fwd_pool():
            out, cache = L.maxpool_forward(x, 2, 2)
            return out, lambda d: {"x": L.maxpool_backward(d, cache)}

        _check_layer_grad(fwd_pool, {"x": x})

        def fwd_gap():
            out, shape = L.globalavgpool_forward(x)
            return out, lambda d: {"x": L.globalavgpool_backward(d, shape)}

        _check_layer_grad(fwd_gap, {"x": x})

        xd, w, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 2)), rng.normal(size=2)

        def fwd_dense():
            out, cache = L.dense_forward(xd, w, b)
            return out, lambda d: dict(zip("xwb", L.dense_backward(d, cache)))

        _check_layer_grad(fwd_dense, {"x": xd, "w": w, "b": b})

    def test_maxpool_tie_goes_to_first(self):
        x = np.ones((1, 2, 2, 1))
        out, cache = L.maxpool_forward(x, 2, 2)
        dx = L.maxpool_backward(np.ones_like(out), cache)
        assert dx[0, 0, 0, 0] == 1.0 and dx.sum() == 1.0


def tiny_model(num_classes=3, seed=3, dtype=np.float64):
    return NetworkModel.from_profile("minibn", num_classes, input_shape=(8, 8, 3), seed=seed, dtype=dtype)


class TestModel:
    def test_feature_dims(self):
        assert NetworkModel.from_profile("minibn", 4).feature_dim == 64
        assert NetworkModel.from_profile("wide-1024", 4, input_shape=(16, 16, 3)).feature_dim == 1024

    def test_weight_count_matches_specs(self):
        m = NetworkModel.from_profile("minibn", 5)
        expected = 0
        cin = 3
        for spec in m.body:
            if spec.kind == "conv":
                expected += 9 * cin * spec.params["out_channels"]
                cin = spec.params["out_channels"]
            elif spec.kind == "batchnorm":
                expected += 4 * cin
        expected += 64 * 5 + 5
        assert m.num_weights() == expected

    def test_forward_shapes_and_probs(self):
        m = tiny_model()
        x = np.random.default_rng(0).random((4, 8, 8, 3))
        feats, probs = m.forward(x, "infer")
        assert feats.shape == (4, 64) and probs.shape == (4, 3)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_infer_deterministic(self):
        m = tiny_model(dtype=np.float32)
        x = np.random.default_rng(0).random((3, 8, 8, 3)).astype(np.float32)
        a, b = m.forward(x), m.forward(x)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    def test_extract_equals_forward_features(self):
        m = tiny_model(dtype=np.float32)
        x = np.random.default_rng(1).random((3, 8, 8, 3)).astype(np.float32)
        assert m.extract_features(x).tobytes() == m.forward(x, "infer")[0].tobytes()

    def test_extract_invariant_to_head(self):
        m = tiny_model(dtype=np.float32)
        x = np.random.default_rng(2).random((3, 8, 8, 3)).astype(np.float32)
        before = m.extract_features(x).tobytes()
        m.params["head.weight"] += 10.0
        m.params["head.bias"] -= 3.0
        assert m.extract_features(x).tobytes() == before

    def test_shape_mismatch(self):
        with pytest.raises(ArchitectureError):
            tiny_model().forward(np.zeros((2, 9, 8, 3)))

    def test_softmax_only_last(self):
        with pytest.raises(ArchitectureError):
            NetworkModel([conv(4), LayerSpec("softmax")], 2, (4, 4, 3))

    def test_body_must_be_flat(self):
        with pytest.raises(ArchitectureError):
            NetworkModel([conv(4)], 2, (4, 4, 3))

    def test_invalid_layer_params(self):
        with pytest.raises(ArchitectureError):
            conv(0)
        with pytest.raises(ArchitectureError):
            dense(0)
        with pytest.raises(ArchitectureError):
            LayerSpec("batchnorm", {"epsilon": 0})

    def test_lambda_term_exact(self):
        m = tiny_model()
        x = np.random.default_rng(3).random((4, 8, 8, 3))
        y = np.array([0, 1, 2, 0])
        l0, _ = m.backward(x, y, 0.0, update_stats=False)
        l1, _ = m.backward(x, y, 0.01, update_stats=False)
        assert l1 - l0 == pytest.approx(0.01 * m.l2_norm_sq(), rel=1e-12)

    def test_l2_excludes_batchnorm(self):
        m = tiny_model()
        keys = m.regularized_keys()
        assert "head.bias" in keys and "body.0.weight" in keys
        assert not any(k.endswith(("gamma", "beta")) for k in keys)

    def test_duplicated_batch_same_loss_and_grads(self):
        m = tiny_model()
        x = np.random.default_rng(4).random((3, 8, 8, 3))
        y = np.array([0, 1, 2])
        l1, g1 = m.backward(x, y, 0.001, update_stats=False)
        l2, g2 = m.backward(np.concatenate([x, x]), np.concatenate([y, y]), 0.001, update_stats=False)
        assert l2 == pytest.approx(l1, rel=1e-12)
        for k in g1:
            np.testing.assert_allclose(g2[k], g1[k], rtol=1e-9, atol=1e-12)

    def test_full_model_gradient_small(self):
        # quick two-tensor spot check; the exhaustive check lives in the acceptance suite
        m = tiny_model()
        rng = np.random.default_rng(5)
        x, y = rng.random((4, 8, 8, 3)), rng.integers(0, 3, 4)
        _, grads = m.backward(x, y, 1e-3, update_stats=False)
        for key in ("head.weight", "body.13.gamma"):
            num = numeric_gradient(lambda: m.loss(x, y, 1e-3), m.params[key], 1e-5)
            assert relative_error(grads[key], num) < 1e-4


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        m = NetworkModel.from_profile("minibn", 4, class_names=list("abcd"), seed=5)
        # exercise non-default running statistics
        m.forward(np.random.default_rng(0).random((4, 64, 64, 3)).astype(np.float32), "train")
        m.provenance = {"task": "shape", "note": [1, 2]}
        fp = save_checkpoint(m, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert ckpt.to_bytes(back) == (tmp_path / "m.ckpt").read_bytes()
        assert fingerprint(back) == fp
        assert back.class_names == m.class_names
        assert back.provenance == m.provenance
        for k in m.params:
            assert back.params[k].tobytes() == m.params[k].tobytes()
        for k in m.state:
            assert back.state[k].tobytes() == m.state[k].tobytes()

    def test_header(self):
        m = tiny_model(dtype=np.float32)
        data = ckpt.to_bytes(m)
        assert data[:4] == b"NNW1"
        assert int.from_bytes(data[4:12], "little") == m.num_weights()

    def test_fingerprints_distinguish_models(self):
        a, b = tiny_model(seed=1, dtype=np.float32), tiny_model(seed=2, dtype=np.float32)
        assert fingerprint(a) != fingerprint(b)
        assert fingerprint(a) == fingerprint(a.copy())

    def test_corruption_rejected(self, tmp_path):
        data = bytearray(ckpt.to_bytes(tiny_model(dtype=np.float32)))
        data[40] ^= 0x01
        with pytest.raises(ChecksumError):
            ckpt.from_bytes(bytes(data))

    def test_bad_magic_and_truncation(self):
        data = ckpt.to_bytes(tiny_model(dtype=np.float32))
        with pytest.raises(FormatError):
            ckpt.from_bytes(b"XXXX" + data[4:])
        with pytest.raises((FormatError, ChecksumError)):
            ckpt.from_bytes(data[:100])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "none.ckpt")
