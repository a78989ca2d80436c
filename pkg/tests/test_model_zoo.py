import importlib.util
import math

import numpy as np
import pytest

from asdscreen.errors import ConfigError, DomainError, MissingWeightsError, ShapeError
from asdscreen.model_zoo import (
    BackboneSpec,
    HeadConfig,
    StubExtractor,
    backbone_spec,
    build_classifier,
    checkpoint_bytes,
    expected_weights_file,
    extract_features,
    forward,
    gradients,
    head_logits,
    head_loss_and_grads,
    load_checkpoint,
    save_checkpoint,
)
from asdscreen.trainer import bce_loss


def small_classifier(seed, channels=8, hidden=16, side=14, frozen=True):
    spec = backbone_spec("stub", input_side=side, feature_channels=channels, frozen=frozen)
    extractor = StubExtractor(side, channels, seed=seed + 1000)
    return build_classifier(spec, HeadConfig(hidden_units=hidden), seed=seed, extractor=extractor)


def batch_and_labels(seed, n=6, side=14):
    rng = np.random.default_rng(seed)
    return rng.random((n, side, side, 3)), np.arange(n) % 2


def rel_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


class TestBuild:
    def test_stub_head_parameter_count(self):
        clf = build_classifier(backbone_spec("stub", feature_channels=64))
        assert clf.head_parameter_count() == 64 * 512 + 512 + 512 + 1 == 33_793

    def test_pretrained_input_sides(self):
        assert backbone_spec("xception").input_side == 299
        for name in ("vgg19", "resnet50v2", "mobilenetv2", "efficientnetb0"):
            assert backbone_spec(name).input_side == 224
        with pytest.raises(ConfigError):
            BackboneSpec("xception", 224, 2048)

    def test_unknown_backbone(self):
        with pytest.raises(ConfigError, match="unknown backbone"):
            backbone_spec("alexnet")

    def test_seeded_initialisation_is_bitwise(self):
        a = small_classifier(3)
        b = small_classifier(3)
        c = small_classifier(4)
        for key in a.head_parameters():
            assert a.params[key].tobytes() == b.params[key].tobytes()
        assert a.params["head.W1"].tobytes() != c.params["head.W1"].tobytes()

    def test_glorot_bounds_and_zero_bias(self):
        clf = small_classifier(0, channels=10, hidden=30)
        assert np.abs(clf.params["head.W1"]).max() <= math.sqrt(6 / 40)
        assert np.abs(clf.params["head.W2"]).max() <= math.sqrt(6 / 31)
        assert not clf.params["head.b1"].any() and not clf.params["head.b2"].any()

    def test_missing_weights_names_file(self, tmp_path):
        with pytest.raises(MissingWeightsError) as err:
            build_classifier(backbone_spec("xception"), weights_dir=tmp_path)
        assert str(expected_weights_file("xception", tmp_path)) in str(err.value)

    def test_head_config_validation(self):
        with pytest.raises(ConfigError):
            HeadConfig(dropout_rate=1.0)
        with pytest.raises(ConfigError):
            HeadConfig(output_units=2)


class TestForward:
    def test_zero_head_gives_one_half(self):
        clf = small_classifier(0)
        for key in clf.head_parameters():
            clf.params[key] = np.zeros_like(clf.params[key])
        batch, _ = batch_and_labels(0)
        assert np.all(forward(clf, batch) == 0.5)
        assert np.all(forward(clf, batch, training=True, dropout_seed=9) == 0.5)

    def test_eval_mode_is_deterministic(self):
        clf = small_classifier(1)
        batch, _ = batch_and_labels(1)
        assert forward(clf, batch).tobytes() == forward(clf, batch).tobytes()

    def test_closed_form_on_one_by_one_map(self):
        rng = np.random.default_rng(2)
        c, h = 5, 4
        f = rng.standard_normal(c)

        class OnePixel:
            def __call__(self, batch):
                return np.broadcast_to(f, (batch.shape[0], 1, 1, c))

            def parameters(self):
                return {}

        spec = BackboneSpec("stub", 7, c)
        clf = build_classifier(spec, HeadConfig(hidden_units=h), seed=5, extractor=OnePixel())
        clf.params["head.b1"] = rng.standard_normal(h)
        clf.params["head.b2"] = rng.standard_normal(1)
        W1, b1, W2, b2 = (clf.params[k] for k in ("head.W1", "head.b1", "head.W2", "head.b2"))
        z = float(b2[0])
        for j in range(h):
            a = b1[j] + sum(W1[i, j] * f[i] for i in range(c))
            z += W2[j, 0] * max(a, 0.0)
        expected = 1.0 / (1.0 + math.exp(-z))
        got = forward(clf, np.zeros((1, 7, 7, 3)))[0]
        assert abs(got - expected) <= 1e-10

    def test_outputs_in_open_interval(self):
        clf = small_classifier(3)
        clf.params["head.b2"] = np.array([800.0])
        batch, _ = batch_and_labels(3)
        p = forward(clf, batch)
        assert np.all((p > 0) & (p < 1))
        clf.params["head.b2"] = np.array([-800.0])
        p = forward(clf, batch)
        assert np.all((p > 0) & (p < 1))
        assert math.isfinite(bce_loss(p, np.ones(len(p))))

    def test_shape_mismatch(self):
        clf = small_classifier(0)
        with pytest.raises(ShapeError, match=r"\(B, 14, 14, 3\)"):
            forward(clf, np.zeros((2, 15, 14, 3)))

    def test_dropout_expectation(self):
        clf = small_classifier(4, channels=16, hidden=512)
        batch, _ = batch_and_labels(4, n=4)
        feats = extract_features(clf, batch)
        _, (_, _, hidden) = head_logits(clf.params, feats, 0.5, training=False)
        runs = 10_000
        total = np.zeros_like(hidden)
        for seed in range(runs):
            _, (_, _, dropped) = head_logits(clf.params, feats, 0.5, training=True,
                                             dropout_seed=seed)
            total += dropped
        # summed activation feeding the output unit, per sample
        mean_activation = (total / runs).sum(axis=1)
        target = hidden.sum(axis=1)
        assert np.all(np.abs(mean_activation - target) <= 0.02 * target)


def numeric_loss(clf, batch, labels, seed):
    return bce_loss(forward(clf, batch, training=True, dropout_seed=seed), labels)


class TestGradients:
    def test_tiny_head_matches_central_differences(self):
        clf = small_classifier(7, channels=4, hidden=3)
        batch, labels = batch_and_labels(7)
        grads = gradients(clf, batch, labels, dropout_seed=11)
        eps = 1e-5
        for key in clf.head_parameters():
            for idx in np.ndindex(clf.params[key].shape):
                orig = clf.params[key][idx]
                clf.params[key][idx] = orig + eps
                up = numeric_loss(clf, batch, labels, 11)
                clf.params[key][idx] = orig - eps
                down = numeric_loss(clf, batch, labels, 11)
                clf.params[key][idx] = orig
                assert rel_error(grads[key][idx], (up - down) / (2 * eps)) <= 1e-4, (key, idx)

    def test_unfrozen_stub_mixing_gradient(self):
        clf = small_classifier(8, channels=4, hidden=5, frozen=False)
        batch, labels = batch_and_labels(8)
        grads = gradients(clf, batch, labels, dropout_seed=2)
        assert set(grads) == set(clf.params)
        eps = 1e-5
        mixing = np.array(clf.params["extractor.mixing"])
        for idx in np.ndindex(mixing.shape):
            losses = []
            for sign in (1, -1):
                m = mixing.copy()
                m[idx] += sign * eps
                ext = StubExtractor(14, 4, mixing=m)
                params = dict(clf.params, **{"extractor.mixing": ext.mixing})
                moved = type(clf)(clf.backbone, clf.head, params, ext)
                losses.append(numeric_loss(moved, batch, labels, 2))
            numeric = (losses[0] - losses[1]) / (2 * eps)
            assert rel_error(grads["extractor.mixing"][idx], numeric) <= 1e-4

    def test_frozen_contract(self):
        clf = small_classifier(9)
        batch, labels = batch_and_labels(9)
        grads = gradients(clf, batch, labels)
        assert set(grads) == {"head.W1", "head.b1", "head.W2", "head.b2"}
        for key, g in grads.items():
            assert g.shape == clf.params[key].shape
        with pytest.raises(ValueError):
            clf.extractor.mixing[0, 0] = 1.0

    def test_logit_gradient_is_p_minus_y(self):
        rng = np.random.default_rng(10)
        feats = rng.standard_normal((1, 4))
        clf = small_classifier(10, channels=4, hidden=3)
        for y in (0, 1):
            _, grads, p = head_loss_and_grads(clf.params, feats, [y], training=False)
            # b2 enters the logit with unit coefficient, so dL/db2 = dL/dz
            assert grads["head.b2"][0] == pytest.approx(p[0] - y, abs=1e-15)

    def test_perfect_predictions_have_zero_gradient(self):
        rng = np.random.default_rng(12)
        clf = small_classifier(12, channels=4, hidden=3)
        feats = rng.standard_normal((5, 4))
        labels = np.array([1, 1, 0, 1, 0])
        # drive the logit to +/-40 through b2 alone so p equals y to double precision
        for y in (0, 1):
            clf.params["head.W2"] = np.zeros((3, 1))
            clf.params["head.b2"] = np.array([40.0 if y else -40.0])
            same = np.full(5, y)
            _, grads, p = head_loss_and_grads(clf.params, feats, same, training=False)
            assert np.allclose(p, y, atol=1e-15)
            for g in grads.values():
                assert np.abs(g).max() <= 1e-9
        with pytest.raises(DomainError):
            head_loss_and_grads(clf.params, feats, labels * 2, training=False)

    def test_dropout_seed_determinism(self):
        clf = small_classifier(13)
        batch, labels = batch_and_labels(13)
        a = gradients(clf, batch, labels, dropout_seed=5)
        b = gradients(clf, batch, labels, dropout_seed=5)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        clf = small_classifier(14, frozen=False)
        path = save_checkpoint(clf, tmp_path / "m.ckpt")
        back = load_checkpoint(path)
        assert back.backbone == clf.backbone and back.head == clf.head
        for key, value in clf.params.items():
            assert back.params[key].tobytes() == value.astype(np.float32).astype(np.float64).tobytes()
        batch, _ = batch_and_labels(14)
        np.testing.assert_allclose(forward(back, batch), forward(clf, batch), atol=1e-6)
        assert checkpoint_bytes(back) == path.read_bytes()

    def test_corruption_detected(self, tmp_path):
        path = save_checkpoint(small_classifier(15), tmp_path / "m.ckpt")
        data = bytearray(path.read_bytes())
        data[40] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(ConfigError, match="checksum"):
            load_checkpoint(path)
        path.write_bytes(b"junk")
        with pytest.raises(ConfigError):
            load_checkpoint(path)


@pytest.mark.slow
@pytest.mark.skipif(importlib.util.find_spec("keras") is None, reason="keras not installed")
def test_keras_adapter_with_local_weights(tmp_path):
    import keras

    keras.applications.MobileNetV2(weights=None, include_top=False,
                                   input_shape=(224, 224, 3)).save_weights(
        expected_weights_file("mobilenetv2", tmp_path))
    clf = build_classifier(backbone_spec("mobilenetv2"), seed=0, weights_dir=tmp_path)
    batch = np.random.default_rng(0).random((2, 224, 224, 3))
    feats = extract_features(clf, batch)
    assert feats.shape == (2, 1280)
    p = forward(clf, batch)
    assert np.all((p > 0) & (p < 1))
