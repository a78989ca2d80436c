"""Backbone registry, replacement classification head and checkpoint files.

The head is fixed: global average pooling over the extractor's feature map,
a ReLU dense layer, inverted dropout and a single sigmoid unit. Head maths is
plain numpy in float64. Pretrained backbones are Keras application models
whose no-top weights the user supplies; nothing is downloaded.

Checkpoint layout (all integers little-endian)::

    magic        8 bytes   b"ASDCKPT\\0"
    version      u16       1
    name_len     u16       backbone name length, then name (utf-8)
    input_side   u32
    channels     u32       feature_channels
    frozen       u8
    hidden       u32       head hidden_units
    dropout      f64       head dropout_rate
    n_blocks     u32
    n_blocks x:
      key_len    u16       then key (utf-8), e.g. "head.W1"
      ndim       u8
      dims       ndim x u32
      data       prod(dims) x f32, C order
    crc32        u32       over every preceding byte
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import ConfigError, DomainError, MissingWeightsError, NumericError, ShapeError

WEIGHTS_ENV = "ASDSCREEN_WEIGHTS_DIR"
CHECKPOINT_MAGIC = b"ASDCKPT\x00"
CHECKPOINT_VERSION = 1

# name -> (input side, feature channels, keras application, keras module)
PRETRAINED_BACKBONES = {
    "vgg19": (224, 512, "VGG19", "vgg19"),
    "xception": (299, 2048, "Xception", "xception"),
    "resnet50v2": (224, 2048, "ResNet50V2", "resnet_v2"),
    "mobilenetv2": (224, 1280, "MobileNetV2", "mobilenet_v2"),
    "efficientnetb0": (224, 1280, "EfficientNetB0", "efficientnet"),
}
BACKBONE_NAMES = tuple(PRETRAINED_BACKBONES) + ("stub",)
STUB_GRID = 7


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    input_side: int
    feature_channels: int
    frozen: bool = True

    def __post_init__(self):
        if self.name not in BACKBONE_NAMES:
            raise ConfigError(f"unknown backbone {self.name!r}; choose from {', '.join(BACKBONE_NAMES)}")
        if self.feature_channels <= 0:
            raise ConfigError("feature_channels must be positive")
        if self.name in PRETRAINED_BACKBONES:
            side, channels = PRETRAINED_BACKBONES[self.name][:2]
            if self.input_side != side:
                raise ConfigError(f"{self.name} requires input_side {side}, got {self.input_side}")
            if self.feature_channels != channels:
                raise ConfigError(f"{self.name} produces {channels} channels, got {self.feature_channels}")
        elif self.input_side < STUB_GRID:
            raise ConfigError(f"stub input_side must be at least {STUB_GRID}")


def backbone_spec(name: str, *, input_side: Optional[int] = None,
                  feature_channels: Optional[int] = None, frozen: bool = True) -> BackboneSpec:
    """Registry lookup; only the stub accepts a custom side/channel count."""
    if name in PRETRAINED_BACKBONES:
        side, channels = PRETRAINED_BACKBONES[name][:2]
        return BackboneSpec(name, input_side or side, feature_channels or channels, frozen)
    if name == "stub":
        return BackboneSpec(name, input_side or 224, feature_channels or 64, frozen)
    raise ConfigError(f"unknown backbone {name!r}; choose from {', '.join(BACKBONE_NAMES)}")


@dataclass(frozen=True)
class HeadConfig:
    hidden_units: int = 512
    dropout_rate: float = 0.5
    output_units: int = 1
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        if self.hidden_units < 1:
            raise ConfigError("hidden_units must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if (self.output_units, self.hidden_activation, self.output_activation) != (1, "relu", "sigmoid"):
            raise ConfigError("only the single-unit relu/sigmoid head is supported")


# --------------------------------------------------------------------------
# extractors


class StubExtractor:
    """Block-average the image onto a 7x7 grid, then mix the 3 colour
    channels into ``feature_channels`` with a fixed random matrix."""

    name = "stub"

    def __init__(self, input_side: int, feature_channels: int, seed: int = 0, mixing=None):
        self.input_side = input_side
        self.feature_channels = feature_channels
        if mixing is None:
            mixing = np.random.default_rng(seed).standard_normal((3, feature_channels))
        mixing = np.array(mixing, dtype=np.float64)
        if mixing.shape != (3, feature_channels):
            raise ShapeError(f"stub mixing matrix must be (3, {feature_channels}), got {mixing.shape}")
        mixing.flags.writeable = False
        self.mixing = mixing
        edges = np.floor(np.arange(STUB_GRID + 1) * input_side / STUB_GRID).astype(np.intp)
        self._starts = edges[:-1]
        self._sizes = np.diff(edges).astype(np.float64)

    def pooled(self, batch: np.ndarray) -> np.ndarray:
        sums = np.add.reduceat(np.add.reduceat(batch, self._starts, axis=1), self._starts, axis=2)
        return sums / (self._sizes[None, :, None, None] * self._sizes[None, None, :, None])

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        return self.pooled(batch) @ self.mixing

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"extractor.mixing": self.mixing}


class KerasExtractor:
    """Adapter around a no-top Keras application model with user-supplied weights.

    Inputs arrive in [0, 1]; they are rescaled to 0-255 and passed through
    the model's own ``preprocess_input`` before the forward pass. Runs in
    inference mode.
    """

    def __init__(self, name: str, weights_path):
        side, channels, app_name, module = PRETRAINED_BACKBONES[name]
        self.name = name
        self.input_side = side
        self.feature_channels = channels
        self.weights_path = Path(weights_path)
        self._app_name = app_name
        self._module = module
        self._model = None
        self._preprocess = None

    def _load(self):
        os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")
        import keras

        app = getattr(keras.applications, self._app_name)
        self._model = app(weights=str(self.weights_path), include_top=False,
                          input_shape=(self.input_side, self.input_side, 3))
        self._model.trainable = False
        self._preprocess = getattr(keras.applications, self._module).preprocess_input

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        if self._model is None:
            self._load()
        x = self._preprocess(np.asarray(batch, dtype=np.float32) * 255.0)
        return np.asarray(self._model(x, training=False), dtype=np.float64)

    def parameters(self) -> Dict[str, np.ndarray]:
        return {}


def expected_weights_file(name: str, weights_dir=None) -> Path:
    weights_dir = weights_dir or os.environ.get(WEIGHTS_ENV) or "."
    return Path(weights_dir) / f"{name}_notop.weights.h5"


def make_extractor(spec: BackboneSpec, weights_dir=None, stub_seed: int = 0):
    if spec.name == "stub":
        return StubExtractor(spec.input_side, spec.feature_channels, seed=stub_seed)
    if not spec.frozen:
        raise ConfigError(f"{spec.name}: fine-tuning pretrained backbones is not supported")
    path = expected_weights_file(spec.name, weights_dir)
    if not path.is_file():
        raise MissingWeightsError(
            f"{spec.name}: pretrained weights not found; expected file {path} "
            f"(set --weights-dir or {WEIGHTS_ENV})")
    return KerasExtractor(spec.name, path)


# --------------------------------------------------------------------------
# classifier


@dataclass
class Classifier:
    backbone: BackboneSpec
    head: HeadConfig
    params: Dict[str, np.ndarray]
    extractor: object = field(repr=False)

    def head_parameters(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith("head.")}

    def trainable(self) -> Dict[str, np.ndarray]:
        """Parameters updated by the optimizer."""
        if self.backbone.frozen:
            return self.head_parameters()
        return dict(self.params)

    def head_parameter_count(self) -> int:
        return sum(v.size for v in self.head_parameters().values())

    def copy(self) -> "Classifier":
        params = {k: np.array(v) for k, v in self.params.items()}
        extractor = self.extractor
        if "extractor.mixing" in params:
            extractor = StubExtractor(self.backbone.input_side, self.backbone.feature_channels,
                                      mixing=params["extractor.mixing"])
            params["extractor.mixing"] = extractor.mixing
        return Classifier(self.backbone, self.head, params, extractor)


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def build_classifier(spec: BackboneSpec, head: HeadConfig = HeadConfig(), seed: int = 0,
                     weights_dir=None, extractor=None) -> Classifier:
    """Attach a freshly initialised head (Glorot-uniform weights, zero biases)."""
    if extractor is None:
        extractor = make_extractor(spec, weights_dir)
    rng = np.random.default_rng(seed)
    c, h = spec.feature_channels, head.hidden_units
    params = {
        "head.W1": _glorot(rng, c, h),
        "head.b1": np.zeros(h),
        "head.W2": _glorot(rng, h, 1),
        "head.b2": np.zeros(1),
    }
    params.update(extractor.parameters())
    return Classifier(spec, head, params, extractor)


def _check_batch(clf: Classifier, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    side = clf.backbone.input_side
    if batch.ndim != 4 or batch.shape[1:] != (side, side, 3):
        raise ShapeError(f"expected batch of shape (B, {side}, {side}, 3), got {batch.shape}")
    return batch


def extract_features(clf: Classifier, batch) -> np.ndarray:
    """Backbone feature map followed by global average pooling: ``(B, C)``."""
    fmap = clf.extractor(_check_batch(clf, batch))
    feats = fmap.mean(axis=(1, 2))
    if not np.all(np.isfinite(feats)):
        raise NumericError("non-finite backbone features")
    return feats


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep outputs inside the open interval even for saturated logits
    return np.clip(p, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def dropout_mask(shape, rate: float, seed: int) -> np.ndarray:
    if rate == 0.0:
        return np.ones(shape)
    keep = np.random.default_rng(seed).random(shape) >= rate
    return keep / (1.0 - rate)


def head_logits(params, features, rate=0.5, training=False, dropout_seed=0):
    """Pre-sigmoid logits plus the intermediates needed for backprop."""
    pre = features @ params["head.W1"] + params["head.b1"]
    hidden = np.maximum(pre, 0.0)
    mask = dropout_mask(hidden.shape, rate, dropout_seed) if training else None
    dropped = hidden * mask if mask is not None else hidden
    z = (dropped @ params["head.W2"] + params["head.b2"])[:, 0]
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite head activation")
    return z, (pre, mask, dropped)


def forward(clf: Classifier, batch, training: bool = False, dropout_seed: int = 0) -> np.ndarray:
    feats = extract_features(clf, batch)
    z, _ = head_logits(clf.params, feats, clf.head.dropout_rate, training, dropout_seed)
    return sigmoid(z)


def _check_labels(labels, n):
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} samples")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("labels must be 0 or 1")
    return y


def head_loss_and_grads(params, features, labels, rate=0.5, training=True, dropout_seed=0,
                        sample_weights=None, pooled=None, frozen=True):
    """Mean (optionally weighted) BCE, its gradients and the batch probabilities.

    ``pooled`` is the stub's pre-mixing (B, 7, 7, 3) grid, needed only to
    differentiate through an unfrozen stub extractor.
    """
    from .trainer import bce_loss

    y = _check_labels(labels, features.shape[0])
    w = np.ones_like(y) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    z, (pre, mask, dropped) = head_logits(params, features, rate, training, dropout_seed)
    p = sigmoid(z)
    loss = bce_loss(p, y, w)

    dz = w * (p - y) / w.sum()
    grads = {
        "head.W2": dropped.T @ dz[:, None],
        "head.b2": np.array([dz.sum()]),
    }
    d_dropped = dz[:, None] * params["head.W2"][:, 0][None, :]
    d_hidden = d_dropped * mask if mask is not None else d_dropped
    d_pre = d_hidden * (pre > 0)
    grads["head.W1"] = features.T @ d_pre
    grads["head.b1"] = d_pre.sum(axis=0)
    if not frozen and "extractor.mixing" in params:
        if pooled is None:
            raise ConfigError("unfrozen stub gradients need the pooled input grid")
        d_feat = d_pre @ params["head.W1"].T
        grads["extractor.mixing"] = pooled.mean(axis=(1, 2)).T @ d_feat
    return loss, grads, p


def gradients(clf: Classifier, batch, labels, dropout_seed: int = 0, training: bool = True,
              sample_weights=None) -> Dict[str, np.ndarray]:
    """Gradient of mean BCE with respect to every trainable parameter."""
    batch = _check_batch(clf, batch)
    _check_labels(labels, batch.shape[0])
    feats = extract_features(clf, batch)
    pooled = None
    if not clf.backbone.frozen and isinstance(clf.extractor, StubExtractor):
        pooled = clf.extractor.pooled(batch)
    _, grads, _ = head_loss_and_grads(clf.params, feats, labels, clf.head.dropout_rate, training,
                                   dropout_seed, sample_weights, pooled, clf.backbone.frozen)
    return grads


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(clf: Classifier) -> bytes:
    name = clf.backbone.name.encode("utf-8")
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<HH", CHECKPOINT_VERSION, len(name)) + name
    out += struct.pack("<IIBId", clf.backbone.input_side, clf.backbone.feature_channels,
                       int(clf.backbone.frozen), clf.head.hidden_units, clf.head.dropout_rate)
    blocks = sorted(clf.params.items())
    out += struct.pack("<I", len(blocks))
    for key, value in blocks:
        kb = key.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        out += struct.pack("<H", len(kb)) + kb
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_checkpoint(clf: Classifier, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(clf))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ConfigError("truncated checkpoint")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n):
        if self.pos + n > len(self.data):
            raise ConfigError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def load_checkpoint(path, weights_dir=None) -> Classifier:
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 4 or not data.startswith(CHECKPOINT_MAGIC):
        raise ConfigError(f"{path}: not an asdscreen checkpoint")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise ConfigError(f"{path}: checkpoint checksum mismatch")
    rd = _Reader(data[:-4])
    rd.raw(len(CHECKPOINT_MAGIC))
    version, name_len = rd.take("<HH")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    name = rd.raw(name_len).decode("utf-8")
    side, channels, frozen, hidden, rate = rd.take("<IIBId")
    (n_blocks,) = rd.take("<I")
    params = {}
    for _ in range(n_blocks):
        (klen,) = rd.take("<H")
        key = rd.raw(klen).decode("utf-8")
        (ndim,) = rd.take("<B")
        shape = rd.take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(rd.raw(4 * count), dtype="<f4").reshape(shape)
        params[key] = arr.astype(np.float64)

    spec = BackboneSpec(name, side, channels, bool(frozen))
    head = HeadConfig(hidden_units=hidden, dropout_rate=rate)
    if name == "stub":
        extractor = StubExtractor(side, channels, mixing=params["extractor.mixing"])
        params["extractor.mixing"] = extractor.mixing
    else:
        extractor = make_extractor(spec, weights_dir)
    return Classifier(spec, head, params, extractor)
