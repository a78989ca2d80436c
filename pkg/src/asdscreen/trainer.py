"""Head training: weighted BCE, Adagrad, early stopping and class balancing."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .ingest import DatasetManifest
from .model_zoo import (
    Classifier,
    StubExtractor,
    extract_features,
    head_logits,
    head_loss_and_grads,
    sigmoid,
)

PROB_CLAMP = 1e-7
MIN_IMPROVEMENT = 1e-6
HISTORY_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "elapsed_s")


def bce_loss(probabilities, labels, weights=None) -> float:
    """Mean binary cross-entropy; a weighted mean when ``weights`` is given."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ShapeError(f"{p.shape[0]} probabilities vs {y.shape[0]} labels")
    w = np.ones_like(p) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != p.shape:
        raise ShapeError(f"{w.shape[0]} weights vs {p.shape[0]} probabilities")
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_sample = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(np.sum(w * per_sample) / np.sum(w))


@dataclass
class AdagradState:
    accumulators: Dict[str, np.ndarray] = field(default_factory=dict)


def adagrad_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                 state: AdagradState, lr: float = 0.001, eps: float = 1e-7):
    """Return updated copies of ``params`` and ``state``; inputs are untouched.

    Per coordinate: ``acc += g**2; w -= lr * g / (sqrt(acc) + eps)``.
    """
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {key}")
        if np.shape(g) != np.shape(params[key]):
            raise ShapeError(f"gradient {key} has shape {np.shape(g)}, parameter {np.shape(params[key])}")
    new_params = dict(params)
    new_acc = dict(state.accumulators)
    for key, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        acc = new_acc.get(key, np.zeros_like(g)) + g * g
        new_acc[key] = acc
        new_params[key] = params[key] - lr * g / (np.sqrt(acc) + eps)
    return new_params, AdagradState(new_acc)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 50
    early_stop_patience: int = 5
    adagrad_epsilon: float = 1e-7
    seed: int = 0
    class_weights: Optional[Tuple[float, float]] = None
    restore_best: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be at least 1")
        if self.class_weights is not None:
            cw = tuple(float(w) for w in self.class_weights)
            if len(cw) != 2 or min(cw) <= 0:
                raise ConfigError("class_weights must be two positive numbers")
            object.__setattr__(self, "class_weights", cw)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["class_weights"] is not None:
            d["class_weights"] = list(d["class_weights"])
        return d


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    elapsed: float

    def row(self):
        return (self.epoch, repr(self.train_loss), repr(self.train_accuracy),
                repr(self.val_loss), repr(self.val_accuracy), repr(self.elapsed))


class EarlyStopping:
    """Stop once val loss has failed to beat the best by more than
    ``min_delta`` for ``patience`` consecutive epochs."""

    def __init__(self, patience: int = 5, min_delta: float = MIN_IMPROVEMENT):
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = float("inf")
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.wait == 0


@dataclass
class TrainResult:
    classifier: Classifier
    history: List[EpochStats]
    stop_reason: str
    best_epoch: int
    last_classifier: Classifier


def _labels(data) -> np.ndarray:
    return np.asarray(data[1], dtype=np.float64).reshape(-1)


def _with_params(clf: Classifier, params) -> Classifier:
    out = clf.copy()
    out.params = {k: np.array(v) for k, v in params.items()}
    if "extractor.mixing" in out.params:
        out.extractor = StubExtractor(clf.backbone.input_side, clf.backbone.feature_channels,
                                      mixing=out.params["extractor.mixing"])
        out.params["extractor.mixing"] = out.extractor.mixing
    return out


def _chunked_features(clf, images, chunk=64):
    return np.concatenate([extract_features(clf, images[i:i + chunk])
                           for i in range(0, len(images), chunk)])


def batch_seed(seed: int, epoch: int, batch: int):
    return [seed, epoch, batch]


def train(clf: Classifier, train_set, val_set, cfg: TrainConfig = TrainConfig(), *,
          evaluate: Optional[Callable[[Classifier, int], Tuple[float, float]]] = None,
          on_epoch: Optional[Callable[[EpochStats], None]] = None,
          timestamps: bool = True) -> TrainResult:
    """Mini-batch Adagrad on the head with per-epoch validation.

    ``train_set`` and ``val_set`` are ``(images, labels)`` pairs. ``evaluate``
    replaces the built-in validation pass; it receives the current classifier
    and 1-based epoch and returns ``(val_loss, val_accuracy)``.
    """
    images = np.asarray(train_set[0], dtype=np.float64)
    y = _labels(train_set)
    if len(images) == 0 or len(y) == 0:
        raise ConfigError("training set is empty")
    if len(images) != len(y):
        raise ShapeError(f"{len(images)} training images vs {len(y)} labels")
    if evaluate is None and len(val_set[0]) == 0:
        raise ConfigError("validation set is empty")

    frozen = clf.backbone.frozen
    stub_unfrozen = not frozen and isinstance(clf.extractor, StubExtractor)
    if frozen:
        feats = _chunked_features(clf, images)
        pooled = None
    else:
        pooled = clf.extractor.pooled(images)
        feats = None
    weights = None
    if cfg.class_weights is not None:
        weights = np.where(y == 1, cfg.class_weights[1], cfg.class_weights[0])

    if evaluate is None:
        val_images = np.asarray(val_set[0], dtype=np.float64)
        val_y = _labels(val_set)

        def evaluate(model, epoch):
            p = sigmoid(head_logits(model.params, _chunked_features(model, val_images),
                                    training=False)[0])
            return bce_loss(p, val_y), float(np.mean((p >= 0.5) == (val_y == 1)))

    params = {k: np.array(v) for k, v in clf.params.items()}
    trainable = set(clf.trainable())
    state = AdagradState()
    stopper = EarlyStopping(cfg.early_stop_patience)
    history: List[EpochStats] = []
    best_params = params
    stop_reason = "max_epochs"
    n = len(y)
    rate = clf.head.dropout_rate

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if stub_unfrozen:
                batch_pooled = pooled[idx]
                batch_feats = batch_pooled.mean(axis=(1, 2)) @ params["extractor.mixing"]
            else:
                batch_pooled, batch_feats = None, feats[idx]
            seed = batch_seed(cfg.seed, epoch, b)
            try:
                loss, grads, p = head_loss_and_grads(
                    params, batch_feats, y[idx], rate, True, seed,
                    None if weights is None else weights[idx], batch_pooled, frozen)
                grads = {k: v for k, v in grads.items() if k in trainable}
                params, state = adagrad_step(params, grads, state, cfg.learning_rate,
                                             cfg.adagrad_epsilon)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            loss_sum += loss * len(idx)
            correct += int(np.sum((p >= 0.5) == (y[idx] == 1)))

        current = _with_params(clf, params)
        val_loss, val_acc = evaluate(current, epoch)
        if not np.isfinite(val_loss):
            raise NumericError(f"epoch {epoch}: non-finite validation loss")
        stats = EpochStats(epoch, loss_sum / n, correct / n, float(val_loss), float(val_acc),
                           time.perf_counter() - t0 if timestamps else 0.0)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        stop = stopper.update(epoch, stats.val_loss)
        if stopper.improved_last:
            best_params = params
        if stop:
            stop_reason = "early_stopping"
            break

    last = _with_params(clf, params)
    best = _with_params(clf, best_params) if cfg.restore_best else last
    return TrainResult(best, history, stop_reason, stopper.best_epoch, last)


def write_history(history: List[EpochStats], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_HEADER)
    for stats in history:
        writer.writerow(stats.row())
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_history(path) -> List[EpochStats]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochStats(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]),
                       float(r["val_loss"]), float(r["val_acc"]), float(r["elapsed_s"]))
            for r in rows]


# --------------------------------------------------------------------------
# class balancing


def _train_counts(manifest: DatasetManifest):
    train = manifest.split_records("train")
    n1 = sum(r.label for r in train)
    return len(train) - n1, n1


def class_weights_from_manifest(manifest: DatasetManifest) -> Tuple[float, float]:
    """``(w_0, w_1)`` with ``w_c = N / (2 N_c)`` over the train split."""
    n0, n1 = _train_counts(manifest)
    if n0 == 0 or n1 == 0:
        missing = 0 if n0 == 0 else 1
        raise ConfigError(f"class {missing} is absent from the train split; "
                          "re-weighting needs both classes (collect or re-sample data)")
    total = n0 + n1
    return total / (2 * n0), total / (2 * n1)


def oversample(manifest: DatasetManifest, seed: int = 0) -> DatasetManifest:
    """Duplicate minority-class train records (uniform, with replacement)
    until both classes have equal counts. Duplicates are appended."""
    n0, n1 = _train_counts(manifest)
    if n0 == 0 or n1 == 0:
        raise ConfigError("oversampling needs both classes in the train split")
    if n0 == n1:
        return manifest.with_records(manifest.records)
    minority = 0 if n0 < n1 else 1
    pool = [r for r in manifest.records if r.split == "train" and r.label == minority]
    picks = np.random.default_rng(seed).integers(0, len(pool), size=abs(n1 - n0))
    dups = [replace(pool[i], sample_id=f"{pool[i].sample_id}~r{k}") for k, i in enumerate(picks)]
    return manifest.with_records(list(manifest.records) + dups)
