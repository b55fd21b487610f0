"""Minimizing the regularized cross-entropy objective with SGD-momentum or ADAM.

The objective for a minibatch is ``mean CE + lam * ||W||^2`` where ``W``
covers conv/dense weights and biases but not batch-norm parameters.
Training re-augments and reshuffles the training set every epoch from a
generator seeded by ``(seed, epoch)``, evaluates on the validation set, and
keeps the weights of the epoch with the lowest validation loss.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .augmentation import AugmentConfig, augment_batch, make_rng
from .dataset import Dataset
from .network import checkpoint as ckpt
from .network.layers import cross_entropy
from .network.model import ArchitectureError, NetworkModel

logger = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 0.001
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 16
    lam: float = 0.0001
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    top_k: int = 5
    target_accuracy: float | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig.none)

    def __post_init__(self):
        if isinstance(self.augment, Mapping):
            self.augment = AugmentConfig.from_dict(dict(self.augment))
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise TrainingError(f"optimizer must be 'sgd_momentum' or 'adam', got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise TrainingError("momentum must be in [0, 1)")
        if self.batch_size < 2:
            raise TrainingError("batch_size must be >= 2 (batch norm needs batch statistics)")
        if self.lam < 0:
            raise TrainingError("lambda must be >= 0")
        if self.max_epochs < 1 or self.patience < 1:
            raise TrainingError("max_epochs and patience must be >= 1")
        if self.top_k < 1:
            raise TrainingError("top_k must be >= 1")

    @classmethod
    def sgd_pretraining(cls, **overrides) -> "TrainConfig":
        """SGD regime of the AlexNet pretraining runs: batch 64, lambda 5e-4, lr 0.01, momentum 0.9."""
        return cls(**{"optimizer": "sgd_momentum", "batch_size": 64, "lam": 0.0005,
                      "learning_rate": 0.01, "momentum": 0.9, **overrides})

    @classmethod
    def adam_pretraining(cls, **overrides) -> "TrainConfig":
        """ADAM regime of the BN-Inception pretraining runs: batch 32, lambda 0, lr 0.001."""
        return cls(**{"optimizer": "adam", "batch_size": 32, "lam": 0.0, "learning_rate": 0.001, **overrides})

    @classmethod
    def fine_tuning(cls, augment: AugmentConfig | None = None, **overrides) -> "TrainConfig":
        """Fine-tuning regime: ADAM, batch 16, lambda 1e-4, lr 0.001."""
        return cls(**{"optimizer": "adam", "batch_size": 16, "lam": 0.0001, "learning_rate": 0.001,
                      "augment": augment or AugmentConfig.category(), **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        return cls(**dict(data))


# --------------------------------------------------------------------------
# objective and optimizers
# --------------------------------------------------------------------------


def total_loss(data_loss: float, weights, lam: float) -> float:
    """``data_loss + lam * sum(w^2)`` over the given trainable weights.

    ``weights`` may be a model (its regularized tensors are used), a mapping
    of arrays, or a sequence of arrays.
    """
    if lam < 0:
        raise TrainingError("lambda must be >= 0")
    if isinstance(weights, NetworkModel):
        return data_loss + lam * weights.l2_norm_sq()
    arrays = weights.values() if isinstance(weights, Mapping) else weights
    return data_loss + lam * float(sum(np.sum(np.asarray(w, dtype=np.float64) ** 2) for w in arrays))


def sgd_momentum_step(w, g, velocity, lr: float, momentum: float):
    """``v <- momentum * v - lr * g``; ``w <- w + v``.  Returns ``(w, v)``."""
    velocity = momentum * velocity - lr * g
    return w + velocity, velocity


def adam_step(w, g, m, v, t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected ADAM step.  Returns ``(w, m, v, t)`` with ``t`` incremented."""
    t += 1
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * (g * g)
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return w - lr * m_hat / (np.sqrt(v_hat) + eps), m, v, t


@dataclass
class OptimizerState:
    kind: str
    slots: dict[str, tuple[np.ndarray, ...]] = field(default_factory=dict)
    t: int = 0


class Optimizer:
    """Applies the configured update rule to every tensor of a parameter dict."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.state = OptimizerState(config.optimizer)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        c = self.config
        st = self.state
        if c.optimizer == "sgd_momentum":
            for k, w in params.items():
                (vel,) = st.slots.get(k) or (np.zeros_like(w),)
                params[k], vel = sgd_momentum_step(w, grads[k], vel, c.learning_rate, c.momentum)
                st.slots[k] = (vel,)
        else:
            t = st.t
            for k, w in params.items():
                m, v = st.slots.get(k) or (np.zeros_like(w), np.zeros_like(w))
                params[k], m, v, _ = adam_step(w, grads[k], m, v, t, c.learning_rate,
                                               c.adam_beta1, c.adam_beta2, c.adam_epsilon)
                st.slots[k] = (m, v)
            st.t = t + 1
        for k, w in params.items():
            params[k] = w.astype(grads[k].dtype, copy=False)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def predict(probs: np.ndarray) -> np.ndarray:
    """Argmax with ties going to the lowest class index."""
    return np.argmax(probs, axis=1)


def accuracy(labels, predictions) -> float:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise TrainingError(f"length mismatch: {labels.shape} vs {predictions.shape}")
    if labels.size == 0:
        raise TrainingError("accuracy of an empty label set is undefined")
    return float(np.mean(labels == predictions))


def top_k_accuracy(labels, probs, k: int) -> float:
    """Fraction of rows whose label is among the ``k`` largest probabilities.

    Classes are ranked by descending probability, equal probabilities by
    ascending class index.
    """
    labels = np.asarray(labels)
    probs = np.asarray(probs)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise TrainingError(f"shape mismatch: probs {probs.shape}, labels {labels.shape}")
    if not 1 <= k <= probs.shape[1]:
        raise TrainingError(f"K must be in [1, {probs.shape[1]}], got {k}")
    if labels.size == 0:
        raise TrainingError("top-K accuracy of an empty label set is undefined")
    p_true = probs[np.arange(len(labels)), labels][:, None]
    cls = np.arange(probs.shape[1])[None, :]
    ahead = (probs > p_true) | ((probs == p_true) & (cls < labels[:, None]))
    return float(np.mean(ahead.sum(axis=1) < k))


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


@dataclass
class EvalReport:
    accuracy: float
    top_k_accuracy: float
    k: int
    loss: float
    confusion: np.ndarray
    class_names: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "top_k_accuracy": self.top_k_accuracy, "k": self.k,
                "loss": self.loss, "confusion_matrix": self.confusion.tolist(),
                "class_names": list(self.class_names)}


def predict_batches(model: NetworkModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return np.concatenate([model.predict_proba(images[i:i + batch_size])
                           for i in range(0, len(images), batch_size)])


def evaluate(model: NetworkModel, images: np.ndarray, labels: np.ndarray, k: int = 5,
             batch_size: int = 64) -> EvalReport:
    probs = predict_batches(model, images, batch_size)
    k = min(k, model.num_classes)
    return EvalReport(
        accuracy=accuracy(labels, predict(probs)),
        top_k_accuracy=top_k_accuracy(labels, probs, k),
        k=k,
        loss=cross_entropy(probs, labels),
        confusion=confusion_matrix(labels, predict(probs), model.num_classes),
        class_names=model.class_names,
    )


# --------------------------------------------------------------------------
# history and early stopping
# --------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    val_top_k: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def best_epoch(self) -> int:
        """1-based epoch with the lowest validation loss (earliest on ties)."""
        if not self.records:
            return 0
        return min(self.records, key=lambda r: (r.val_loss, r.epoch)).epoch

    def epochs_to_accuracy(self, target: float) -> int | None:
        for r in self.records:
            if r.val_accuracy >= target:
                return r.epoch
        return None

    def save_jsonl(self, path: str | Path) -> None:
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "TrainHistory":
        records = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(EpochRecord(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as exc:
                raise TrainingError(f"{path}:{lineno}: bad history record: {exc}") from exc
        for i, r in enumerate(records, 1):
            if r.epoch != i:
                raise TrainingError(f"{path}: epochs must be contiguous from 1")
        return cls(records)


class EarlyStopping:
    """Stop once validation loss has not improved for ``patience`` consecutive epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Return ``(improved, should_stop)``."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


# --------------------------------------------------------------------------
# transfer learning
# --------------------------------------------------------------------------


def warm_start(model: NetworkModel, donor: NetworkModel | str | Path) -> NetworkModel:
    """Copy body weights and batch-norm statistics from ``donor`` into a copy of ``model``.

    The head is copied too when both have the same number of classes;
    otherwise ``model``'s freshly initialized head is kept.
    """
    if not isinstance(donor, NetworkModel):
        donor = ckpt.load_checkpoint(donor)
    if donor.input_shape != model.input_shape:
        raise ArchitectureError(f"input shape differs: donor {donor.input_shape}, model {model.input_shape}")
    if len(donor.body) != len(model.body):
        raise ArchitectureError(f"body depth differs: donor {len(donor.body)} layers, model {len(model.body)}")
    for i, (a, b) in enumerate(zip(donor.body, model.body)):
        if a != b:
            raise ArchitectureError(f"body layer {i} differs: donor {a.to_dict()}, model {b.to_dict()}")
    out = model.copy()
    for k in model.body_keys:
        out.params[k] = donor.params[k].astype(model.dtype, copy=True)
    for k in model.state:
        out.state[k] = donor.state[k].astype(model.dtype, copy=True)
    if donor.num_classes == model.num_classes:
        for k in model.head_keys:
            out.params[k] = donor.params[k].astype(model.dtype, copy=True)
    out.provenance = {**model.provenance, "warm_start": {"donor_classes": donor.num_classes,
                                                         "head_copied": donor.num_classes == model.num_classes}}
    return out


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def _as_arrays(data, model: NetworkModel) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Dataset):
        if len(data) == 0:
            raise TrainingError("empty dataset")
        if data.class_names != model.class_names:
            raise TrainingError(f"dataset classes {data.class_names} differ from model classes {model.class_names}")
        return data.to_arrays(model.input_shape[:2], model.input_shape[2])
    images, labels = data
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise TrainingError("empty dataset")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise TrainingError("labels outside the model's classes")
    return images, labels


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # A trailing single sample cannot be batch-normalized on its own.
    if len(batches) > 1 and len(batches[-1]) < 2:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def train(model: NetworkModel, train_set, val_set, config: TrainConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[NetworkModel, TrainHistory]:
    """Train a copy of ``model``; return the best-validation-loss weights and the history.

    ``train_set``/``val_set`` are ``Dataset`` objects or ``(images, labels)`` pairs.
    """
    x_train, y_train = _as_arrays(train_set, model)
    x_val, y_val = _as_arrays(val_set, model)
    if len(x_train) < 2:
        raise TrainingError("need at least 2 training samples")

    model = model.copy()
    opt = Optimizer(config)
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best = model.copy()
    k = min(config.top_k, model.num_classes)

    for epoch in range(1, config.max_epochs + 1):
        rng = make_rng(config.seed, epoch)
        x_epoch = augment_batch(x_train, config.augment, rng)
        losses, sizes = [], []
        for idx in minibatches(len(x_epoch), config.batch_size, rng):
            loss, grads = model.backward(x_epoch[idx], y_train[idx], config.lam)
            opt.step(model.params, grads)
            losses.append(loss)
            sizes.append(len(idx))
        report = evaluate(model, x_val, y_val, k)
        record = EpochRecord(epoch, float(np.average(losses, weights=sizes)), report.loss,
                             report.accuracy, report.top_k_accuracy)
        history.records.append(record)
        logger.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f val_top%d %.4f", epoch,
                    record.train_loss, record.val_loss, record.val_accuracy, k, record.val_top_k)
        if on_epoch is not None:
            on_epoch(record)

        improved, stop = stopper.update(epoch, report.loss)
        if improved:
            best = model.copy()
        if config.target_accuracy is not None and report.accuracy >= config.target_accuracy:
            history.stop_reason = "target_accuracy"
            break
        if stop:
            history.stop_reason = "early_stopping"
            break
    else:
        history.stop_reason = "max_epochs"

    best.provenance = {**best.provenance, "training": {
        "config": config.to_dict(), "best_epoch": history.best_epoch, "epochs_run": len(history.records),
        "stop_reason": history.stop_reason, "class_names": list(model.class_names)}}
    return best, history
