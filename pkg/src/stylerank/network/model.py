"""CNN classifier split into a feature body and a removable softmax head."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import layers as L

LAYER_KINDS = ("conv", "batchnorm", "relu", "maxpool", "globalavgpool", "dense", "softmax")

# Parameter names that take part in the L2 penalty; batch-norm gamma/beta do not.
REGULARIZED = ("weight", "bias")


class ArchitectureError(ValueError):
    """Layer specs are invalid or do not match the data/weights they are used with."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArchitectureError(f"unknown layer kind {self.kind!r}")
        p = self.params
        if self.kind == "conv":
            for key in ("out_channels", "kernel"):
                if int(p.get(key, 0)) < 1:
                    raise ArchitectureError(f"conv needs positive {key}")
            if int(p.get("stride", 1)) < 1 or int(p.get("padding", 0)) < 0:
                raise ArchitectureError("conv needs stride >= 1 and padding >= 0")
        elif self.kind == "maxpool":
            if int(p.get("size", 2)) < 1 or int(p.get("stride", p.get("size", 2))) < 1:
                raise ArchitectureError("maxpool needs positive size and stride")
        elif self.kind == "dense":
            if int(p.get("units", 0)) < 1:
                raise ArchitectureError("dense needs positive units")
        elif self.kind == "batchnorm":
            if float(p.get("epsilon", 1e-5)) <= 0:
                raise ArchitectureError("batchnorm epsilon must be > 0")
            if not 0.0 <= float(p.get("momentum", 0.9)) < 1.0:
                raise ArchitectureError("batchnorm momentum must be in [0, 1)")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, data: dict) -> "LayerSpec":
        data = dict(data)
        return cls(data.pop("kind"), data)


def conv(out_channels: int, kernel: int = 3, stride: int = 1, padding: int = 1, bias: bool = False) -> LayerSpec:
    return LayerSpec("conv", {"out_channels": out_channels, "kernel": kernel, "stride": stride,
                              "padding": padding, "bias": bias})


def batchnorm(epsilon: float = 1e-5, momentum: float = 0.9) -> LayerSpec:
    return LayerSpec("batchnorm", {"epsilon": epsilon, "momentum": momentum})


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(size: int = 2, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool", {"size": size, "stride": stride or size})


def globalavgpool() -> LayerSpec:
    return LayerSpec("globalavgpool")


def dense(units: int, bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", {"units": units, "bias": bias})


def minibn_body(feature_dim: int = 64, widths: tuple[int, ...] = (16, 16, 16)) -> list[LayerSpec]:
    """[conv3x3-BN-ReLU-maxpool2] per width, then conv3x3(feature_dim)-BN-ReLU and global average pooling."""
    body: list[LayerSpec] = []
    for w in widths:
        body += [conv(w), batchnorm(), relu(), maxpool(2)]
    body += [conv(feature_dim), batchnorm(), relu(), globalavgpool()]
    return body


PROFILES = {
    "minibn": {"feature_dim": 64},
    "wide-1024": {"feature_dim": 1024},
}


def _layer_output_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    p = spec.params
    if spec.kind == "conv":
        if len(shape) != 3:
            raise ArchitectureError(f"conv needs a spatial input, got shape {shape}")
        h, w, _ = shape
        k, s, pad = int(p["kernel"]), int(p.get("stride", 1)), int(p.get("padding", 0))
        ho, wo = L.conv_output_size(h, k, s, pad), L.conv_output_size(w, k, s, pad)
        if ho < 1 or wo < 1:
            raise ArchitectureError(f"conv kernel {k} does not fit input {h}x{w}")
        return (ho, wo, int(p["out_channels"]))
    if spec.kind == "maxpool":
        if len(shape) != 3:
            raise ArchitectureError(f"maxpool needs a spatial input, got shape {shape}")
        h, w, c = shape
        size, s = int(p.get("size", 2)), int(p.get("stride", p.get("size", 2)))
        ho, wo = (h - size) // s + 1, (w - size) // s + 1
        if ho < 1 or wo < 1:
            raise ArchitectureError(f"maxpool {size} does not fit input {h}x{w}")
        return (ho, wo, c)
    if spec.kind == "globalavgpool":
        if len(shape) != 3:
            raise ArchitectureError("globalavgpool needs a spatial input")
        return (shape[2],)
    if spec.kind == "dense":
        if len(shape) != 1:
            raise ArchitectureError(f"dense needs a flat input, got shape {shape}")
        return (int(p["units"]),)
    return shape


def _param_shapes(spec: LayerSpec, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    p = spec.params
    if spec.kind == "conv":
        k = int(p["kernel"])
        shapes = {"weight": (k, k, in_shape[-1], int(p["out_channels"]))}
        if p.get("bias", False):
            shapes["bias"] = (int(p["out_channels"]),)
        return shapes
    if spec.kind == "dense":
        shapes = {"weight": (in_shape[-1], int(p["units"]))}
        if p.get("bias", True):
            shapes["bias"] = (int(p["units"]),)
        return shapes
    if spec.kind == "batchnorm":
        c = in_shape[-1]
        return {"gamma": (c,), "beta": (c,)}
    return {}


def _state_shapes(spec: LayerSpec, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    if spec.kind == "batchnorm":
        c = in_shape[-1]
        return {"running_mean": (c,), "running_var": (c,)}
    return {}


class NetworkModel:
    """``probs = softmax(head(body(x)))``; ``body(x)`` are the features.

    Trainable tensors live in ``params`` (body tensors prefixed ``body.<i>.``,
    head tensors ``head.``); batch-norm running statistics live in ``state``.
    Both dicts iterate in declaration order, which is also checkpoint order.
    """

    def __init__(self, body: list[LayerSpec], num_classes: int, input_shape=(64, 64, 3),
                 class_names=None, seed: int = 0, dtype=np.float32, head_bias: bool = True):
        self.body = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in body]
        for s in self.body:
            if s.kind == "softmax":
                raise ArchitectureError("softmax may only appear as the final head layer")
        self.input_shape = tuple(int(v) for v in input_shape)
        self.num_classes = int(num_classes)
        if self.num_classes < 1:
            raise ArchitectureError("num_classes must be >= 1")
        self.class_names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(num_classes))
        if len(self.class_names) != self.num_classes:
            raise ArchitectureError("class_names length must equal num_classes")
        self.head = dense(self.num_classes, bias=head_bias)
        self.dtype = np.dtype(dtype)
        self.provenance: dict[str, Any] = {}

        self._shapes = [self.input_shape]
        for spec in self.body:
            self._shapes.append(_layer_output_shape(spec, self._shapes[-1]))
        if len(self._shapes[-1]) != 1:
            raise ArchitectureError(f"body must end in a flat feature vector, got shape {self._shapes[-1]}")
        self.feature_dim = self._shapes[-1][0]

        self.params: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        for i, spec in enumerate(self.body):
            for name, shape in _param_shapes(spec, self._shapes[i]).items():
                self.params[f"body.{i}.{name}"] = _init_tensor(name, shape, rng, self.dtype)
            for name, shape in _state_shapes(spec, self._shapes[i]).items():
                fill = 0.0 if name == "running_mean" else 1.0
                self.state[f"body.{i}.{name}"] = np.full(shape, fill, dtype=self.dtype)
        self.reset_head(seed=seed + 1)

    # -- construction helpers ------------------------------------------------

    @classmethod
    def from_profile(cls, profile: str, num_classes: int, input_shape=(64, 64, 3), class_names=None,
                     seed: int = 0, feature_dim: int | None = None, dtype=np.float32) -> "NetworkModel":
        if profile not in PROFILES:
            raise ArchitectureError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        fd = feature_dim or PROFILES[profile]["feature_dim"]
        model = cls(minibn_body(fd), num_classes, input_shape, class_names, seed=seed, dtype=dtype)
        model.provenance["profile"] = profile
        return model

    def reset_head(self, seed: int = 1) -> None:
        rng = np.random.default_rng(seed)
        for key in [k for k in self.params if k.startswith("head.")]:
            del self.params[key]
        for name, shape in _param_shapes(self.head, (self.feature_dim,)).items():
            self.params[f"head.{name}"] = _init_tensor(name, shape, rng, self.dtype)

    def copy(self) -> "NetworkModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "NetworkModel":
        other = self.copy()
        other.dtype = np.dtype(dtype)
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        other.state = {k: v.astype(dtype) for k, v in self.state.items()}
        return other

    @property
    def body_keys(self) -> list[str]:
        return [k for k in self.params if k.startswith("body.")]

    @property
    def head_keys(self) -> list[str]:
        return [k for k in self.params if k.startswith("head.")]

    @property
    def layer_specs(self) -> list[LayerSpec]:
        return [*self.body, self.head, LayerSpec("softmax")]

    def num_weights(self) -> int:
        return sum(v.size for v in self.params.values()) + sum(v.size for v in self.state.values())

    def regularized_keys(self) -> list[str]:
        return [k for k in self.params if k.rsplit(".", 1)[1] in REGULARIZED]

    def l2_norm_sq(self) -> float:
        return float(sum(np.sum(self.params[k].astype(np.float64) ** 2) for k in self.regularized_keys()))

    # -- evaluation ------------------------------------------------------------

    def _check_batch(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ArchitectureError(f"batch shape {x.shape} does not match model input (N, {self.input_shape})")
        return x.astype(self.dtype, copy=False)

    def _body_forward(self, x, train: bool, update_stats: bool):
        caches = []
        stats = {}
        for i, spec in enumerate(self.body):
            p = spec.params
            if spec.kind == "conv":
                x, cache = L.conv2d_forward(x, self.params[f"body.{i}.weight"], self.params.get(f"body.{i}.bias"),
                                            int(p.get("stride", 1)), int(p.get("padding", 0)))
            elif spec.kind == "batchnorm":
                gamma, beta = self.params[f"body.{i}.gamma"], self.params[f"body.{i}.beta"]
                eps = float(p.get("epsilon", 1e-5))
                if train:
                    x, cache, mean, var = L.batchnorm_forward_train(x, gamma, beta, eps)
                    stats[i] = (mean, var)
                else:
                    x = L.batchnorm_forward_infer(x, gamma, beta, self.state[f"body.{i}.running_mean"],
                                                  self.state[f"body.{i}.running_var"], eps)
                    cache = None
            elif spec.kind == "relu":
                x, cache = L.relu_forward(x)
            elif spec.kind == "maxpool":
                size = int(p.get("size", 2))
                x, cache = L.maxpool_forward(x, size, int(p.get("stride", size)))
            elif spec.kind == "globalavgpool":
                x, cache = L.globalavgpool_forward(x)
            elif spec.kind == "dense":
                x, cache = L.dense_forward(x, self.params[f"body.{i}.weight"], self.params.get(f"body.{i}.bias"))
            caches.append(cache)
        if train and update_stats:
            for i, (mean, var) in stats.items():
                m = float(self.body[i].params.get("momentum", 0.9))
                rm, rv = f"body.{i}.running_mean", f"body.{i}.running_var"
                self.state[rm] = (m * self.state[rm] + (1 - m) * mean).astype(self.dtype)
                self.state[rv] = (m * self.state[rv] + (1 - m) * var).astype(self.dtype)
        return x, caches

    def forward(self, batch, mode: str = "infer", update_stats: bool = True):
        """Return ``(features, probs)`` for a batch of shape ``(N, H, W, C)``.

        ``mode="train"`` normalizes with batch statistics and, unless
        ``update_stats`` is false, folds them into the running statistics.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        x = self._check_batch(batch)
        features, _ = self._body_forward(x, mode == "train", update_stats)
        logits, _ = L.dense_forward(features, self.params["head.weight"], self.params.get("head.bias"))
        return features, L.softmax(logits)

    def extract_features(self, batch) -> np.ndarray:
        x = self._check_batch(batch)
        features, _ = self._body_forward(x, False, False)
        return features

    def predict_proba(self, batch) -> np.ndarray:
        return self.forward(batch, "infer")[1]

    def loss(self, batch, labels, lam: float = 0.0) -> float:
        """Train-mode objective without gradients; running statistics are left untouched."""
        x = self._check_batch(batch)
        features, _ = self._body_forward(x, True, False)
        logits, _ = L.dense_forward(features, self.params["head.weight"], self.params.get("head.bias"))
        return L.cross_entropy(L.softmax(logits), np.asarray(labels)) + lam * self.l2_norm_sq()

    def backward(self, batch, labels, lam: float = 0.0, update_stats: bool = True):
        """Loss ``mean CE + lam * ||W||^2`` in train mode and its exact gradient for every parameter."""
        x = self._check_batch(batch)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (x.shape[0],):
            raise ArchitectureError(f"labels shape {labels.shape} does not match batch size {x.shape[0]}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ArchitectureError("label outside [0, num_classes)")
        n = x.shape[0]
        features, caches = self._body_forward(x, True, update_stats)
        logits, head_cache = L.dense_forward(features, self.params["head.weight"], self.params.get("head.bias"))
        probs = L.softmax(logits)
        loss = L.cross_entropy(probs, labels) + lam * self.l2_norm_sq()

        grads: dict[str, np.ndarray] = {}
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1
        dlogits /= n
        dx, grads["head.weight"], db = L.dense_backward(dlogits, head_cache)
        if db is not None:
            grads["head.bias"] = db
        for i in range(len(self.body) - 1, -1, -1):
            spec, cache = self.body[i], caches[i]
            if dx is None:
                break
            if spec.kind == "conv":
                dx, dw, db = L.conv2d_backward(dx, cache, need_dx=i > 0)
                grads[f"body.{i}.weight"] = dw
                if db is not None:
                    grads[f"body.{i}.bias"] = db
            elif spec.kind == "batchnorm":
                dx, grads[f"body.{i}.gamma"], grads[f"body.{i}.beta"] = L.batchnorm_backward(dx, cache)
            elif spec.kind == "relu":
                dx = L.relu_backward(dx, cache)
            elif spec.kind == "maxpool":
                dx = L.maxpool_backward(dx, cache)
            elif spec.kind == "globalavgpool":
                dx = L.globalavgpool_backward(dx, cache)
            elif spec.kind == "dense":
                dx, dw, db = L.dense_backward(dx, cache)
                grads[f"body.{i}.weight"] = dw
                if db is not None:
                    grads[f"body.{i}.bias"] = db
        if lam:
            for k in self.regularized_keys():
                grads[k] = grads[k] + 2.0 * lam * self.params[k]
        grads = {k: grads[k].astype(self.dtype, copy=False) for k in self.params}
        return loss, grads


def _init_tensor(name: str, shape, rng: np.random.Generator, dtype) -> np.ndarray:
    if name == "weight":
        fan_in = int(np.prod(shape[:-1]))
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(dtype)
    if name == "gamma":
        return np.ones(shape, dtype=dtype)
    return np.zeros(shape, dtype=dtype)


def forward(model: NetworkModel, batch, mode: str = "infer"):
    return model.forward(batch, mode)


def extract_features(model: NetworkModel, batch) -> np.ndarray:
    return model.extract_features(batch)


def backward(model: NetworkModel, batch, labels, lam: float = 0.0):
    return model.backward(batch, labels, lam)
