"""Minimal dense-network kernel: layers, loss, optimizer.

Everything is plain numpy. Layers cache what their backward pass needs in
``forward(train=True)``; calling ``backward`` without a cached forward raises
``StateError``. Parameters live in per-layer dicts keyed by short names so
optimizers and checkpoints can address them uniformly.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    BatchTooSmallError,
    DimensionError,
    InvalidLabelError,
    InvalidParameterError,
    StateError,
)

F32 = np.float32
F64 = np.float64


def require_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
    return arr


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=F32) -> np.ndarray:
    """Zero-mean uniform init with limit sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class Dense:
    """Affine layer y = act(x W + b), activation in {"relu", "none"}."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "none",
                 rng: np.random.Generator | None = None, dtype=F32):
        if in_dim < 1 or out_dim < 1:
            raise InvalidParameterError(f"dense dims must be >= 1, got {in_dim}x{out_dim}")
        if activation not in ("relu", "none"):
            raise InvalidParameterError(f"unsupported activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.W = glorot_uniform(rng, in_dim, out_dim, dtype)
        self.b = np.zeros(out_dim, dtype=dtype)
        self._x = None
        self._pre = None
        self.dW = None
        self.db = None

    def forward(self, x: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                f"dense expects [B x {self.in_dim}], got {list(x.shape)}")
        pre = x @ self.W + self.b
        if train:
            self._x = x
            self._pre = pre
        if self.activation == "relu":
            return np.maximum(pre, 0)
        return pre

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("dense backward before forward")
        if self.activation == "relu":
            grad = grad * (self._pre > 0)
        self.dW = self._x.T @ grad
        self.db = grad.sum(axis=0)
        return grad @ self.W.T

    def params(self):
        return {"W": self.W, "b": self.b}

    def grads(self):
        return {"W": self.dW, "b": self.db}


class BatchNorm:
    """Per-feature batch normalization for [B x d] inputs.

    Train mode standardizes with batch statistics and updates the running
    averages as running = momentum * running + (1 - momentum) * batch.
    Infer mode uses the running statistics only.
    """

    def __init__(self, dim: int, epsilon: float = 1e-3, momentum: float = 0.99, dtype=F32):
        if epsilon <= 0:
            raise InvalidParameterError("epsilon must be positive")
        if not 0.0 < momentum < 1.0:
            raise InvalidParameterError("momentum must be in (0, 1)")
        self.dim = dim
        self.epsilon = epsilon
        self.momentum = momentum
        self.gamma = np.ones(dim, dtype=dtype)
        self.beta = np.zeros(dim, dtype=dtype)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self._cache = None
        self.dgamma = None
        self.dbeta = None

    def forward(self, x: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"batchnorm expects [B x {self.dim}], got {list(x.shape)}")
        if train:
            if x.shape[0] < 2:
                raise BatchTooSmallError(
                    f"batchnorm train mode needs B >= 2, got B={x.shape[0]}")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            std = np.sqrt(var + self.epsilon)
            xhat = (x - mean) / std
            self._cache = (xhat, std)
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(x.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(x.dtype)
        else:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.epsilon)
        return self.gamma * xhat + self.beta

    def backward(self, grad: np.ndarray) -> np.ndarray:
        # Full batch-statistics chain rule, compact form:
        # dx = (gamma/std) * (g - mean(g) - xhat * mean(g*xhat)) over the batch.
        if self._cache is None:
            raise StateError("batchnorm backward before train-mode forward")
        xhat, std = self._cache
        n = grad.shape[0]
        self.dgamma = (grad * xhat).sum(axis=0)
        self.dbeta = grad.sum(axis=0)
        g = grad * self.gamma
        return (g - g.mean(axis=0) - xhat * (g * xhat).sum(axis=0) / n) / std

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.dgamma, "beta": self.dbeta}

    def state(self):
        """Non-trainable tensors that still belong in a checkpoint."""
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Dropout:
    """Inverted dropout: train mode zeroes with probability ``rate`` and
    scales survivors by 1/(1-rate); infer mode is the identity."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise InvalidParameterError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._mask = None

    def forward(self, x: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if not train or self.rate == 0.0:
            self._mask = None if not train else np.ones_like(x)
            return x
        if rng is None:
            raise StateError("dropout train mode needs an rng")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / keep
        self._mask = mask
        return x * mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise StateError("dropout backward before train-mode forward")
        return grad * self._mask

    def params(self):
        return {}

    def grads(self):
        return {}


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"softmax expects [B x C] with C >= 2, got {list(logits.shape)}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels: np.ndarray, n_classes: int, dtype=F32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise InvalidLabelError(f"labels outside [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def cross_entropy(probs: np.ndarray, labels_onehot: np.ndarray) -> float:
    """Mean over the batch of -log p[true], with p clipped to [1e-12, 1]."""
    if probs.shape != labels_onehot.shape:
        raise DimensionError("probs and labels must share shape")
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-4):
        raise InvalidParameterError("probability rows must sum to 1 within 1e-4")
    is_onehot = np.all((labels_onehot == 0) | (labels_onehot == 1)) and np.all(
        labels_onehot.sum(axis=1) == 1)
    if not is_onehot:
        raise InvalidLabelError("label rows must be one-hot")
    p_true = (probs * labels_onehot).sum(axis=1)
    return float(-np.log(np.clip(p_true, 1e-12, 1.0)).mean())


class LayerStack:
    """Ordered layers followed by an implicit softmax classifier head."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def predict_probs(self, x: np.ndarray) -> np.ndarray:
        """Inference probabilities, computed one row at a time.

        Per-row evaluation keeps results bitwise independent of how callers
        batch their inputs (BLAS matmul reduction order varies with shape).
        """
        if x.ndim != 2:
            raise DimensionError(f"expected [B x D] input, got {list(x.shape)}")
        rows = [softmax(self.forward(x[i:i + 1], train=False)) for i in range(x.shape[0])]
        return np.concatenate(rows, axis=0)

    def loss_and_backward(self, x: np.ndarray, labels_onehot: np.ndarray,
                          rng: np.random.Generator) -> float:
        """Train-mode forward, softmax cross-entropy, full backward pass.

        The softmax+CE gradient is fused: dlogits = (probs - onehot) / B.
        """
        logits = self.forward(x, train=True, rng=rng)
        probs = softmax(logits)
        loss = cross_entropy(probs, labels_onehot)
        grad = (probs - labels_onehot) / x.shape[0]
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return loss

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"layer{i}.{k}"] = v
        return out

    def grads(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.grads().items():
                out[f"layer{i}.{k}"] = v
        return out

    def set_param(self, name: str, value: np.ndarray):
        idx, key = name.split(".", 1)
        layer = self.layers[int(idx.removeprefix("layer"))]
        getattr(layer, key)  # attribute must exist
        setattr(layer, key, value)

    def tensors(self):
        """All checkpoint-worthy tensors: parameters plus BN running stats."""
        out = dict(self.params())
        for i, layer in enumerate(self.layers):
            if hasattr(layer, "state"):
                for k, v in layer.state().items():
                    out[f"layer{i}.{k}"] = v
        return out

    def load_tensors(self, tensors: dict):
        for name, value in tensors.items():
            idx, key = name.split(".", 1)
            layer = self.layers[int(idx.removeprefix("layer"))]
            current = getattr(layer, key)
            if current.shape != value.shape:
                raise DimensionError(
                    f"checkpoint tensor {name} has shape {value.shape}, expected {current.shape}")
            setattr(layer, key, value.astype(current.dtype))


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise InvalidParameterError("lr must be positive")
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise InvalidParameterError("betas must be in (0, 1)")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            if g is None:
                raise StateError(f"no gradient for parameter {name}")
            if g.shape != p.shape:
                raise DimensionError(f"gradient shape mismatch for {name}")
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
