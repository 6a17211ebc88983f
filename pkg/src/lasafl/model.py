"""Tiny differentiable classifiers with hand-written gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .update import Layout, LayeredUpdate, make_layout

ARCHITECTURES = ("logreg", "mlp2")


@dataclass(frozen=True)
class Architecture:
    kind: str
    input_dim: int
    num_classes: int
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")

    def layout(self) -> Layout:
        i, c, h = self.input_dim, self.num_classes, self.hidden
        if self.kind == "logreg":
            return make_layout([("linear.weight", c * i), ("linear.bias", c)])
        return make_layout(
            [("fc1.weight", h * i), ("fc1.bias", h), ("fc2.weight", c * h), ("fc2.bias", c)]
        )


@dataclass(frozen=True)
class ModelState:
    arch: Architecture
    params: LayeredUpdate

    def __post_init__(self):
        if self.params.layout != self.arch.layout():
            raise ValueError("parameter layout does not match the architecture")

    @classmethod
    def init(cls, arch: Architecture, seed: int = 0) -> "ModelState":
        layout = arch.layout()
        if arch.kind == "logreg":
            return cls(arch, LayeredUpdate(np.zeros(sum(s.length for s in layout)), layout))
        rng = np.random.default_rng(seed)
        i, h, c = arch.input_dim, arch.hidden, arch.num_classes
        parts = [
            rng.uniform(-1, 1, h * i) / np.sqrt(i),
            np.zeros(h),
            rng.uniform(-1, 1, c * h) / np.sqrt(h),
            np.zeros(c),
        ]
        return cls(arch, LayeredUpdate(np.concatenate(parts), layout))

    def with_params(self, values) -> "ModelState":
        return ModelState(self.arch, LayeredUpdate(values, self.params.layout))


def _unpack(arch: Architecture, theta: np.ndarray):
    i, c, h = arch.input_dim, arch.num_classes, arch.hidden
    if arch.kind == "logreg":
        return theta[: c * i].reshape(c, i), theta[c * i:]
    o = 0
    w1 = theta[o:o + h * i].reshape(h, i); o += h * i
    b1 = theta[o:o + h]; o += h
    w2 = theta[o:o + c * h].reshape(c, h); o += c * h
    b2 = theta[o:o + c]
    return w1, b1, w2, b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_batch(arch: Architecture, x: np.ndarray, y: np.ndarray):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if x.shape[0] == 0:
        raise ValueError("empty minibatch")
    if x.shape[1] != arch.input_dim:
        raise ValueError(f"feature dim {x.shape[1]} does not match model input {arch.input_dim}")
    if x.shape[0] != y.shape[0]:
        raise ValueError("features and labels differ in length")
    return x, y


def logits(model: ModelState, x) -> np.ndarray:
    arch = model.arch
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if arch.kind == "logreg":
        w, b = _unpack(arch, model.params.values)
        return x @ w.T + b
    w1, b1, w2, b2 = _unpack(arch, model.params.values)
    return np.maximum(x @ w1.T + b1, 0.0) @ w2.T + b2


def loss_and_grad(arch: Architecture, theta: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient as a flat array."""
    m = x.shape[0]
    if arch.kind == "logreg":
        w, b = _unpack(arch, theta)
        z = x @ w.T + b
        logp = _log_softmax(z)
        loss = -logp[np.arange(m), y].mean()
        dz = np.exp(logp)
        dz[np.arange(m), y] -= 1.0
        dz /= m
        return float(loss), np.concatenate([(dz.T @ x).ravel(), dz.sum(axis=0)])
    w1, b1, w2, b2 = _unpack(arch, theta)
    pre = x @ w1.T + b1
    hid = np.maximum(pre, 0.0)
    z = hid @ w2.T + b2
    logp = _log_softmax(z)
    loss = -logp[np.arange(m), y].mean()
    dz = np.exp(logp)
    dz[np.arange(m), y] -= 1.0
    dz /= m
    dw2 = dz.T @ hid
    db2 = dz.sum(axis=0)
    dpre = (dz @ w2) * (pre > 0)
    dw1 = dpre.T @ x
    db1 = dpre.sum(axis=0)
    return float(loss), np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])


def forward_backward(model: ModelState, x, y) -> tuple[float, LayeredUpdate]:
    x, y = _check_batch(model.arch, x, y)
    loss, grad = loss_and_grad(model.arch, model.params.values, x, y)
    return loss, LayeredUpdate(grad, model.params.layout)


def evaluate(model: ModelState, x, y) -> tuple[float, float]:
    """Return ``(accuracy, mean cross-entropy)`` on a labelled set."""
    x, y = _check_batch(model.arch, x, y)
    z = logits(model, x)
    logp = _log_softmax(z)
    acc = float((z.argmax(axis=1) == y).mean())
    return acc, float(-logp[np.arange(len(y)), y].mean())
