"""Small feed-forward classifier with hand-written backpropagation.

All arrays are float64 and batched along the first axis. Parameters are
immutable: every update returns a new :class:`ModelParams`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from sebra.errors import ConfigError, NumericalError

PROB_FLOOR = 1e-12


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0).astype(z.dtype)


def _tanh_grad(z, a):
    return 1.0 - a * a


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


class Layer(NamedTuple):
    W: np.ndarray
    b: np.ndarray


@dataclass(frozen=True, eq=False)
class ModelParams:
    layers: tuple[Layer, ...]
    activation: str = "relu"

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].W.shape[1]] + [layer.W.shape[0] for layer in self.layers]

    def equals(self, other: "ModelParams") -> bool:
        return self.activation == other.activation and all(
            np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)
            for a, b in zip(self.layers, other.layers, strict=True)
        )

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "activation": self.activation,
            "layers": [{"W": layer.W.tolist(), "b": layer.b.tolist()} for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        layers = tuple(
            Layer(np.asarray(l["W"], dtype=float), np.asarray(l["b"], dtype=float)) for l in d["layers"]
        )
        params = cls(layers, d["activation"])
        if params.dims != list(d["dims"]):
            raise ConfigError("checkpoint dims do not match weight shapes")
        return params


Grads = tuple[Layer, ...]


class Prediction(NamedTuple):
    logits: np.ndarray
    probs: np.ndarray
    p_y: np.ndarray | None


class Cache(NamedTuple):
    pre: list[np.ndarray]  # z_1 .. z_L
    post: list[np.ndarray]  # a_0 = x, a_1 .. a_{L-1}
    probs: np.ndarray


def init(dims: Sequence[int], activation: str = "relu", seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ConfigError(f"invalid layer dims {dims}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(Layer(rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out)))
    return ModelParams(tuple(layers), activation)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    if np.any(p < PROB_FLOOR):
        p = np.maximum(p, PROB_FLOOR)
        p /= p.sum(axis=-1, keepdims=True)
    return p


def forward(params: ModelParams, X: np.ndarray, y: np.ndarray | None = None) -> tuple[Prediction, Cache]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != params.dims[0]:
        raise ConfigError(f"input width {X.shape[1]} != model input dim {params.dims[0]}")
    if not np.all(np.isfinite(X)):
        raise NumericalError("non-finite input")
    act, _ = ACTIVATIONS[params.activation]
    a = X
    pre, post = [], [X]
    for i, layer in enumerate(params.layers):
        z = a @ layer.W.T + layer.b
        pre.append(z)
        if i < len(params.layers) - 1:
            a = act(z)
            post.append(a)
    logits = pre[-1]
    probs = softmax(logits)
    p_y = None if y is None else probs[np.arange(len(probs)), np.asarray(y)]
    return Prediction(logits, probs, p_y), Cache(pre, post, probs)


def predict_proba(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return forward(params, X)[0].probs


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return np.argmax(forward(params, X)[0].logits, axis=1)


def ce_loss(probs: np.ndarray, y) -> np.ndarray:
    """Per-sample cross entropy ``-ln p_y`` (floored to stay finite)."""
    probs = np.atleast_2d(probs)
    y = np.atleast_1d(np.asarray(y))
    p_y = probs[np.arange(len(probs)), y]
    return -np.log(np.maximum(p_y, PROB_FLOOR))


def embed(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Penultimate-layer activation ``z``."""
    return forward(params, X)[1].post[-1]


def backward(
    params: ModelParams,
    cache: Cache,
    y: np.ndarray | None,
    weights: np.ndarray | None = None,
    dembed: np.ndarray | None = None,
) -> Grads:
    """Gradient of ``sum_i w_i * CE_i / B`` plus an optional upstream term.

    ``dembed`` is the gradient of an extra loss with respect to the
    penultimate activation; it is added as-is, without rescaling.
    """
    B = cache.probs.shape[0]
    if y is not None:
        dlogits = cache.probs.copy()
        dlogits[np.arange(B), np.asarray(y)] -= 1.0
        w = np.ones(B) if weights is None else np.asarray(weights, dtype=float)
        dlogits *= (w / B)[:, None]
    else:
        dlogits = np.zeros_like(cache.probs)

    _, act_grad = ACTIVATIONS[params.activation]
    L = len(params.layers)
    grads: list[Layer] = [None] * L  # type: ignore[list-item]
    delta = dlogits
    for i in range(L - 1, -1, -1):
        a_in = cache.post[i]
        grads[i] = Layer(delta.T @ a_in, delta.sum(axis=0))
        if i == 0:
            break
        da = delta @ params.layers[i].W
        if i == L - 1 and dembed is not None:
            da = da + dembed
        delta = da * act_grad(cache.pre[i - 1], cache.post[i])
    return tuple(grads)


def loss_and_grads(params, X, y, weights=None):
    pred, cache = forward(params, X, y)
    losses = ce_loss(pred.probs, y)
    w = np.ones(len(losses)) if weights is None else weights
    return float(np.mean(w * losses)), backward(params, cache, y, weights)


def _check_finite(grads: Grads) -> None:
    for g in grads:
        if not (np.all(np.isfinite(g.W)) and np.all(np.isfinite(g.b))):
            raise NumericalError("non-finite gradient")


def sgd_step(params: ModelParams, grads: Grads, lr: float) -> ModelParams:
    _check_finite(grads)
    layers = tuple(Layer(p.W - lr * g.W, p.b - lr * g.b) for p, g in zip(params.layers, grads))
    return ModelParams(layers, params.activation)


def weighted_sgd_step(
    params: ModelParams, per_sample_grads: Sequence[Grads], u: Sequence[float], lr: float
) -> ModelParams:
    """theta <- theta - lr * sum_i u_i g_i / B, accumulated in index order."""
    if len(per_sample_grads) != len(u):
        raise ConfigError("one weight per gradient required")
    B = len(u)
    if B == 0:
        return params
    total = [Layer(np.zeros_like(l.W), np.zeros_like(l.b)) for l in params.layers]
    for g, ui in zip(per_sample_grads, u):
        for j, gl in enumerate(g):
            total[j].W[...] += ui * gl.W
            total[j].b[...] += ui * gl.b
    mean = tuple(Layer(t.W / B, t.b / B) for t in total)
    return sgd_step(params, mean, lr)


def per_sample_grads(params: ModelParams, X: np.ndarray, y: np.ndarray) -> list[Grads]:
    out = []
    for i in range(len(X)):
        _, cache = forward(params, X[i : i + 1], y[i : i + 1])
        out.append(backward(params, cache, y[i : i + 1]))
    return out


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(params.to_dict(), fh)
        fh.write("\n")


def load_checkpoint(path: str | Path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        return ModelParams.from_dict(json.load(fh))
