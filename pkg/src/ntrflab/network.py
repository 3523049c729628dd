"""Deep fully-connected ReLU network without biases.

    f_W(x) = sqrt(m) * W_L relu(W_{L-1} ... relu(W_1 x) ...)

with W_1 of shape (m, d), W_2..W_{L-1} of shape (m, m) and W_L of shape (1, m).
Everything is dense float64 numpy. The batched routines (``forward_batch``,
``backward_batch``, ``jvp_batch``, ``per_example_gradients``) do the actual
work; the single-example ``forward`` / ``network_gradient`` pair wraps them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .losses import cross_entropy, cross_entropy_prime
from .rng import Stream


@dataclass(frozen=True)
class NetworkShape:
    d: int
    m: int
    L: int

    def __post_init__(self):
        if self.d < 1 or self.m < 1 or self.L < 2:
            raise InvalidInputError(f"invalid network shape d={self.d} m={self.m} L={self.L}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        shapes = [(self.m, self.d)]
        shapes += [(self.m, self.m)] * (self.L - 2)
        shapes.append((1, self.m))
        return shapes

    @property
    def n_params(self) -> int:
        return self.m * self.d + (self.L - 2) * self.m * self.m + self.m


class WeightStack:
    """Ordered per-layer matrices. Also used for gradients and displacements,
    which have the same shapes (``GradientStack`` is an alias)."""

    __slots__ = ("layers",)

    def __init__(self, layers: Sequence[np.ndarray]):
        self.layers = [np.asarray(w, dtype=np.float64) for w in layers]
        if len(self.layers) < 2:
            raise InvalidInputError("a weight stack needs at least 2 layers")
        d = self.layers[0].shape[1]
        m = self.layers[0].shape[0]
        expected = NetworkShape(d, m, len(self.layers)).layer_shapes()
        got = [w.shape for w in self.layers]
        if got != expected:
            raise InvalidInputError(f"layer shapes {got} do not match {expected}")

    @property
    def shape(self) -> NetworkShape:
        m, d = self.layers[0].shape
        return NetworkShape(d, m, len(self.layers))

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, l):
        return self.layers[l]

    def __iter__(self):
        return iter(self.layers)

    def copy(self) -> "WeightStack":
        return WeightStack([w.copy() for w in self.layers])

    def __add__(self, other: "WeightStack") -> "WeightStack":
        return WeightStack([a + b for a, b in zip(self.layers, other.layers)])

    def __sub__(self, other: "WeightStack") -> "WeightStack":
        return WeightStack([a - b for a, b in zip(self.layers, other.layers)])

    def scaled(self, c: float) -> "WeightStack":
        return WeightStack([c * w for w in self.layers])

    def frob_norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(w) for w in self.layers])

    def sq_norm(self) -> float:
        return float(sum(np.sum(w * w) for w in self.layers))

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() for w in self.layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.layers])

    @classmethod
    def from_flat(cls, shape: NetworkShape, vec: np.ndarray) -> "WeightStack":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != shape.n_params:
            raise InvalidInputError(f"flat vector has {vec.size} entries, expected {shape.n_params}")
        layers, k = [], 0
        for r, c in shape.layer_shapes():
            layers.append(vec[k:k + r * c].reshape(r, c).copy())
            k += r * c
        return cls(layers)

    @classmethod
    def zeros(cls, shape: NetworkShape) -> "WeightStack":
        return cls([np.zeros(s) for s in shape.layer_shapes()])

    def equals(self, other: "WeightStack") -> bool:
        return len(self) == len(other) and all(
            np.array_equal(a, b) for a, b in zip(self.layers, other.layers))


GradientStack = WeightStack


def layer_offsets(shape: NetworkShape) -> list[tuple[int, int]]:
    """(start, stop) of each layer inside a flattened stack."""
    out, k = [], 0
    for r, c in shape.layer_shapes():
        out.append((k, k + r * c))
        k += r * c
    return out


def init_weights(shape: NetworkShape, seed: int) -> WeightStack:
    """Gaussian init: hidden layers N(0, 2/m), output layer N(0, 1/m)."""
    stream = Stream(seed, 0x1A17)
    layers = []
    for l, (r, c) in enumerate(shape.layer_shapes()):
        var = 1.0 / shape.m if l == shape.L - 1 else 2.0 / shape.m
        layers.append(stream.normal((r, c)) * np.sqrt(var))
    return WeightStack(layers)


@dataclass
class ActivationCache:
    """Activations of one input. ``pre[l]``/``post[l]`` belong to hidden layer l+1."""

    x: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    score: float


@dataclass
class BatchCache:
    """Activations of n inputs; ``post[0]`` is the input matrix itself, so
    ``post[l]`` is what layer l+1 consumes."""

    pre: list[np.ndarray]
    post: list[np.ndarray]
    scores: np.ndarray


def _check_inputs(weights: WeightStack, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != weights.shape.d:
        raise InvalidInputError(
            f"input of shape {X.shape} does not match input dimension d={weights.shape.d}")
    return X


def forward_batch(weights: WeightStack, X: np.ndarray) -> BatchCache:
    X = _check_inputs(weights, X)
    m = weights.shape.m
    pre, post = [], [X]
    h = X
    for W in weights.layers[:-1]:
        z = h @ W.T
        h = np.maximum(z, 0.0)
        pre.append(z)
        post.append(h)
    scores = np.sqrt(m) * (h @ weights.layers[-1][0])
    return BatchCache(pre, post, scores)


def scores(weights: WeightStack, X: np.ndarray) -> np.ndarray:
    return forward_batch(weights, X).scores


def _backprop_signals(weights: WeightStack, cache: BatchCache) -> list[np.ndarray]:
    """Per-example d f / d(pre-activation) for every hidden layer, shape (n, m)."""
    m = weights.shape.m
    L = len(weights)
    sig = [None] * (L - 1)
    g = np.sqrt(m) * weights.layers[-1][0] * (cache.pre[-1] > 0.0)
    sig[-1] = g
    for l in range(L - 2, 0, -1):
        g = (g @ weights.layers[l]) * (cache.pre[l - 1] > 0.0)
        sig[l - 1] = g
    return sig


def backward_batch(weights: WeightStack, cache: BatchCache, coef: np.ndarray) -> GradientStack:
    """sum_i coef_i * grad_W f(x_i), accumulated in dataset order by BLAS."""
    coef = np.asarray(coef, dtype=np.float64)
    m = weights.shape.m
    sig = _backprop_signals(weights, cache)
    grads = [(sig[l] * coef[:, None]).T @ cache.post[l] for l in range(len(weights) - 1)]
    grads.append(np.sqrt(m) * (coef @ cache.post[-1])[None, :])
    return WeightStack(grads)


def per_example_gradients(weights: WeightStack, X: np.ndarray, cache: BatchCache | None = None):
    """Return (scores, G) where row i of G is the flattened grad_W f(x_i)."""
    if cache is None:
        cache = forward_batch(weights, X)
    n = cache.scores.shape[0]
    m = weights.shape.m
    sig = _backprop_signals(weights, cache)
    G = np.empty((n, weights.shape.n_params))
    for l, (a, b) in enumerate(layer_offsets(weights.shape)):
        if l == len(weights) - 1:
            G[:, a:b] = np.sqrt(m) * cache.post[-1]
        else:
            G[:, a:b] = (sig[l][:, :, None] * cache.post[l][:, None, :]).reshape(n, -1)
    return cache.scores, G


def per_example_layer_norms(weights: WeightStack, cache: BatchCache) -> np.ndarray:
    """||grad_{W_l} f(x_i)||_F as an (n, L) array; each layer gradient is an
    outer product, so its norm factorises."""
    m = weights.shape.m
    sig = _backprop_signals(weights, cache)
    cols = [np.linalg.norm(sig[l], axis=1) * np.linalg.norm(cache.post[l], axis=1)
            for l in range(len(weights) - 1)]
    cols.append(np.sqrt(m) * np.linalg.norm(cache.post[-1], axis=1))
    return np.stack(cols, axis=1)


def jvp_batch(weights: WeightStack, cache: BatchCache, direction: WeightStack) -> np.ndarray:
    """<grad_W f(x_i), direction> for every row, by forward-mode with the
    activation pattern frozen at ``weights``."""
    m = weights.shape.m
    X = cache.post[0]
    dh = (X @ direction.layers[0].T) * (cache.pre[0] > 0.0)
    for l in range(1, len(weights) - 1):
        dz = cache.post[l] @ direction.layers[l].T + dh @ weights.layers[l].T
        dh = dz * (cache.pre[l] > 0.0)
    return np.sqrt(m) * (cache.post[-1] @ direction.layers[-1][0] + dh @ weights.layers[-1][0])


def forward(weights: WeightStack, x: np.ndarray) -> ActivationCache:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError(f"expected a vector input, got shape {x.shape}")
    bc = forward_batch(weights, x[None, :])
    return ActivationCache(x=x, pre=[z[0] for z in bc.pre], post=[h[0] for h in bc.post[1:]],
                           score=float(bc.scores[0]))


def network_gradient(weights: WeightStack, cache: ActivationCache) -> GradientStack:
    """grad_W f_W(x) for the input recorded in ``cache``. relu'(0) is taken as 0."""
    if len(cache.pre) != len(weights) - 1 or any(
            z.shape != (weights.shape.m,) for z in cache.pre):
        raise InvalidInputError("activation cache does not match the weight stack")
    bc = BatchCache(pre=[z[None, :] for z in cache.pre],
                    post=[cache.x[None, :]] + [h[None, :] for h in cache.post],
                    scores=np.array([cache.score]))
    return backward_batch(weights, bc, np.ones(1))


def loss_and_gradient(weights: WeightStack, data) -> tuple[float, GradientStack]:
    """Average cross-entropy over ``data`` and its gradient in W."""
    if data.n == 0:
        raise InvalidInputError("empty dataset")
    cache = forward_batch(weights, data.X)
    z = data.y * cache.scores
    loss = float(np.mean(cross_entropy(z)))
    coef = cross_entropy_prime(z) * data.y / data.n
    return loss, backward_batch(weights, cache, coef)
