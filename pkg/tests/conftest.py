import numpy as np
import pytest

from ntrflab.data import LabeledDataset
from ntrflab.network import NetworkShape, WeightStack, forward, init_weights


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def random_dataset(rng, n, d):
    return LabeledDataset(unit_rows(rng, n, d), rng.choice([-1, 1], size=n))


def central_difference(fn, w: WeightStack, h=1e-5) -> WeightStack:
    """Entrywise central differences of a scalar function of a weight stack."""
    out = []
    for l, layer in enumerate(w.layers):
        g = np.zeros_like(layer)
        for idx in np.ndindex(layer.shape):
            plus = [a.copy() for a in w.layers]
            minus = [a.copy() for a in w.layers]
            plus[l][idx] += h
            minus[l][idx] -= h
            g[idx] = (fn(WeightStack(plus)) - fn(WeightStack(minus))) / (2 * h)
        out.append(g)
    return WeightStack(out)


def max_rel_error(a: WeightStack, b: WeightStack, floor=1e-8) -> float:
    va, vb = a.flatten(), b.flatten()
    scale = max(np.abs(vb).max(), floor)
    return float(np.abs(va - vb).max() / scale)


def score_fn(x):
    return lambda w: forward(w, x).score


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_net():
    return init_weights(NetworkShape(3, 4, 3), seed=1)
