"""Scalar losses on the margin z = y * f(x) and dataset-level metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

_TAIL = 30.0


def cross_entropy(z):
    """log(1 + exp(-z)), stable for |z| up to ~1e4 and beyond."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    hi = z > _TAIL
    lo = z < -_TAIL
    mid = ~(hi | lo)
    out[hi] = np.exp(-z[hi])
    out[lo] = -z[lo] + np.exp(z[lo])
    out[mid] = np.log1p(np.exp(-z[mid]))
    return out if out.ndim else float(out)


def cross_entropy_prime(z):
    """-1 / (1 + exp(z)), strictly inside (-1, 0) for finite z."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    e = np.exp(-z[pos])
    out[pos] = -e / (1.0 + e)
    out[~pos] = -1.0 / (1.0 + np.exp(z[~pos]))
    return out if out.ndim else float(out)


def squared_hinge(z, lam: float):
    """Return ((max(lam - z, 0))**2, -2 max(lam - z, 0))."""
    if not lam > 0:
        raise InvalidInputError(f"hinge margin lambda must be positive, got {lam}")
    gap = np.maximum(lam - np.asarray(z, dtype=np.float64), 0.0)
    value, deriv = gap * gap, -2.0 * gap
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def default_hinge_lambda(eps_target: float) -> float:
    return float(np.log(1.0 / eps_target) + 1.0)


@dataclass(frozen=True)
class DatasetMetrics:
    loss: float
    err01: float
    surrogate: float


def margin_metrics(margins: np.ndarray) -> DatasetMetrics:
    """Metrics from precomputed margins y_i f(x_i); a zero margin is an error."""
    margins = np.asarray(margins, dtype=np.float64)
    if margins.size == 0:
        raise InvalidInputError("empty dataset")
    return DatasetMetrics(
        loss=float(np.mean(cross_entropy(margins))),
        err01=float(np.mean(margins <= 0.0)),
        surrogate=float(-np.mean(cross_entropy_prime(margins))),
    )


def dataset_metrics(weights, data) -> DatasetMetrics:
    from .network import scores

    if data.n == 0:
        raise InvalidInputError("empty dataset")
    return margin_metrics(data.y * scores(weights, data.X))
