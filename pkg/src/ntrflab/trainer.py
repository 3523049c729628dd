"""Full-batch gradient descent and single-pass online SGD from a given init."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import DivergenceError, InvalidInputError
from .losses import cross_entropy, cross_entropy_prime, margin_metrics
from .network import NetworkShape, WeightStack, backward_batch, forward_batch
from .rng import Stream

C_ETA = 0.5


@dataclass
class TrainConfig:
    eta: float
    T: int
    seed: int = 0
    snapshot_every: int | None = None   # None -> ceil(T / 50); 0 -> never
    target_loss: float = 0.0
    require_zero_error: bool = False    # early stop also needs err01 == 0

    def __post_init__(self):
        if not self.eta >= 0 or not math.isfinite(self.eta):
            raise InvalidInputError(f"step size must be finite and >= 0, got {self.eta}")
        if self.T < 1:
            raise InvalidInputError(f"iteration budget T must be >= 1, got {self.T}")
        if self.target_loss < 0:
            raise InvalidInputError("target_loss must be >= 0")

    @property
    def snapshot_period(self) -> int:
        if self.snapshot_every is None:
            return max(1, math.ceil(self.T / 50))
        return self.snapshot_every


@dataclass
class Trajectory:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    err01: list[float] = field(default_factory=list)
    surrogate: list[float] = field(default_factory=list)
    dist: list[list[float]] = field(default_factory=list)
    best_loss: list[float] = field(default_factory=list)
    snapshots: dict[int, WeightStack] = field(default_factory=dict)
    final: WeightStack | None = None
    best_step: int = 0
    stopped_early: bool = False

    def record(self, step, metrics, dist):
        if self.steps and step <= self.steps[-1]:
            raise ValueError("trajectory steps must be strictly increasing")
        best = min(self.best_loss[-1], metrics.loss) if self.best_loss else metrics.loss
        if not self.best_loss or metrics.loss < self.best_loss[-1]:
            self.best_step = step
        self.steps.append(step)
        self.loss.append(metrics.loss)
        self.err01.append(metrics.err01)
        self.surrogate.append(metrics.surrogate)
        self.dist.append([float(v) for v in dist])
        self.best_loss.append(best)

    @property
    def last_step(self) -> int:
        return self.steps[-1]

    def max_dist(self) -> float:
        return max(max(d) for d in self.dist)

    def rows(self):
        for k, step in enumerate(self.steps):
            yield {"step": step, "loss": self.loss[k], "err01": self.err01[k],
                   "surrogate": self.surrogate[k], "dist": self.dist[k],
                   "best_loss": self.best_loss[k]}

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows():
                fh.write(json.dumps(row) + "\n")
        return path

    def save_snapshots(self, path) -> Path:
        arrays, steps = {}, sorted(self.snapshots)
        for s in steps:
            for l, w in enumerate(self.snapshots[s]):
                arrays[f"s{s}_W{l + 1}"] = w
        shape = self.snapshots[steps[0]].shape if steps else None
        meta = {"steps": steps}
        if shape is not None:
            meta.update(d=shape.d, m=shape.m, L=shape.L)
        return container.save(path, "snapshots", arrays, meta)


def load_snapshots(path) -> dict[int, WeightStack]:
    arrays, meta = container.load(path, "snapshots")
    L = meta.get("L", 0)
    return {s: WeightStack([arrays[f"s{s}_W{l + 1}"] for l in range(L)]) for s in meta["steps"]}


def _distances(w: WeightStack, w0: WeightStack) -> np.ndarray:
    return np.array([np.linalg.norm(a - b) for a, b in zip(w.layers, w0.layers)])


# overflow is caught by the finiteness checks and reported as divergence
@np.errstate(over="ignore", invalid="ignore")
def gd_train(w0: WeightStack, data, cfg: TrainConfig) -> Trajectory:
    """W(t) = W(t-1) - eta * grad L_S(W(t-1)) for t = 1..T.

    Metrics of every iterate are recorded; training stops early once the
    loss is at most ``cfg.target_loss`` (and, if requested, err01 is 0).
    """
    if data.n == 0:
        raise InvalidInputError("empty dataset")
    if data.d != w0.shape.d:
        raise InvalidInputError("dataset dimension does not match the network")
    y = data.y.astype(np.float64)
    period = cfg.snapshot_period
    traj = Trajectory()
    w = w0.copy()
    for t in range(cfg.T + 1):
        cache = forward_batch(w, data.X)
        z = y * cache.scores
        if not np.isfinite(z).all():
            raise DivergenceError(f"non-finite network output at step {t}",
                                  last_valid_step=t - 1)
        metrics = margin_metrics(z)
        traj.record(t, metrics, _distances(w, w0))
        done = metrics.loss <= cfg.target_loss and (
            not cfg.require_zero_error or metrics.err01 == 0.0)
        if period and (t % period == 0 or done or t == cfg.T):
            traj.snapshots[t] = w.copy()
        if done:
            traj.stopped_early = t < cfg.T
            break
        if t == cfg.T:
            break
        grad = backward_batch(w, cache, cross_entropy_prime(z) * y / data.n)
        w = WeightStack([a - cfg.eta * g for a, g in zip(w.layers, grad.layers)])
        if not w.is_finite():
            raise DivergenceError(f"non-finite weights after step {t + 1}", last_valid_step=t)
    traj.final = w
    return traj


def draw_index(seed: int, n: int) -> int:
    """Uniform index in range(n) for the returned SGD iterate."""
    return int(Stream(seed, 0x5CD).integers(0, n))


@np.errstate(over="ignore", invalid="ignore")
def sgd_train(w0: WeightStack, stream, cfg: TrainConfig) -> tuple[Trajectory, WeightStack]:
    """One update per streamed example, in order; returns the trajectory and
    an iterate drawn uniformly from W(0), ..., W(n-1).

    Recorded metrics at step i-1 are the online loss of example i evaluated
    at W(i-1), before it is used for the update.
    """
    n = stream.n
    if n == 0:
        raise InvalidInputError("empty example stream")
    if stream.d != w0.shape.d:
        raise InvalidInputError("stream dimension does not match the network")
    pick = draw_index(cfg.seed, n)
    period = cfg.snapshot_period
    traj = Trajectory()
    w = w0.copy()
    chosen = None
    for i in range(n):
        if i == pick:
            chosen = w.copy()
        cache = forward_batch(w, stream.X[i:i + 1])
        yi = float(stream.y[i])
        z = yi * cache.scores
        if not np.isfinite(z).all():
            raise DivergenceError(f"non-finite network output at step {i}", last_valid_step=i - 1)
        traj.record(i, margin_metrics(z), _distances(w, w0))
        if period and i % period == 0:
            traj.snapshots[i] = w.copy()
        grad = backward_batch(w, cache, cross_entropy_prime(z) * yi)
        w = WeightStack([a - cfg.eta * g for a, g in zip(w.layers, grad.layers)])
        if not w.is_finite():
            raise DivergenceError(f"non-finite weights after step {i + 1}", last_valid_step=i)
    if period:
        traj.snapshots[n] = w.copy()
    traj.final = w
    return traj, chosen


def default_step_size(shape: NetworkShape, mode: str = "GD", *, R: float | None = None,
                      n: int | None = None, eps_ntrf: float | None = None,
                      c_eta: float = C_ETA) -> float:
    """GD: c/(L m). SGD: c * min(L R^2 / (n eps), 1/L) / m."""
    L, m = shape.L, shape.m
    mode = mode.upper()
    if mode == "GD":
        return c_eta / (L * m)
    if mode != "SGD":
        raise InvalidInputError(f"unknown step-size mode {mode!r}")
    if R is None or n is None or eps_ntrf is None:
        raise InvalidInputError("SGD step size needs R, n and eps_ntrf")
    ratio = math.inf if eps_ntrf == 0 else L * R * R / (n * eps_ntrf)
    return c_eta * min(ratio, 1.0 / L) / m


def online_loss(w: WeightStack, data) -> float:
    return float(np.mean(cross_entropy(data.y * forward_batch(w, data.X).scores)))


def save_weights(w: WeightStack, path) -> Path:
    s = w.shape
    return container.save(path, "weights", {f"W{l + 1}": a for l, a in enumerate(w)},
                          {"d": s.d, "m": s.m, "L": s.L})


def load_weights(path) -> WeightStack:
    arrays, meta = container.load(path, "weights")
    return WeightStack([arrays[f"W{l + 1}"] for l in range(meta["L"])])
