"""Data-difficulty diagnostics: class distance, NTRF margin, shallow NTK
margin and the constructive two-layer witness built from it."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import (DegenerateFeatureError, EmptySurvivorError, InvalidInputError,
                     UndefinedPhiError)
from .network import WeightStack
from .rng import Stream

RHO_GRID = (0.0, 0.01, 0.05, 0.1)
# P(|N(0,1)| >= 0.47) >= 1/2
SURVIVOR_THRESHOLD = 0.47


@dataclass
class PhiReport:
    phi: float
    i: int
    j: int

    def to_json(self) -> str:
        return json.dumps({"phi": self.phi, "witness": [self.i, self.j]})


@dataclass
class NtrfMarginReport:
    gamma_hat: float
    rho_hat: float
    ustar: WeightStack
    rho: float = 0.0
    gamma_by_rho: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"gamma_hat": self.gamma_hat, "rho_hat": self.rho_hat, "rho": self.rho,
                           "gamma_by_rho": {str(k): v for k, v in self.gamma_by_rho.items()}})


@dataclass
class ShallowMarginReport:
    gamma_hat: float
    k: int
    umap: np.ndarray        # (k, d), one vector per Monte Carlo sample
    z: np.ndarray           # (k, d) the samples themselves

    def to_json(self) -> str:
        return json.dumps({"gamma_hat": self.gamma_hat, "k": self.k})

    def save(self, path):
        return container.save(path, "umap", {"umap": self.umap, "z": self.z},
                              {"gamma_hat": self.gamma_hat, "k": self.k})

    @classmethod
    def load(cls, path) -> "ShallowMarginReport":
        arrays, meta = container.load(path, "umap")
        return cls(meta["gamma_hat"], meta["k"], arrays["umap"], arrays["z"])


@dataclass
class WitnessResult:
    U: np.ndarray
    margins: np.ndarray
    survivors: np.ndarray   # indices j with |w_2j| >= 0.47 / sqrt(m)


def class_distance(data) -> PhiReport:
    """Exact minimum Euclidean distance between examples of opposite labels."""
    pos = np.flatnonzero(data.y == 1)
    neg = np.flatnonzero(data.y == -1)
    if pos.size == 0 or neg.size == 0:
        raise UndefinedPhiError("class distance needs both labels present")
    best, bi, bj = math.inf, -1, -1
    Xn = data.X[neg]
    chunk = max(1, 2_000_000 // max(1, neg.size * data.d))
    for start in range(0, pos.size, chunk):
        rows = pos[start:start + chunk]
        dist = np.sqrt(((data.X[rows][:, None, :] - Xn[None, :, :]) ** 2).sum(axis=2))
        k = int(np.argmin(dist))
        a, b = divmod(k, neg.size)
        if dist[a, b] < best:
            best, bi, bj = float(dist[a, b]), int(rows[a]), int(neg[b])
    return PhiReport(best, min(bi, bj), max(bi, bj))


def _softmin_weights(s: np.ndarray, temp: float) -> np.ndarray:
    a = -(s - s.min()) / temp
    w = np.exp(a)
    return w / w.sum()


def _schedule(iterations: int):
    """(step, temperature factor) per iteration: step ~ 1/sqrt(t), temperature
    halved every iterations/5 steps."""
    period = max(1, iterations // 5)
    for t in range(iterations):
        yield 0.5 / math.sqrt(1.0 + t), 0.5 ** (t // period)


def _gamma_at(sorted_margins: np.ndarray, rho: float) -> float:
    return float(sorted_margins[int(math.floor(rho * sorted_margins.size))])


def ntrf_margin(features, labels, iterations: int = 400, rho: float = 0.0,
                rho_grid=RHO_GRID) -> NtrfMarginReport:
    """Approximately maximise the normalised NTRF margins
    y_i <G_i, U> / sqrt(m) over unit-norm U by soft-min projected ascent.

    U is kept in the span of the feature rows (components outside it do not
    change any margin but use up norm), U = G^T b, so the iteration runs on
    the n coefficients b.
    """
    y = np.asarray(labels, dtype=np.float64)
    G = features.grads
    if not np.any(G):
        raise DegenerateFeatureError("all gradient features are zero (dead network)")
    if not 0.0 <= rho < 1.0:
        raise InvalidInputError("rho must lie in [0, 1)")
    root_m = math.sqrt(features.shape.m)
    K = G @ G.T
    b = y.copy()

    def normalise(b):
        nrm = math.sqrt(max(float(b @ K @ b), 0.0))
        return b / nrm

    b = normalise(b)
    s = y * (K @ b) / root_m
    temp0 = max(float(np.mean(np.abs(s))), np.finfo(float).tiny)
    best_val, best_b = _gamma_at(np.sort(s), rho), b
    for step, tf in _schedule(iterations):
        p = _softmin_weights(s, temp0 * tf)
        g = p * y / root_m                 # ascent direction in coefficient space
        gnorm = math.sqrt(max(float(g @ K @ g), 0.0))
        if gnorm == 0.0:
            break
        b = normalise(b + step * g / gnorm)
        s = y * (K @ b) / root_m
        val = _gamma_at(np.sort(s), rho)
        if val > best_val:
            best_val, best_b = val, b
    ustar_vec = G.T @ best_b
    ustar_vec /= np.linalg.norm(ustar_vec)
    ustar = WeightStack.from_flat(features.shape, ustar_vec)
    s = y * (G @ ustar_vec) / root_m
    srt = np.sort(s)
    gamma = _gamma_at(srt, rho)
    grid = {r: _gamma_at(srt, r) for r in rho_grid}
    return NtrfMarginReport(gamma_hat=gamma, rho_hat=float(np.mean(s < gamma)), ustar=ustar,
                            rho=rho, gamma_by_rho=grid)


def shallow_margins(data, z: np.ndarray, umap: np.ndarray) -> np.ndarray:
    """y_i (1/k) sum_j relu'(<z_j, x_i>) <u_j, x_i> for every example."""
    act = (z @ data.X.T > 0.0).astype(np.float64)         # (k, n)
    proj = umap @ data.X.T                                # (k, n)
    return data.y * (act * proj).mean(axis=0)


def shallow_ntk_margin(data, k: int = 2000, seed: int = 0, iterations: int = 300,
                       z: np.ndarray | None = None) -> ShallowMarginReport:
    """Monte Carlo version of the two-layer NTK margin: maximise
    min_i y_i (1/k) sum_j relu'(<z_j, x_i>) <u_j, x_i> over ||u_j|| <= 1 with
    z_j ~ N(0, I_d), or over the supplied samples ``z``."""
    if data.n == 0:
        raise InvalidInputError("empty dataset")
    if z is None:
        if k < 1:
            raise InvalidInputError("k must be >= 1")
        z = Stream(seed, 0x5A11).normal((k, data.d))
    z = np.asarray(z, dtype=np.float64)
    k = z.shape[0]
    y = data.y.astype(np.float64)
    act = (z @ data.X.T > 0.0).astype(np.float64)         # (k, n)

    def project(u):
        nrm = np.linalg.norm(u, axis=1, keepdims=True)
        return np.where(nrm > 1.0, u / np.maximum(nrm, 1e-300), u)

    u = (act * y) @ data.X
    nrm = np.linalg.norm(u, axis=1, keepdims=True)
    u = np.divide(u, nrm, out=np.zeros_like(u), where=nrm > 0)

    def margins(u):
        return y * (act * (u @ data.X.T)).mean(axis=0)

    s = margins(u)
    temp0 = max(float(np.mean(np.abs(s))), np.finfo(float).tiny)
    best_val, best_u = float(s.min()), u
    for step, tf in _schedule(iterations):
        p = _softmin_weights(s, temp0 * tf)
        # per-sample gradient of the soft-min, rescaled by k
        g = (act * (p * y)) @ data.X
        u = project(u + step * g)
        s = margins(u)
        if s.min() > best_val:
            best_val, best_u = float(s.min()), u
    return ShallowMarginReport(gamma_hat=best_val, k=k, umap=best_u, z=z)


def shallow_witness(w0: WeightStack, umap: np.ndarray, data) -> WitnessResult:
    """Two-layer witness direction from a per-unit map u_j = u(w_1j):
    v_j = u_j / w_2j on the units with |w_2j| >= 0.47/sqrt(m), 0 elsewhere,
    U = V / sqrt(m |S|). Returns U and the first-layer feature margins
    y_i <grad_{W_1} f_{W0}(x_i), U>."""
    if len(w0) != 2:
        raise InvalidInputError("the witness construction is for two-layer networks")
    W1, w2 = w0.layers[0], w0.layers[1][0]
    m = w0.shape.m
    umap = np.asarray(umap, dtype=np.float64)
    if umap.shape != W1.shape:
        raise InvalidInputError(f"umap must have shape {W1.shape}, got {umap.shape}")
    if np.any(np.linalg.norm(umap, axis=1) > 1.0 + 1e-10):
        raise InvalidInputError("umap vectors must have norm <= 1")
    survivors = np.flatnonzero(np.abs(w2) >= SURVIVOR_THRESHOLD / math.sqrt(m))
    if survivors.size == 0:
        raise EmptySurvivorError("no output weight reaches 0.47/sqrt(m)")
    V = np.zeros_like(W1)
    V[survivors] = umap[survivors] / w2[survivors, None]
    U = V / math.sqrt(m * survivors.size)
    act = (data.X @ W1.T > 0.0).astype(np.float64)        # (n, m)
    # grad_{W_1} f(x) = sqrt(m) (w2 * relu'(W1 x)) x^T
    margins = data.y * math.sqrt(m) * ((act * w2) * (data.X @ U.T)).sum(axis=1)
    return WitnessResult(U=U, margins=margins, survivors=survivors)
