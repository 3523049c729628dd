"""Labeled unit-norm datasets: synthetic generators, CSV and binary I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import BudgetExceededError, DataFormatError, InvalidInputError
from .rng import Stream

NORM_TOL = 1e-9
MAX_REJECTIONS = 10**6


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Inputs X (n, d) with ||x_i|| = 1 and labels y in {-1, +1}.

    The invariants are checked on construction, so every instance in
    circulation satisfies them.
    """

    X: np.ndarray
    y: np.ndarray
    seed: int | None = field(default=None)

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.asarray(self.y)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise InvalidInputError(f"inconsistent dataset shapes X{X.shape} y{y.shape}")
        if not np.isfinite(X).all():
            raise InvalidInputError("dataset contains non-finite inputs")
        if not np.isin(y, (-1, 1)).all():
            raise InvalidInputError("labels must be -1 or +1")
        norms = np.linalg.norm(X, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            raise InvalidInputError(
                f"input {bad[0]} has norm {norms[bad[0]]!r}; inputs must be unit norm")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y.astype(np.int8))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.X[idx], self.y[idx], self.seed)

    def with_labels(self, y) -> "LabeledDataset":
        return LabeledDataset(self.X, y, self.seed)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        return LabeledDataset(np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]),
                              self.seed)

    def same_as(self, other: "LabeledDataset") -> bool:
        return np.array_equal(self.X, other.X) and np.array_equal(self.y, other.y)


def margin_teacher(d: int, seed: int) -> np.ndarray:
    return Stream(seed, 0x7EAC, d).unit_vectors(1, d)[0]


def gen_margin_dataset(n: int, d: int, gamma: float, seed: int, *, draw: int = 0,
                       return_teacher: bool = False):
    """Uniform sphere points with |<w, x>| >= gamma, labelled by sign(<w, x>).

    The teacher w depends only on (seed, d); ``draw`` selects an independent
    sample from the same distribution (e.g. a held-out test set).
    """
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    if d < 2:
        raise InvalidInputError("margin data needs d >= 2")
    if not 0.0 < gamma < 1.0:
        raise InvalidInputError(f"gamma must lie in (0, 1), got {gamma}")
    w = margin_teacher(d, seed)
    stream = Stream(seed, 0xDA7A, n, d, draw)
    kept, rejected, have = [], 0, 0
    while have < n:
        batch = max(64, 2 * (n - have))
        cand = stream.unit_vectors(batch, d)
        proj = cand @ w
        ok = np.abs(proj) >= gamma
        # count rejections only up to the last accepted point actually used
        idx = np.flatnonzero(ok)[: n - have]
        if have + idx.size < n:
            rejected += int(batch - idx.size)
        else:
            rejected += int(idx[-1] + 1 - idx.size)
        if rejected > MAX_REJECTIONS:
            raise BudgetExceededError(
                f"margin sampler exceeded {MAX_REJECTIONS} rejections (gamma={gamma}, d={d})")
        kept.append(cand[idx])
        have += idx.size
    X = np.vstack(kept)[:n]
    y = np.where(X @ w > 0, 1, -1).astype(np.int8)
    ds = LabeledDataset(X, y, seed)
    return (ds, w) if return_teacher else ds


def flip_labels(data: LabeledDataset, rho: float, seed: int) -> LabeledDataset:
    """Flip exactly floor(rho * n) labels chosen uniformly without replacement."""
    if not 0.0 <= rho < 1.0:
        raise InvalidInputError(f"rho must lie in [0, 1), got {rho}")
    k = int(np.floor(rho * data.n))
    idx = Stream(seed, 0xF11B, data.n).choice(data.n, k)
    y = data.y.copy()
    y[idx] = -y[idx]
    return data.with_labels(y)


def gen_phi_dataset(n: int, d: int, phi: float, seed: int, *, labels=None,
                    max_rejections: int = MAX_REJECTIONS) -> LabeledDataset:
    """Random-label sphere data where every cross-class pair is >= phi apart.

    Points are drawn one at a time; a candidate is rejected while it falls
    within phi of an already accepted point of the other class.
    """
    if n < 1 or d < 1:
        raise InvalidInputError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    if not 0.0 < phi < 2.0:
        raise InvalidInputError(f"phi must lie in (0, 2), got {phi}")
    stream = Stream(seed, 0x9F1, n, d)
    if labels is None:
        y = np.where(stream.uniform(n) < 0.5, -1, 1).astype(np.int8)
    else:
        y = np.asarray(labels, dtype=np.int8)
        if y.shape != (n,):
            raise InvalidInputError("forced labels must have length n")
    X = np.empty((n, d))
    # squared distance between unit vectors: 2 - 2 <a, b>
    max_dot = 1.0 - phi * phi / 2.0
    rejected = 0
    for i in range(n):
        other = X[:i][y[:i] != y[i]]
        while True:
            cand = stream.unit_vectors(256, d)
            if other.shape[0] == 0:
                X[i] = cand[0]
                break
            ok = np.flatnonzero((cand @ other.T).max(axis=1) <= max_dot)
            if ok.size:
                rejected += int(ok[0])
                X[i] = cand[ok[0]]
                break
            rejected += cand.shape[0]
            if rejected > max_rejections:
                raise BudgetExceededError(
                    f"phi sampler exceeded {max_rejections} rejections at point {i} (phi={phi})")
        if rejected > max_rejections:
            raise BudgetExceededError(
                f"phi sampler exceeded {max_rejections} rejections at point {i} (phi={phi})")
    return LabeledDataset(X, y, seed)


def project_unit(X, y, seed=None) -> LabeledDataset:
    X = np.array(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DataFormatError("cannot project a zero-norm row onto the sphere", index=int(zero[0]))
    return LabeledDataset(X / norms[:, None], y, seed)


def read_csv_arrays(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse ``x0,...,x{d-1},y`` CSV into raw arrays (no norm checks)."""
    rows, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file", line=1) from None
        d = len(header) - 1
        if d < 1 or header != [f"x{j}" for j in range(d)] + ["y"]:
            raise DataFormatError(f"{path}: header must be x0,...,x{{d-1}},y", line=1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise DataFormatError(f"{path}: expected {d + 1} fields, got {len(row)}",
                                      line=lineno)
            try:
                vals = [float(v) for v in row[:d]]
                label = float(row[d])
            except ValueError:
                raise DataFormatError(f"{path}: unparseable number", line=lineno) from None
            if label not in (-1.0, 1.0):
                raise DataFormatError(f"{path}: label {row[d]!r} is not -1 or 1", line=lineno)
            rows.append(vals)
            labels.append(int(label))
    X = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    return X, np.array(labels, dtype=np.int8)


def load_csv(path, *, project: bool = False) -> LabeledDataset:
    """Load a CSV dataset. With ``project=True`` rows are rescaled to unit
    norm; otherwise they must already be unit norm."""
    X, y = read_csv_arrays(path)
    if project:
        return project_unit(X, y)
    norms = np.linalg.norm(X, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
    if bad.size:
        raise DataFormatError(f"{path}: row is not unit norm (use projection)",
                              line=int(bad[0]) + 2, index=int(bad[0]))
    return LabeledDataset(X, y)


def save_csv(data: LabeledDataset, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join([f"x{j}" for j in range(data.d)] + ["y"]) + "\n")
        for x, label in zip(data.X, data.y):
            # repr round-trips float64 exactly
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(label)}\n")
    return path


def save_dataset(data: LabeledDataset, path) -> Path:
    meta = {"n": data.n, "d": data.d, "seed": data.seed}
    return container.save(path, "dataset", {"X": data.X, "y": data.y}, meta)


def load_dataset(path) -> LabeledDataset:
    arrays, meta = container.load(path, "dataset")
    return LabeledDataset(arrays["X"], arrays["y"], meta.get("seed"))
