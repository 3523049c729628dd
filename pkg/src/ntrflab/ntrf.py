"""Neural tangent random features: the linearisation of the network at W0.

    F(x) = f_{W0}(x) + <grad f_{W0}(x), W - W0>

Gradient features are held as one flattened row per example (length
m*d + (L-2)*m^2 + m), so predictions are a single matrix-vector product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import DivergenceError, InvalidInputError, StepSizeError
from .losses import cross_entropy, cross_entropy_prime, squared_hinge
from .network import NetworkShape, WeightStack, layer_offsets, per_example_gradients

BALL_SLACK = 1e-10


@dataclass(eq=False)
class NtrfFeatures:
    shape: NetworkShape
    offsets: np.ndarray          # f_{W0}(x_i), shape (n,)
    grads: np.ndarray            # flattened grad f_{W0}(x_i), shape (n, P)
    seed: int | None = None

    def __post_init__(self):
        if self.grads.shape != (self.offsets.shape[0], self.shape.n_params):
            raise InvalidInputError(
                f"feature matrix {self.grads.shape} does not match shape with "
                f"{self.shape.n_params} parameters")
        if not np.isfinite(self.offsets).all():
            raise InvalidInputError("non-finite feature offsets")

    @property
    def n(self) -> int:
        return self.offsets.shape[0]

    def layer_block(self, l: int) -> np.ndarray:
        """(n, rows*cols) view of the gradient features of layer l (0-based)."""
        a, b = layer_offsets(self.shape)[l]
        return self.grads[:, a:b]

    def layer_stack(self, i: int) -> WeightStack:
        return WeightStack.from_flat(self.shape, self.grads[i])

    def scaled(self, c: float) -> "NtrfFeatures":
        return NtrfFeatures(self.shape, self.offsets.copy(), self.grads * c, self.seed)

    def save(self, path):
        s = self.shape
        meta = {"d": s.d, "m": s.m, "L": s.L, "n": self.n, "seed": self.seed}
        return container.save(path, "ntrf_features",
                              {"offsets": self.offsets, "grads": self.grads}, meta)

    @classmethod
    def load(cls, path) -> "NtrfFeatures":
        arrays, meta = container.load(path, "ntrf_features")
        return cls(NetworkShape(meta["d"], meta["m"], meta["L"]), arrays["offsets"],
                   arrays["grads"], meta.get("seed"))


@dataclass
class NtrfModel:
    delta: WeightStack       # W - W0
    R: float

    def __post_init__(self):
        if self.R < 0:
            raise InvalidInputError("radius R must be non-negative")

    @property
    def radius(self) -> float:
        return self.R / math.sqrt(self.delta.shape.m)


@dataclass
class NtrfFitResult:
    model: NtrfModel
    eps_ntrf: float
    loss_curve: list[float] = field(default_factory=list)
    lr: float = 0.0


def extract_features(w0: WeightStack, data, seed: int | None = None) -> NtrfFeatures:
    f0, G = per_example_gradients(w0, data.X)
    return NtrfFeatures(w0.shape, np.array(f0), G, seed)


def predict_all(features: NtrfFeatures, delta) -> np.ndarray:
    vec = delta.flatten() if isinstance(delta, WeightStack) else delta
    return features.offsets + features.grads @ vec


def predict(features: NtrfFeatures, i: int, model: NtrfModel) -> float:
    if not 0 <= i < features.n:
        raise IndexError(f"example index {i} out of range for n={features.n}")
    return float(features.offsets[i] + features.grads[i] @ model.delta.flatten())


def project_ball(vec: np.ndarray, shape: NetworkShape, radius: float) -> np.ndarray:
    """Rescale each layer block of a flat displacement onto its Frobenius ball."""
    out = vec.copy()
    for a, b in layer_offsets(shape):
        nrm = np.linalg.norm(out[a:b])
        if nrm > radius:
            out[a:b] *= radius / nrm if radius > 0 else 0.0
    return out


def gram_top_eigenvalue(G: np.ndarray, iters: int = 100, seed: int = 0) -> float:
    """Largest eigenvalue of G G^T by power iteration on the n x n side."""
    n = G.shape[0]
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = G @ (G.T @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new = float(v @ w)
        v = w / nw
        if abs(new - lam) <= 1e-10 * max(new, 1.0):
            lam = new
            break
        lam = new
    return lam


def safe_fit_lr(features: NtrfFeatures) -> float:
    lam = gram_top_eigenvalue(features.grads) / features.n
    return 1.0 / (4.0 * lam) if lam > 0 else 1.0


def fit_projected_gd(features: NtrfFeatures, R: float, labels, steps: int,
                     lr: float | None = None) -> NtrfFitResult:
    """Minimise the average cross-entropy of the NTRF model over the per-layer
    Frobenius ball of radius R / sqrt(m) by projected gradient descent.

    The reported eps_ntrf is the best loss reached, an upper bound on the
    infimum over the ball.
    """
    if R < 0:
        raise InvalidInputError("radius R must be non-negative")
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (features.n,):
        raise InvalidInputError("labels do not match the feature count")
    if lr is None:
        lr = safe_fit_lr(features)
    if not lr > 0:
        raise InvalidInputError("learning rate must be positive")
    shape = features.shape
    radius = R / math.sqrt(shape.m)
    n = features.n
    # Every gradient step adds a combination of feature rows to each layer
    # block and the projection only rescales blocks, so the displacement of
    # layer l stays G_l^T a_l. Iterating on the coefficients a_l reproduces
    # the primal iterates exactly at O(L n^2) cost per step.
    blocks = [features.layer_block(l) for l in range(shape.L)]
    grams = [B @ B.T for B in blocks]
    coefs = np.zeros((shape.L, n))
    z = y * features.offsets
    loss = float(np.mean(cross_entropy(z)))
    curve = [loss]
    best, best_coefs = loss, coefs.copy()
    if radius > 0:
        for step in range(1, steps + 1):
            c = cross_entropy_prime(z) * y / n
            coefs = coefs - lr * c
            for l, K in enumerate(grams):
                nrm = math.sqrt(max(float(coefs[l] @ K @ coefs[l]), 0.0))
                if nrm > radius:
                    coefs[l] *= radius / nrm
            z = y * (features.offsets + sum(K @ a for K, a in zip(grams, coefs)))
            loss = float(np.mean(cross_entropy(z)))
            if not math.isfinite(loss) or loss > 10.0 * best:
                raise DivergenceError(
                    f"NTRF fit diverged at step {step}: loss {loss:.6g} vs best {best:.6g}",
                    last_valid_step=step - 1,
                    diagnostics={"lr": lr, "best_loss": best, "loss": loss})
            curve.append(loss)
            if loss < best:
                best, best_coefs = loss, coefs.copy()
    best_delta = np.concatenate([B.T @ a for B, a in zip(blocks, best_coefs)])
    # guard the ball invariant against rounding in the coefficient norms
    best_delta = project_ball(best_delta, shape, radius)
    model = NtrfModel(WeightStack.from_flat(shape, best_delta), R)
    return NtrfFitResult(model=model, eps_ntrf=best, loss_curve=curve, lr=lr)


@dataclass
class HingeFlowResult:
    losses: np.ndarray          # average squared-hinge loss after each Euler step (index 0 = start)
    delta_last_hidden: np.ndarray   # final displacement of layer L-1, shape (m, m) or (m, d)
    dt: float
    margins: np.ndarray         # final y_i F(x_i)

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.losses.size)


def default_hinge_dt(features: NtrfFeatures, phi: float, stable_dt: float) -> float:
    """n^3 / (8 m phi), capped by the Euler stability limit of the quadratic."""
    n, m = features.n, features.shape.m
    dt = n ** 3 / (8.0 * m * phi) if phi > 0 else math.inf
    return min(dt, stable_dt)


def hinge_flow_last_hidden(features: NtrfFeatures, labels, lam: float, dt: float | None = None,
                           steps: int = 100_000, phi: float | None = None,
                           stop_at_unit_hinge: bool = True) -> HingeFlowResult:
    """Forward-Euler gradient flow of the average squared hinge loss of the
    NTRF model, moving only the last hidden layer W_{L-1}.

    Runs for ``steps`` Euler steps, or until every per-example hinge loss is
    at most 1 when ``stop_at_unit_hinge`` is set.
    """
    if features.shape.L < 2:
        raise InvalidInputError("hinge flow needs a layer L-1")
    squared_hinge(0.0, lam)  # validates lam
    y = np.asarray(labels, dtype=np.float64)
    n = features.n
    l = features.shape.L - 2
    Gl = features.layer_block(l)
    # Euler on a quadratic with Hessian (2/n) G^T G is stable below n / lambda_max
    lam_max = gram_top_eigenvalue(Gl)
    stable = n / (2.0 * lam_max) if lam_max > 0 else 1.0
    if dt is None:
        dt = default_hinge_dt(features, phi if phi is not None else 0.0, stable)
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    coef_acc = np.zeros(n)      # displacement = Gl^T @ coef_acc
    base = y * features.offsets
    K = Gl @ Gl.T
    z = base.copy()
    vals, der = squared_hinge(z, lam)
    losses = [float(np.mean(vals))]
    for step in range(1, steps + 1):
        if stop_at_unit_hinge and vals.max() <= 1.0:
            break
        # grad of the loss in W_{L-1} is Gl^T (der * y) / n
        coef_acc -= dt * der * y / n
        z = base + y * (K @ coef_acc)
        vals, der = squared_hinge(z, lam)
        loss = float(np.mean(vals))
        if loss > 2.0 * losses[-1] and loss > 0:
            raise StepSizeError(
                f"hinge flow unstable at step {step} with dt={dt:.3g}: "
                f"loss {losses[-1]:.6g} -> {loss:.6g}", last_valid_step=step - 1,
                diagnostics={"dt": dt, "stable_dt": stable})
        losses.append(loss)
    rows, cols = features.shape.layer_shapes()[l]
    delta = (Gl.T @ coef_acc).reshape(rows, cols)
    return HingeFlowResult(np.array(losses), delta, dt, z)


def hinge_model(features: NtrfFeatures, result: HingeFlowResult, R: float | None = None) -> NtrfModel:
    """Embed the hinge-flow displacement into a full NtrfModel (other layers 0).
    R defaults to the smallest radius whose ball contains it."""
    layers = [np.zeros(s) for s in features.shape.layer_shapes()]
    layers[features.shape.L - 2] = result.delta_last_hidden
    delta = WeightStack(layers)
    if R is None:
        R = float(np.linalg.norm(result.delta_last_hidden)) * math.sqrt(features.shape.m)
    return NtrfModel(delta, R)
