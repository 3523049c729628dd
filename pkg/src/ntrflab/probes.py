"""Empirical probes of the local geometry around initialization.

All sup-type quantities are estimated from below: the maximum over a finite
candidate set (typically trained iterates) plus random points of the ball.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidInputError, MissingSnapshotError
from .network import WeightStack, forward_batch, jvp_batch, per_example_layer_norms
from .rng import Stream

BALL_REL_TOL = 1e-12


@dataclass
class BallSpec:
    center: WeightStack
    tau: float

    def __post_init__(self):
        if not self.tau >= 0:
            raise InvalidInputError(f"ball radius must be >= 0, got {self.tau}")

    def contains(self, w: WeightStack) -> bool:
        return bool((w - self.center).frob_norms().max() <= self.tau * (1 + BALL_REL_TOL))

    def clip(self, w: WeightStack) -> tuple[WeightStack, bool]:
        """Pull each layer of ``w`` back onto the ball surface if it lies outside."""
        clipped = False
        layers = []
        for a, c in zip(w.layers, self.center.layers):
            diff = a - c
            nrm = np.linalg.norm(diff)
            if nrm > self.tau * (1 + BALL_REL_TOL):
                diff = diff * (self.tau / nrm) if nrm > 0 else diff
                clipped = True
            layers.append(c + diff)
        return WeightStack(layers), clipped


@dataclass
class ProbeReport:
    eps_app_hat: float
    M_hat: float
    init_out_max: float
    candidates_evaluated: int
    clipped: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class AuditReport:
    lhs: list[float]
    rhs: list[float]
    residuals: list[float]
    intervals: list[tuple[int, int]]
    margin: float
    passed: bool
    factor: float
    degenerate_factor: bool = False

    def to_json(self) -> str:
        d = asdict(self)
        d["intervals"] = [list(iv) for iv in self.intervals]
        return json.dumps(d)


def _random_point(ball: BallSpec, radius: float, stream: Stream) -> WeightStack:
    layers = []
    for c in ball.center.layers:
        g = stream.normal(c.shape)
        nrm = np.linalg.norm(g)
        layers.append(c + g * (radius / nrm))
    return WeightStack(layers)


def _probe_points(ball: BallSpec, candidates, random_budget: int, seed: int):
    """Center and clipped candidates, then 2*budget random points at radii
    alternating tau/2 and tau. Random points come from a stream independent of
    the candidate list, so a larger budget only extends the same sequence."""
    points, clipped = [ball.center], 0
    for w in candidates or ():
        w2, was_clipped = ball.clip(w)
        clipped += was_clipped
        points.append(w2)
    if clipped:
        warnings.warn(f"{clipped} candidate(s) outside the ball were clipped onto its surface")
    stream = Stream(seed, 0xBA11)
    randoms = []
    for k in range(2 * random_budget):
        r = ball.tau / 2 if (k // 2) % 2 == 0 else ball.tau
        randoms.append(_random_point(ball, r, stream))
    return points, randoms, clipped


def kink_candidates(ball: BallSpec, data, count: int = 4) -> list[WeightStack]:
    """First-layer displacements of norm tau that push the cheapest hidden units
    of one example across their ReLU kink, all with the same downstream sign.

    Random and trained directions see almost no kink crossings, so they miss
    the regime where the linearisation defect is largest. For an example x and
    eligible units K this sets row j of the displacement to a_j x^T with
    a_j = sign_j (|z_j| + t |c_j|), z_j the unit's preactivation and c_j its
    downstream coefficient, and t fixed by the norm budget. The candidates are
    ordinary points of the ball, so the estimate stays a lower bound.
    """
    w0, tau = ball.center, ball.tau
    if tau == 0 or count <= 0:
        return []
    cache = forward_batch(w0, data.X)
    m = w0.shape.m
    if len(w0) > 2:
        sig_next = np.sqrt(m) * w0.layers[-1][0] * (cache.pre[-1] > 0.0)
        for l in range(len(w0) - 2, 1, -1):
            sig_next = (sig_next @ w0.layers[l]) * (cache.pre[l - 1] > 0.0)
        coef = sig_next @ w0.layers[1]
    else:
        coef = np.broadcast_to(np.sqrt(m) * w0.layers[-1][0], cache.pre[0].shape)
    z = cache.pre[0]
    plans = []
    for i in range(data.n):
        for s in (1.0, -1.0):
            elig = np.flatnonzero(s * coef[i] > 0)
            if elig.size == 0:
                continue
            c = np.abs(coef[i, elig])
            cost = np.abs(z[i, elig])
            order = elig[np.argsort(cost / c, kind="stable")]
            best = (0.0, None, None)
            k = 1
            while True:
                K = order[:k]
                zc, cc = np.abs(z[i, K]), np.abs(coef[i, K])
                # ||zc + t cc||^2 = tau^2, t >= 0
                A, B, C = cc @ cc, 2 * zc @ cc, zc @ zc - tau * tau
                if C > 0:
                    break
                t = (-B + np.sqrt(B * B - 4 * A * C)) / (2 * A)
                gain = t * A
                if gain > best[0]:
                    best = (gain, K, t)
                if k == order.size:
                    break
                k = min(2 * k, order.size)
            if best[1] is not None:
                plans.append((best[0], i, best[1], best[2]))
    plans.sort(key=lambda p: -p[0])
    out = []
    for gain, i, K, t in plans[:count]:
        a = np.zeros(m)
        zk = z[i, K]
        # active units (z > 0) are pushed down, inactive ones (z <= 0) up
        a[K] = np.where(zk > 0, -1.0, 1.0) * (np.abs(zk) + t * np.abs(coef[i, K]))
        nrm = np.linalg.norm(a)
        if nrm > tau:
            a *= tau / nrm
        layers = [w.copy() for w in w0.layers]
        layers[0] = layers[0] + np.outer(a, data.X[i])
        out.append(WeightStack(layers))
    return out


def _defect(base_w, base_cache, other_w, other_cache) -> float:
    lin = jvp_batch(base_w, base_cache, other_w - base_w)
    return float(np.max(np.abs(other_cache.scores - base_cache.scores - lin)))


def _max_defect(points, randoms, X) -> float:
    caches = [forward_batch(w, X) for w in points]
    best = 0.0
    for a, (wa, ca) in enumerate(zip(points, caches)):
        for b, (wb, cb) in enumerate(zip(points, caches)):
            if a != b:
                best = max(best, _defect(wa, ca, wb, cb))
    for wa, wb in zip(randoms[0::2], randoms[1::2]):
        ca, cb = forward_batch(wa, X), forward_batch(wb, X)
        best = max(best, _defect(wa, ca, wb, cb), _defect(wb, cb, wa, ca))
    return best


def _max_grad(points, X) -> float:
    return max(float(per_example_layer_norms(w, forward_batch(w, X)).max()) for w in points)


def approx_error_probe(ball: BallSpec, data, candidates=(), random_budget: int = 0,
                       seed: int = 0) -> float:
    """Lower estimate of sup_i sup_{W, W'} |f_W'(x_i) - f_W(x_i) - <grad f_W(x_i), W' - W>|
    over the ball: every ordered pair drawn from center and candidates, plus
    ``random_budget`` random pairs (both orders)."""
    if data.n == 0:
        raise InvalidInputError("empty dataset")
    points, randoms, _ = _probe_points(ball, candidates, random_budget, seed)
    return _max_defect(points, randoms, data.X)


def grad_bound_probe(ball: BallSpec, data, candidates=(), random_budget: int = 0,
                     seed: int = 0) -> float:
    """Lower estimate of sup_{i, l, W in ball} ||grad_{W_l} f_W(x_i)||_F."""
    if data.n == 0:
        raise InvalidInputError("empty dataset")
    points, randoms, _ = _probe_points(ball, candidates, random_budget, seed)
    return _max_grad(points + randoms, data.X)


def init_output_probe(w0: WeightStack, data) -> float:
    """max_i |f_{W0}(x_i)|."""
    if data.n == 0:
        raise InvalidInputError("empty dataset")
    return float(np.max(np.abs(forward_batch(w0, data.X).scores)))


def probe(ball: BallSpec, data, candidates=(), random_budget: int = 0,
          seed: int = 0) -> ProbeReport:
    """Both sup estimates from one shared point set, plus the init output size."""
    if data.n == 0:
        raise InvalidInputError("empty dataset")
    points, randoms, clipped = _probe_points(ball, candidates, random_budget, seed)
    return ProbeReport(eps_app_hat=_max_defect(points, randoms, data.X),
                       M_hat=_max_grad(points + randoms, data.X),
                       init_out_max=init_output_probe(ball.center, data),
                       candidates_evaluated=len(points) + len(randoms), clipped=clipped)


def descent_audit(traj, wstar: WeightStack, eta: float, eps_app_hat: float,
                  eps_ntrf: float) -> AuditReport:
    """Audit the per-step descent inequality along a recorded trajectory.

    For consecutive snapshots a < b:
        lhs = ||W(a) - W*||^2 - ||W(b) - W*||^2
        rhs = sum_{t=a}^{b-1} [(3/2 - 4 eps_app) eta L_S(W(t)) - 2 eta eps_ntrf]
    The check passes when the summed lhs is at least the summed rhs. The
    estimate eps_app_hat is a lower estimate of the true sup, so a pass is
    evidence rather than proof.
    """
    if eps_app_hat > 3.0 / 8.0:
        raise InvalidInputError(
            f"eps_app_hat={eps_app_hat:.4g} exceeds 3/8; the inequality has no content there")
    steps = sorted(traj.snapshots)
    if len(steps) < 2:
        raise MissingSnapshotError("the audit needs at least two weight snapshots")
    loss_at = dict(zip(traj.steps, traj.loss))
    factor = 1.5 - 4.0 * eps_app_hat
    degenerate = factor <= 0.0
    if degenerate:
        warnings.warn("degenerate factor 3/2 - 4 eps_app = 0: the audit only checks the "
                      "eps_ntrf term")
    sq = {s: (traj.snapshots[s] - wstar).sq_norm() for s in steps}
    lhs, rhs, res, ivs = [], [], [], []
    for a, b in zip(steps[:-1], steps[1:]):
        try:
            losses = [loss_at[t] for t in range(a, b)]
        except KeyError as exc:
            raise MissingSnapshotError(f"no recorded loss for step {exc.args[0]}") from None
        left = sq[a] - sq[b]
        right = float(sum(factor * eta * v - 2.0 * eta * eps_ntrf for v in losses))
        lhs.append(left)
        rhs.append(right)
        res.append(left - right)
        ivs.append((a, b))
    margin = float(math.fsum(res))
    return AuditReport(lhs=lhs, rhs=rhs, residuals=res, intervals=ivs, margin=margin,
                       passed=math.fsum(lhs) >= math.fsum(rhs), factor=factor,
                       degenerate_factor=degenerate)
