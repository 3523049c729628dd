"""Experiment drivers: minimum-width search, width-scaling probes, the GD
versus 3 x eps_ntrf competition, SGD sample complexity and reference curves.

Each grid cell derives its own seeds from (master seed, cell coordinates),
and results are merged in grid order, so outputs do not depend on the
number of workers.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import gen_margin_dataset, gen_phi_dataset
from .errors import InvalidInputError
from .losses import dataset_metrics
from .network import NetworkShape, init_weights
from .ntrf import extract_features, fit_projected_gd
from .probes import BallSpec, descent_audit, kink_candidates, probe
from .trainer import TrainConfig, default_step_size, gd_train, sgd_train

BOUND_BANNER = ("reference curves only: every hidden constant is set to 1, "
                "so these are shape references and not certified bounds")


def cell_seed(master: int, *coords: int) -> int:
    """64-bit seed for one grid cell, a pure function of its coordinates."""
    ss = np.random.SeedSequence([int(master), *(int(c) for c in coords)])
    return int(ss.generate_state(1, np.uint64)[0])


def parallel_map(fn, jobs, workers: int = 1) -> list:
    """Ordered map over independent jobs, in-process when workers <= 1."""
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# minimum width


@dataclass
class ExperimentGrid:
    n_grid: list[int]
    m_grid: list[int] = field(default_factory=list)
    L: int = 5
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    budget: int = 20_000
    d: int = 20
    gamma: float = 0.1
    master_seed: int = 0
    m_start: int = 4
    m_max: int = 4096
    policy: str = "median"
    c_eta: float = 0.5

    def __post_init__(self):
        if not self.n_grid:
            raise InvalidInputError("n_grid must be nonempty")
        if not self.seeds:
            raise InvalidInputError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise InvalidInputError("seeds must be distinct")
        if self.policy not in ("median", "all", "any"):
            raise InvalidInputError(f"unknown seed policy {self.policy!r}")
        if self.m_start < 1 or self.m_max < self.m_start:
            raise InvalidInputError("need 1 <= m_start <= m_max")
        if self.budget < 1:
            raise InvalidInputError("budget must be >= 1")


@dataclass
class MinWidthRow:
    n: int
    min_m: int | None                 # None when no width up to m_max succeeds
    outcomes: list[bool]              # per-seed success at min_m
    trace: list[tuple[int, bool]]     # every probed width in order, with the policy outcome

    @property
    def saturated(self) -> bool:
        return self.min_m is None


def _aggregate(outcomes, policy: str) -> bool:
    k = sum(outcomes)
    if policy == "all":
        return k == len(outcomes)
    if policy == "any":
        return k > 0
    # median seed: at least half of the seeds, rounding up
    return k >= (len(outcomes) + 1) // 2


def reaches_zero_error(data, m: int, L: int, seed: int, budget: int, c_eta: float = 0.5) -> bool:
    """True iff full-batch GD at the default step size classifies every
    training example correctly (all margins > 0) within ``budget`` steps."""
    shape = NetworkShape(data.d, m, L)
    w0 = init_weights(shape, seed)
    cfg = TrainConfig(eta=default_step_size(shape, "GD", c_eta=c_eta), T=budget,
                      snapshot_every=0, target_loss=math.inf, require_zero_error=True)
    traj = gd_train(w0, data, cfg)
    return traj.err01[-1] == 0.0


def _minwidth_for_n(args) -> MinWidthRow:
    grid, n = args
    datasets = [gen_margin_dataset(n, grid.d, grid.gamma, cell_seed(grid.master_seed, s))
                for s in grid.seeds]
    per_seed: dict[int, list[bool]] = {}

    def attempt(m):
        outs = [reaches_zero_error(ds, m, grid.L, cell_seed(grid.master_seed, n, m, s),
                                   grid.budget, grid.c_eta)
                for ds, s in zip(datasets, grid.seeds)]
        per_seed[m] = outs
        ok = _aggregate(outs, grid.policy)
        trace.append((m, ok))
        return ok

    trace: list[tuple[int, bool]] = []
    m = grid.m_start
    while m <= grid.m_max and not attempt(m):
        m *= 2
    if m > grid.m_max:
        return MinWidthRow(n, None, [], trace)
    hi = m
    lo = m // 2 if m > grid.m_start else None
    # refine the last doubling gap to single-width resolution
    if lo is not None and hi >= 8:
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if attempt(mid):
                hi = mid
            else:
                lo = mid
    return MinWidthRow(n, hi, per_seed[hi], trace)


def run_minwidth(grid: ExperimentGrid, workers: int = 1) -> list[MinWidthRow]:
    """Smallest width at which GD reaches zero training error, per n."""
    return parallel_map(_minwidth_for_n, [(grid, n) for n in grid.n_grid], workers)


def minwidth_reference(rows: list[MinWidthRow]) -> dict[str, list[float | None]]:
    """c*log n, c*log^2 n, c*log^3 n and c*n, each rescaled to pass through the
    measured value at the first n."""
    ns = [r.n for r in rows]
    anchor = rows[0].min_m
    curves = {"ref_log": lambda n: math.log(n), "ref_log2": lambda n: math.log(n) ** 2,
              "ref_log3": lambda n: math.log(n) ** 3, "ref_linear": lambda n: float(n)}
    out = {}
    for name, g in curves.items():
        if anchor is None:
            out[name] = [None] * len(ns)
        else:
            c = anchor / g(ns[0])
            out[name] = [c * g(n) for n in ns]
    return out


MINWIDTH_HEADER = ["n", "min_m", "ref_log", "ref_log2", "ref_log3", "ref_linear", "saturated",
                   "seed_outcomes", "trace"]


def write_minwidth_csv(rows: list[MinWidthRow], path) -> Path:
    ref = minwidth_reference(rows)
    out = []
    for k, r in enumerate(rows):
        out.append([r.n, r.min_m, ref["ref_log"][k], ref["ref_log2"][k], ref["ref_log3"][k],
                    ref["ref_linear"][k], int(r.saturated),
                    ";".join(str(int(o)) for o in r.outcomes),
                    ";".join(f"{m}:{int(ok)}" for m, ok in r.trace)])
    return write_csv(path, MINWIDTH_HEADER, out)


def read_minwidth_csv(path) -> list[MinWidthRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            trace = [(int(a), b == "1") for a, b in
                     (t.split(":") for t in rec["trace"].split(";") if t)]
            outcomes = [c == "1" for c in rec["seed_outcomes"].split(";") if c]
            min_m = int(rec["min_m"]) if rec["min_m"] else None
            rows.append(MinWidthRow(int(rec["n"]), min_m, outcomes, trace))
    return rows


# ---------------------------------------------------------------------------
# width scaling


@dataclass
class ScalingConfig:
    m_grid: list[int]
    R: float = 5.0
    L: int = 3
    n: int = 64
    d: int = 20
    gamma: float = 0.1
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    gd_steps: int = 1000
    gd_target: float = 0.05
    candidate_every: int = 100
    kink_count: int = 4
    random_budget: int = 5
    master_seed: int = 0

    def __post_init__(self):
        if not self.m_grid or not self.seeds:
            raise InvalidInputError("m_grid and seeds must be nonempty")


SCALING_FIELDS = ("eps_app_hat", "M_hat", "dist_from_init", "init_out_max")


def _scaling_cell(args) -> dict:
    cfg, m, s = args
    data = gen_margin_dataset(cfg.n, cfg.d, cfg.gamma, cell_seed(cfg.master_seed, s))
    shape = NetworkShape(cfg.d, m, cfg.L)
    w0 = init_weights(shape, cell_seed(cfg.master_seed, m, s))
    tcfg = TrainConfig(eta=default_step_size(shape, "GD"), T=cfg.gd_steps,
                       snapshot_every=cfg.candidate_every, target_loss=cfg.gd_target)
    traj = gd_train(w0, data, tcfg)
    tau = math.sqrt(cfg.L) * cfg.R / math.sqrt(m)
    ball = BallSpec(w0, tau)
    cands = [w for step, w in sorted(traj.snapshots.items()) if step > 0]
    cands += kink_candidates(ball, data, cfg.kink_count)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = probe(ball, data, cands, cfg.random_budget, seed=cell_seed(cfg.master_seed, m, s, 1))
    return {"m": m, "seed": s, "eps_app_hat": rep.eps_app_hat, "M_hat": rep.M_hat,
            "dist_from_init": traj.max_dist(), "init_out_max": rep.init_out_max,
            "tau": tau, "clipped": rep.clipped, "gd_steps": traj.last_step}


@dataclass
class ScalingResult:
    cells: list[dict]
    table: list[dict]           # per-width medians
    slopes: dict[str, float]


def run_scaling(cfg: ScalingConfig, workers: int = 1) -> ScalingResult:
    """Probe eps_app, M, init output and travel distance over widths at
    tau = sqrt(L) R / sqrt(m), medians over seeds plus log-log slopes."""
    jobs = [(cfg, m, s) for m in cfg.m_grid for s in cfg.seeds]
    cells = parallel_map(_scaling_cell, jobs, workers)
    table = []
    for m in cfg.m_grid:
        mine = [c for c in cells if c["m"] == m]
        row = {"m": m}
        for key in SCALING_FIELDS:
            row[key] = float(np.median([c[key] for c in mine]))
        table.append(row)
    ms = [r["m"] for r in table]
    slopes = {key: loglog_slope(ms, [r[key] for r in table]) for key in SCALING_FIELDS}
    return ScalingResult(cells, table, slopes)


def write_scaling(result: ScalingResult, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    t = write_csv(out_dir / "scaling.csv", ["m", *SCALING_FIELDS],
                  [[r["m"], *(r[k] for k in SCALING_FIELDS)] for r in result.table])
    keys = ["m", "seed", *SCALING_FIELDS, "tau", "clipped", "gd_steps"]
    c = write_csv(out_dir / "scaling_cells.csv", keys,
                  [[cell[k] for k in keys] for cell in result.cells])
    s = write_json(out_dir / "scaling_slopes.json", result.slopes)
    return [t, c, s]


# ---------------------------------------------------------------------------
# GD versus 3 * eps_ntrf


@dataclass
class CompeteConfig:
    n: int = 200
    d: int = 20
    gamma: float = 0.1
    L: int = 3
    m: int = 256
    R: float = 5.0
    seeds: list[int] = field(default_factory=lambda: list(range(5)))
    c_T: float = 10.0
    c_eta: float = 0.5
    fit_steps: int = 2000
    data_kind: str = "margin"      # or "phi" for random labels with class separation
    phi: float = 0.5
    audit: bool = True
    kink_count: int = 4
    random_budget: int = 2
    master_seed: int = 0

    def __post_init__(self):
        if self.data_kind not in ("margin", "phi"):
            raise InvalidInputError(f"unknown data kind {self.data_kind!r}")
        if not self.seeds:
            raise InvalidInputError("seeds must be nonempty")


@dataclass
class CompeteReport:
    seed: int
    eps_ntrf: float
    target: float
    init_loss: float
    best_loss: float
    best_step: int
    achieving_step: int | None
    zero_error_step: int | None
    T_budget: int
    steps_run: int
    eta: float
    passed: bool
    eps_app_hat: float | None = None
    audit_tau: float | None = None
    audit: dict | None = None          # at the measured eps_app_hat, if below 3/8
    strict_audit: dict | None = None   # at eps_app_hat = 0, the most demanding form


def _first(steps, pred):
    for s, v in steps:
        if pred(v):
            return s
    return None


def _compete_cell(args):
    cfg, s = args
    data_seed = cell_seed(cfg.master_seed, s)
    if cfg.data_kind == "margin":
        data = gen_margin_dataset(cfg.n, cfg.d, cfg.gamma, data_seed)
    else:
        data = gen_phi_dataset(cfg.n, cfg.d, cfg.phi, data_seed)
    shape = NetworkShape(cfg.d, cfg.m, cfg.L)
    w0 = init_weights(shape, cell_seed(cfg.master_seed, cfg.m, s))
    feats = extract_features(w0, data)
    fit = fit_projected_gd(feats, cfg.R, data.y, cfg.fit_steps)
    eps = fit.eps_ntrf
    target = 3.0 * eps
    T = math.ceil(cfg.c_T * cfg.L ** 2 * cfg.R ** 2 / eps) if eps > 0 else 1
    eta = default_step_size(shape, "GD", c_eta=cfg.c_eta)
    traj = gd_train(w0, data, TrainConfig(eta=eta, T=T, target_loss=target,
                                          require_zero_error=True))
    achieving = _first(zip(traj.steps, traj.loss), lambda v: v <= target)
    zero_err = _first(zip(traj.steps, traj.err01), lambda v: v == 0.0)
    best = traj.best_loss[-1]
    rep = CompeteReport(seed=s, eps_ntrf=eps, target=target, init_loss=traj.loss[0],
                        best_loss=best, best_step=traj.best_step, achieving_step=achieving,
                        zero_error_step=zero_err, T_budget=T, steps_run=traj.last_step, eta=eta,
                        passed=best <= target)
    if cfg.audit:
        wstar = w0 + fit.model.delta
        tau = max(traj.max_dist(), fit.model.radius)
        ball = BallSpec(w0, tau)
        cands = [w for step, w in sorted(traj.snapshots.items()) if step > 0] + [wstar]
        cands += kink_candidates(ball, data, cfg.kink_count)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pr = probe(ball, data, cands, cfg.random_budget, seed=cell_seed(cfg.master_seed, s, 1))
            rep.eps_app_hat = pr.eps_app_hat
            rep.audit_tau = tau
            if pr.eps_app_hat <= 3.0 / 8.0:
                rep.audit = json.loads(descent_audit(traj, wstar, eta, pr.eps_app_hat,
                                                     eps).to_json())
            rep.strict_audit = json.loads(descent_audit(traj, wstar, eta, 0.0, eps).to_json())
    return rep, traj


def run_compete(cfg: CompeteConfig, workers: int = 1):
    """Fit eps_ntrf, then run GD for T = ceil(c_T L^2 R^2 / eps_ntrf) steps and
    check whether the best iterate reaches 3 eps_ntrf. Returns the per-seed
    reports and trajectories."""
    out = parallel_map(_compete_cell, [(cfg, s) for s in cfg.seeds], workers)
    return [r for r, _ in out], [t for _, t in out]


COMPETE_HEADER = ["seed", "eps_ntrf", "target", "init_loss", "best_loss", "best_step",
                  "achieving_step", "zero_error_step", "T_budget", "steps_run", "eta", "passed",
                  "eps_app_hat", "audit_passed", "strict_audit_passed"]


def write_compete(reports, trajectories, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    rows = []
    for r in reports:
        rows.append([r.seed, r.eps_ntrf, r.target, r.init_loss, r.best_loss, r.best_step,
                     r.achieving_step, r.zero_error_step, r.T_budget, r.steps_run, r.eta,
                     int(r.passed), r.eps_app_hat,
                     None if r.audit is None else int(r.audit["passed"]),
                     None if r.strict_audit is None else int(r.strict_audit["passed"])])
    paths = [write_csv(out_dir / "compete.csv", COMPETE_HEADER, rows),
             write_json(out_dir / "compete.json", [asdict(r) for r in reports])]
    for r, t in zip(reports, trajectories):
        paths.append(t.write_jsonl(out_dir / f"compete_seed{r.seed}.jsonl"))
    return paths


# ---------------------------------------------------------------------------
# SGD sample complexity


@dataclass
class SgdCurveConfig:
    n_grid: list[int]
    d: int = 20
    gamma: float = 0.1
    m: int = 256
    L: int = 3
    R: float = 5.0
    eps_ntrf: float = 0.0       # 0 selects the 1/L branch of the step size
    c_eta: float = 0.5
    seeds: list[int] = field(default_factory=lambda: list(range(5)))
    test_size: int = 10_000
    master_seed: int = 0

    def __post_init__(self):
        if not self.n_grid or not self.seeds:
            raise InvalidInputError("n_grid and seeds must be nonempty")


def _sgd_cell(args):
    cfg, n, s = args
    data_seed = cell_seed(cfg.master_seed, s)
    train = gen_margin_dataset(n, cfg.d, cfg.gamma, data_seed, draw=0)
    test = gen_margin_dataset(cfg.test_size, cfg.d, cfg.gamma, data_seed, draw=1)
    shape = NetworkShape(cfg.d, cfg.m, cfg.L)
    w0 = init_weights(shape, cell_seed(cfg.master_seed, s, 1))
    eta = default_step_size(shape, "SGD", R=cfg.R, n=n, eps_ntrf=cfg.eps_ntrf, c_eta=cfg.c_eta)
    _, chosen = sgd_train(w0, train, TrainConfig(eta=eta, T=n, seed=cell_seed(cfg.master_seed, n, s),
                                                 snapshot_every=0))
    return {"n": n, "seed": s, "test_err01": dataset_metrics(chosen, test).err01, "eta": eta}


def run_sgd_sample_complexity(cfg: SgdCurveConfig, workers: int = 1):
    """Median held-out 0-1 error of the uniformly drawn SGD iterate per n.
    Returns (per-n rows, per-cell records, fitted (a, b) of a + b/n)."""
    jobs = [(cfg, n, s) for n in cfg.n_grid for s in cfg.seeds]
    cells = parallel_map(_sgd_cell, jobs, workers)
    rows = []
    for n in cfg.n_grid:
        errs = [c["test_err01"] for c in cells if c["n"] == n]
        rows.append({"n": n, "test_err01": float(np.median(errs)),
                     "per_seed": errs})
    A = np.column_stack([np.ones(len(rows)), 1.0 / np.array([r["n"] for r in rows], float)])
    a, b = np.linalg.lstsq(A, np.array([r["test_err01"] for r in rows]), rcond=None)[0]
    return rows, cells, (float(a), float(b))


def write_sgd_curve(rows, fit, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    p = write_csv(out_dir / "sgd_curve.csv", ["n", "test_err01", "per_seed"],
                  [[r["n"], r["test_err01"], ";".join(repr(e) for e in r["per_seed"])]
                   for r in rows])
    q = write_json(out_dir / "sgd_fit.json", {"a": fit[0], "b": fit[1]})
    return [p, q]


# ---------------------------------------------------------------------------
# generalization reference curves


def bound_curves(m: float, n: float, L: int, R: float, delta: float) -> dict:
    """Both branches of the statistical-error term with unit constants,
    their minimum and the confidence term."""
    for name, v in (("m", m), ("n", n), ("L", L), ("R", R)):
        if not v > 0:
            raise InvalidInputError(f"{name} must be positive")
    if not 0 < delta < 1:
        raise InvalidInputError("delta must lie in (0, 1)")
    term_a = 4.0 ** L * L ** 2 * R * math.sqrt(m / n)
    term_b = L ** 1.5 * R / math.sqrt(n) + L ** (11.0 / 3.0) * R ** (4.0 / 3.0) / m ** (1.0 / 6.0)
    conf = math.sqrt(math.log(1.0 / delta) / n)
    return {"term_a": term_a, "term_b": term_b, "confidence": conf,
            "statistical_error": min(term_a, term_b) + conf, "note": BOUND_BANNER,
            "inputs": {"m": m, "n": n, "L": L, "R": R, "delta": delta}}
