"""Command-line entry point: ``ntrflab <command> [options]``.

Every command accepts --seed, --out, --config and --workers. A config file
holds flat ``key = value`` lines whose keys are option names (dashes or
underscores); options given on the command line take precedence.

Exit codes: 0 success, 2 invalid input, 3 budget exceeded or divergence,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

from . import experiments as ex
from .data import (flip_labels, gen_margin_dataset, gen_phi_dataset, load_csv, load_dataset,
                   save_csv, save_dataset)
from .errors import InvalidInputError, NtrfLabError
from .losses import dataset_metrics
from .network import NetworkShape, init_weights
from .ntrf import extract_features, fit_projected_gd
from .probes import BallSpec, kink_candidates, probe
from .separability import class_distance, ntrf_margin, shallow_ntk_margin
from .trainer import (TrainConfig, default_step_size, gd_train, save_weights, sgd_train)

EXIT_IO = 4


def int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def boolean(text) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def read_config(path) -> dict[str, str]:
    """Parse flat ``key = value`` text; blank lines and ``#`` comments skipped."""
    cfg = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(f"{path}: line {lineno} is not key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg[key.replace("-", "_")] = value
    return cfg


# ---------------------------------------------------------------------------
# shared option groups


def _global_opts(p):
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--config", type=Path, default=None, help="key=value config file")
    p.add_argument("--workers", type=int, default=1, help="worker processes for grid runs")


def _data_opts(p):
    p.add_argument("--data", type=Path, default=None,
                   help="dataset file (.csv or binary container); generated when omitted")
    p.add_argument("--project", type=boolean, default=False,
                   help="rescale CSV rows to unit norm instead of rejecting them")
    p.add_argument("--kind", choices=("margin", "phi"), default="margin")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--d", type=int, default=20)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--phi", type=float, default=0.5)
    p.add_argument("--rho", type=float, default=0.0, help="fraction of labels to flip")


def _net_opts(p, m=256, L=3):
    p.add_argument("--m", type=int, default=m)
    p.add_argument("--L", type=int, default=L)


def get_data(args):
    if args.data is not None:
        if args.data.suffix.lower() == ".csv":
            data = load_csv(args.data, project=args.project)
        else:
            data = load_dataset(args.data)
    elif args.kind == "margin":
        data = gen_margin_dataset(args.n, args.d, args.gamma, args.seed)
    else:
        data = gen_phi_dataset(args.n, args.d, args.phi, args.seed)
    if args.rho:
        data = flip_labels(data, args.rho, args.seed)
    return data


def _emit(args, name, obj):
    path = ex.write_json(args.out / name, obj)
    print(json.dumps(obj))
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    data = get_data(args)
    args.out.mkdir(parents=True, exist_ok=True)
    save_csv(data, args.out / "dataset.csv")
    save_dataset(data, args.out / "dataset.bin")
    print(json.dumps({"n": data.n, "d": data.d, "positive": int((data.y == 1).sum())}))


def cmd_train_gd(args):
    data = get_data(args)
    shape = NetworkShape(data.d, args.m, args.L)
    w0 = init_weights(shape, args.seed)
    eta = args.eta if args.eta is not None else default_step_size(shape, "GD", c_eta=args.c_eta)
    cfg = TrainConfig(eta=eta, T=args.T, seed=args.seed, snapshot_every=args.snapshot_every,
                      target_loss=args.target_loss)
    traj = gd_train(w0, data, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    traj.write_jsonl(args.out / "metrics.jsonl")
    if traj.snapshots:
        traj.save_snapshots(args.out / "snapshots.bin")
    save_weights(traj.final, args.out / "final.bin")
    print(json.dumps({"steps": traj.last_step, "loss": traj.loss[-1], "err01": traj.err01[-1],
                      "best_loss": traj.best_loss[-1], "eta": eta}))


def cmd_train_sgd(args):
    data = get_data(args)
    shape = NetworkShape(data.d, args.m, args.L)
    w0 = init_weights(shape, args.seed)
    eta = args.eta if args.eta is not None else default_step_size(
        shape, "SGD", R=args.R, n=data.n, eps_ntrf=args.eps_ntrf, c_eta=args.c_eta)
    cfg = TrainConfig(eta=eta, T=data.n, seed=args.seed, snapshot_every=args.snapshot_every)
    traj, chosen = sgd_train(w0, data, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    traj.write_jsonl(args.out / "metrics.jsonl")
    save_weights(chosen, args.out / "chosen.bin")
    save_weights(traj.final, args.out / "final.bin")
    online = sum(traj.loss) / len(traj.loss)
    print(json.dumps({"examples": data.n, "online_loss": online, "eta": eta}))


def cmd_ntrf_fit(args):
    data = get_data(args)
    w0 = init_weights(NetworkShape(data.d, args.m, args.L), args.seed)
    feats = extract_features(w0, data, args.seed)
    if args.save_features:
        args.out.mkdir(parents=True, exist_ok=True)
        feats.save(args.out / "features.bin")
    fit = fit_projected_gd(feats, args.R, data.y, args.steps, args.lr)
    _emit(args, "ntrf_fit.json", {"eps_ntrf": fit.eps_ntrf, "R": args.R, "lr": fit.lr,
                                  "steps": args.steps, "initial_loss": fit.loss_curve[0],
                                  "layer_norms": [float(v) for v in fit.model.delta.frob_norms()]})


def cmd_probe(args):
    data = get_data(args)
    shape = NetworkShape(data.d, args.m, args.L)
    w0 = init_weights(shape, args.seed)
    tau = args.tau if args.tau is not None else math.sqrt(args.L) * args.R / math.sqrt(args.m)
    ball = BallSpec(w0, tau)
    cands = []
    if args.gd_steps > 0:
        traj = gd_train(w0, data, TrainConfig(eta=default_step_size(shape, "GD"), T=args.gd_steps,
                                              snapshot_every=max(1, args.gd_steps // 10)))
        cands = [w for s, w in sorted(traj.snapshots.items()) if s > 0]
    cands += kink_candidates(ball, data, args.kink_count)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        rep = probe(ball, data, cands, args.random_budget, seed=args.seed)
    obj = json.loads(rep.to_json())
    obj["tau"] = tau
    _emit(args, "probe.json", obj)


def cmd_sep(args):
    data = get_data(args)
    out = {}
    ph = class_distance(data)
    out["phi"] = {"phi": ph.phi, "witness": [ph.i, ph.j]}
    w0 = init_weights(NetworkShape(data.d, args.m, args.L), args.seed)
    rep = ntrf_margin(extract_features(w0, data), data.y, args.iterations)
    out["ntrf_margin"] = json.loads(rep.to_json())
    sh = shallow_ntk_margin(data, args.k, args.seed, args.iterations)
    out["shallow_margin"] = json.loads(sh.to_json())
    args.out.mkdir(parents=True, exist_ok=True)
    sh.save(args.out / "umap.bin")
    _emit(args, "sep.json", out)


def cmd_minwidth(args):
    grid = ex.ExperimentGrid(n_grid=args.n_grid, L=args.L, seeds=args.seeds, budget=args.budget,
                             d=args.d, gamma=args.gamma, master_seed=args.seed,
                             m_start=args.m_start, m_max=args.m_max, policy=args.policy)
    rows = ex.run_minwidth(grid, args.workers)
    path = ex.write_minwidth_csv(rows, args.out / "minwidth.csv")
    print(path.read_text(encoding="utf-8"), end="")


def cmd_scaling(args):
    cfg = ex.ScalingConfig(m_grid=args.m_grid, R=args.R, L=args.L, n=args.n, d=args.d,
                           gamma=args.gamma, seeds=args.seeds, gd_steps=args.gd_steps,
                           kink_count=args.kink_count, random_budget=args.random_budget,
                           master_seed=args.seed)
    res = ex.run_scaling(cfg, args.workers)
    ex.write_scaling(res, args.out)
    print(json.dumps(res.slopes))


def cmd_compete(args):
    cfg = ex.CompeteConfig(n=args.n, d=args.d, gamma=args.gamma, L=args.L, m=args.m, R=args.R,
                           seeds=args.seeds, c_T=args.c_T, fit_steps=args.fit_steps,
                           data_kind=args.kind, phi=args.phi, audit=args.audit,
                           master_seed=args.seed)
    reports, trajs = ex.run_compete(cfg, args.workers)
    ex.write_compete(reports, trajs, args.out)
    print(json.dumps([{"seed": r.seed, "eps_ntrf": r.eps_ntrf, "best_loss": r.best_loss,
                       "achieving_step": r.achieving_step, "passed": r.passed}
                      for r in reports]))


def cmd_sgd_curve(args):
    cfg = ex.SgdCurveConfig(n_grid=args.n_grid, d=args.d, gamma=args.gamma, m=args.m, L=args.L,
                            R=args.R, eps_ntrf=args.eps_ntrf, seeds=args.seeds,
                            test_size=args.test_size, master_seed=args.seed)
    rows, _, fit = ex.run_sgd_sample_complexity(cfg, args.workers)
    ex.write_sgd_curve(rows, fit, args.out)
    print(json.dumps({"test_err01": {r["n"]: r["test_err01"] for r in rows},
                      "a": fit[0], "b": fit[1]}))


def cmd_bounds(args):
    res = ex.bound_curves(args.m, args.n, args.L, args.R, args.delta)
    print(f"NOTE: {ex.BOUND_BANNER}", file=sys.stderr)
    _emit(args, "bounds.json", res)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="ntrflab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_opts(p)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("gen", cmd_gen, "generate a synthetic dataset")
    _data_opts(p)

    p = add("train-gd", cmd_train_gd, "full-batch gradient descent")
    _data_opts(p)
    _net_opts(p)
    p.add_argument("--eta", type=float, default=None, help="default: c_eta / (L m)")
    p.add_argument("--c-eta", type=float, default=0.5)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--target-loss", type=float, default=0.0)
    p.add_argument("--snapshot-every", type=int, default=None)

    p = add("train-sgd", cmd_train_sgd, "single-pass online SGD over the dataset as a stream")
    _data_opts(p)
    _net_opts(p)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--c-eta", type=float, default=0.5)
    p.add_argument("--R", type=float, default=5.0)
    p.add_argument("--eps-ntrf", type=float, default=0.0)
    p.add_argument("--snapshot-every", type=int, default=0)

    p = add("ntrf-fit", cmd_ntrf_fit, "fit the linearised model in the radius-R ball")
    _data_opts(p)
    _net_opts(p)
    p.add_argument("--R", type=float, default=5.0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--save-features", type=boolean, default=False)

    p = add("probe", cmd_probe, "estimate linearisation error and gradient bound")
    _data_opts(p)
    _net_opts(p)
    p.add_argument("--R", type=float, default=5.0)
    p.add_argument("--tau", type=float, default=None, help="default: sqrt(L) R / sqrt(m)")
    p.add_argument("--gd-steps", type=int, default=1000)
    p.add_argument("--kink-count", type=int, default=4)
    p.add_argument("--random-budget", type=int, default=5)

    p = add("sep", cmd_sep, "class distance, NTRF margin and shallow margin")
    _data_opts(p)
    _net_opts(p)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--k", type=int, default=2000)

    p = add("minwidth", cmd_minwidth, "minimum width for zero training error")
    p.add_argument("--n-grid", type=int_list, default=[100, 200, 500, 1000, 2000])
    p.add_argument("--L", type=int, default=5)
    p.add_argument("--seeds", type=int_list, default=[0, 1, 2])
    p.add_argument("--budget", type=int, default=20_000)
    p.add_argument("--d", type=int, default=20)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--m-start", type=int, default=4)
    p.add_argument("--m-max", type=int, default=4096)
    p.add_argument("--policy", choices=("median", "all", "any"), default="median")

    p = add("scaling", cmd_scaling, "probe quantities across widths")
    p.add_argument("--m-grid", type=int_list, default=[64, 128, 256, 512, 1024])
    p.add_argument("--R", type=float, default=5.0)
    p.add_argument("--L", type=int, default=3)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--d", type=int, default=20)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--seeds", type=int_list, default=list(range(10)))
    p.add_argument("--gd-steps", type=int, default=1000)
    p.add_argument("--kink-count", type=int, default=4)
    p.add_argument("--random-budget", type=int, default=5)

    p = add("compete", cmd_compete, "GD against three times eps_ntrf")
    _net_opts(p)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--d", type=int, default=20)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--kind", choices=("margin", "phi"), default="margin")
    p.add_argument("--phi", type=float, default=0.5)
    p.add_argument("--R", type=float, default=5.0)
    p.add_argument("--seeds", type=int_list, default=list(range(5)))
    p.add_argument("--c-T", type=float, default=10.0)
    p.add_argument("--fit-steps", type=int, default=2000)
    p.add_argument("--audit", type=boolean, default=True)

    p = add("sgd-curve", cmd_sgd_curve, "held-out error of SGD against sample size")
    _net_opts(p)
    p.add_argument("--n-grid", type=int_list, default=[500, 1000, 2000, 4000])
    p.add_argument("--d", type=int, default=20)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--R", type=float, default=5.0)
    p.add_argument("--eps-ntrf", type=float, default=0.0)
    p.add_argument("--seeds", type=int_list, default=list(range(5)))
    p.add_argument("--test-size", type=int, default=10_000)

    p = add("bounds", cmd_bounds, "reference curves for the generalisation bound")
    p.add_argument("--m", type=float, required=False, default=1e4)
    p.add_argument("--n", type=float, default=1e4)
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--R", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.01)
    return parser, subs


def _apply_config(argv, subs):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    pre.add_argument("command", nargs="?")
    known, _ = pre.parse_known_args(argv)
    if known.config is None or known.command not in subs:
        return
    cfg = read_config(known.config)
    p = subs[known.command]
    dests = {a.dest for a in p._actions}
    unknown = sorted(set(cfg) - dests)
    if unknown:
        raise InvalidInputError(f"unknown config keys for {known.command}: {', '.join(unknown)}")
    # string defaults are converted by each option's type at parse time
    p.set_defaults(**cfg)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        _apply_config(argv, subs)
        args = parser.parse_args(argv)
        args.func(args)
    except NtrfLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
