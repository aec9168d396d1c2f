"""Command-line entry point: ``ndopt <command> [flags]``.

Exit codes: 0 success, 2 usage or invalid parameters, 3 I/O or malformed
files, 4 gain-check failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import metrics as M
from .csst import SelfTrainConfig, csst_train
from .data_io import FeatureFormatError, SyntheticSpec, gen_longtail_gaussians, load_bundle, save_bundle
from .experiments import erm_init
from .linear_model import TrainConfig, add_bias, load_checkpoint, predict, save_checkpoint
from .oracle import gain_check
from .selmix import POLICIES, finetune, gain_stream, hedge_rate, simulate_policies

log = logging.getLogger("ndopt")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CHECK = 0, 2, 3, 4
OBJECTIVES = [k.value for k in M.MetricKind]
CSST_OBJECTIVES = ["mean", "min-recall", "mean-cov", "min-ht", "mean-ht-cov"]
TABLE_COLUMNS = ("mean_recall", "min_recall", "hmean", "gmean", "min_coverage")


class UsageError(Exception):
    pass


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ndopt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic long-tailed dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--k", type=int, default=5)
    g.add_argument("--d", type=int, default=10)
    g.add_argument("--n1", type=int, default=1000)
    g.add_argument("--rho-l", type=float, default=100.0)
    g.add_argument("--rho-u", type=float, default=100.0)
    g.add_argument("--m1", type=int, default=2000)
    g.add_argument("--sep", type=float, default=3.0)
    g.add_argument("--n-val", type=int, default=100)
    g.add_argument("--n-test", type=int, default=500)

    f = sub.add_parser("finetune", parents=[common], help="selective-mixup fine-tuning")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--init", help="starting checkpoint (default: ERM on the labeled split)")
    f.add_argument("--objective", choices=OBJECTIVES, default="min-recall")
    f.add_argument("--policy", choices=POLICIES, default="selmix")
    f.add_argument("--s", type=float, default=10.0)
    f.add_argument("--omega", type=float, default=20.0)
    f.add_argument("--lambda-max", type=float, default=100.0)
    f.add_argument("--tau-cov", type=float, default=0.01)
    f.add_argument("--alpha", type=float, default=0.95)
    f.add_argument("--beta-min", type=float, default=0.6)
    f.add_argument("--eta", type=float, default=0.005)
    f.add_argument("--steps", type=int, default=1000, help="total SGD steps")
    f.add_argument("--cycle", type=int, default=50, help="SGD steps between gain updates")
    f.add_argument("--batch-size", type=int, default=64)
    mode = f.add_mutually_exclusive_group()
    mode.add_argument("--semi", dest="semi", action="store_true", default=True)
    mode.add_argument("--sup", dest="semi", action="store_false")
    f.add_argument("--dump-gains", action="store_true")

    c = sub.add_parser("csst", parents=[common], help="cost-sensitive self-training")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--init")
    c.add_argument("--objective", choices=CSST_OBJECTIVES, default="min-recall")
    c.add_argument("--lambda-u", type=float, default=1.0)
    c.add_argument("--tau-kl", type=float, default=0.3)
    c.add_argument("--sigma-aug", type=float, default=None)
    c.add_argument("--omega", type=float, default=0.25)
    c.add_argument("--alpha", type=float, default=0.95)
    c.add_argument("--eval-period", type=int, default=32)
    c.add_argument("--steps", type=int, default=1600)
    c.add_argument("--lr", type=float, default=0.02)
    c.add_argument("--batch-size", type=int, default=64)
    c.add_argument("--mu", type=int, default=4)
    c.add_argument("--vanilla", action="store_true", help="fix G = I (plain self-training)")

    s = sub.add_parser("simulate-policy", parents=[common], help="regret of the softmax policy")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--t", type=int, default=1000)
    s.add_argument("--s", type=float, default=None,
                   help="policy scale (default 10, or 2 sqrt(ln K / T) with --hedge)")
    s.add_argument("--streams", type=int, default=100)
    s.add_argument("--dist", choices=("constant", "random", "adversarial"), default="random")
    s.add_argument("--hedge", action="store_true", help="use gains strictly before t")
    s.add_argument("--out")

    v = sub.add_parser("gain-check", parents=[common], help="finite-difference self-test")
    v.add_argument("--k", default="2,3,5", help="comma-separated class counts")
    v.add_argument("--trials", type=int, default=5)
    v.add_argument("--rtol", type=float, default=1e-4)
    v.add_argument("--inject-bug", action="store_true")
    v.add_argument("--out")

    return parser, {name: p for name, p in sub.choices.items()}


# -- config files ------------------------------------------------------------------


def read_config(path):
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _config_defaults(subparser, values):
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    out = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r}")
        try:
            if action.nargs == 0:
                # boolean switches: the value is the destination's value itself
                val = _bool(text)
            else:
                val = action.type(text) if action.type else text
        except ValueError as exc:
            raise UsageError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and val not in action.choices:
            raise UsageError(f"config key {key!r}: {val!r} not in {list(action.choices)}")
        out[key] = val
    return out


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config(args.config)
        except OSError as exc:
            raise OSError(f"cannot read config: {exc}") from exc
        subs[args.command].set_defaults(**_config_defaults(subs[args.command], values))
        args = parser.parse_args(argv)
    return args


# -- reports ------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_jsonable)
    if path is None:
        print(text)
        return
    with open(path, "w") as fh:
        fh.write(text + "\n")


def write_metric_table(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("cycle",) + TABLE_COLUMNS)
        for cycle, row in rows:
            writer.writerow([cycle] + [f"{row[c]:.9g}" for c in TABLE_COLUMNS])


def print_table(title, rows):
    print(title)
    print(f"{'':>10}" + "".join(f"{c:>14}" for c in TABLE_COLUMNS))
    for label, row in rows:
        print(f"{label:>10}" + "".join(f"{row[c]:>14.4f}" for c in TABLE_COLUMNS))


def _run_config(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}


def _initial_model(args, bundle):
    if args.init:
        m = load_checkpoint(args.init)
        if m.d != bundle.labeled.d + 1:
            raise ValueError("checkpoint dimension does not match the dataset (+1 bias row)")
        return m
    return erm_init(bundle)


def _split_eval(m, fm, k):
    return M.evaluate(M.confusion_from_predictions(fm.labels, predict(m, add_bias(fm.x)), k)).as_row()


def _objective_spec(args, bundle, **extra):
    spec = M.MetricSpec(args.objective, alpha=args.alpha, **extra)
    if spec.kind.is_head_tail:
        spec = spec.with_default_partition(np.bincount(bundle.labeled.labels, minlength=bundle.k))
    return spec


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args):
    spec = SyntheticSpec(k=args.k, d=args.d, n1=args.n1, rho_l=args.rho_l, rho_u=args.rho_u,
                         m1=args.m1, sep=args.sep, seed=args.seed, n_val=args.n_val,
                         n_test=args.n_test)
    bundle = gen_longtail_gaussians(spec)
    manifest = save_bundle(bundle, args.out, spec)
    for name, entry in manifest["files"].items():
        print(f"{name:>10}  {entry['rows']:>6} x {entry['cols']:<4} {entry['sha256'][:16]}")
    return EXIT_OK


def cmd_finetune(args):
    if args.cycle < 1 or args.steps < 0 or args.steps % args.cycle:
        raise ValueError("--steps must be a nonnegative multiple of --cycle")
    bundle = load_bundle(args.data)
    m0 = _initial_model(args, bundle)
    spec = _objective_spec(args, bundle, omega=args.omega, lambda_max=args.lambda_max,
                           tau_cov=args.tau_cov)
    cfg = TrainConfig(eta=args.eta, beta_min=args.beta_min, batch_size=args.batch_size,
                      steps_per_cycle=args.cycle, cycles=args.steps // args.cycle,
                      seed=args.seed, s=args.s)
    m, trace = finetune(bundle, m0, spec, cfg, args.policy, semi=args.semi,
                        keep_gains=args.dump_gains)
    os.makedirs(args.out, exist_ok=True)
    report = {
        "schema": "ndopt.finetune-report/1",
        "config": _run_config(args),
        "train_config": asdict(cfg),
        "initial": {"val": _split_eval(m0, bundle.val, bundle.k),
                    "test": _split_eval(m0, bundle.test, bundle.k)},
        "final": {"val": _split_eval(m, bundle.val, bundle.k),
                  "test": _split_eval(m, bundle.test, bundle.k)},
        "cycles": trace.records,
        "notes": trace.notes,
    }
    write_json(os.path.join(args.out, "report.json"), report)
    write_metric_table(os.path.join(args.out, "metrics.csv"),
                       [(r["cycle"], r["eval"]) for r in trace.records])
    save_checkpoint(m, os.path.join(args.out, "model.ndw"), cfg)
    if args.dump_gains:
        with open(os.path.join(args.out, "gains.csv"), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("cycle", "i", "j", "gain"))
            for r in trace.records:
                for (i, j), g in np.ndenumerate(np.asarray(r.get("gain", []))):
                    writer.writerow((r["cycle"], i, j, f"{g:.9g}"))
    print_table(f"{args.objective} / {args.policy} (validation)",
                [("initial", report["initial"]["val"]), ("final", report["final"]["val"])])
    return EXIT_OK


def cmd_csst(args):
    bundle = load_bundle(args.data)
    m0 = _initial_model(args, bundle)
    spec = _objective_spec(args, bundle)
    cfg = SelfTrainConfig(lambda_u=args.lambda_u, tau_kl=args.tau_kl, sigma_aug=args.sigma_aug,
                          omega=args.omega, eval_period=args.eval_period, steps=args.steps,
                          lr=args.lr, batch_size=args.batch_size, mu=args.mu, seed=args.seed)
    fixed = np.eye(bundle.k) if args.vanilla else None
    m, trace = csst_train(bundle, m0, spec, cfg, fixed_gain=fixed)
    os.makedirs(args.out, exist_ok=True)
    report = {
        "schema": "ndopt.csst-report/1",
        "config": _run_config(args),
        "train_config": asdict(cfg),
        "initial": {"val": _split_eval(m0, bundle.val, bundle.k),
                    "test": _split_eval(m0, bundle.test, bundle.k)},
        "final": {"val": _split_eval(m, bundle.val, bundle.k),
                  "test": _split_eval(m, bundle.test, bundle.k)},
        "mask_rate": [[r["cycle"], r["mask_rate"]] for r in trace.records],
        "evals": trace.records,
        "notes": trace.notes,
    }
    write_json(os.path.join(args.out, "report.json"), report)
    write_metric_table(os.path.join(args.out, "metrics.csv"),
                       [(r["cycle"], r["eval"]) for r in trace.records])
    save_checkpoint(m, os.path.join(args.out, "model.ndw"), cfg)
    title = "self-training, G = I" if args.vanilla else f"csst {args.objective}"
    print_table(f"{title} (validation)",
                [("initial", report["initial"]["val"]), ("final", report["final"]["val"])])
    return EXIT_OK


def cmd_simulate_policy(args):
    if args.k < 2 or args.t < 1 or args.streams < 1:
        raise ValueError("need k >= 2, t >= 1 and streams >= 1")
    s = args.s
    if s is None:
        s = hedge_rate(args.k, args.t) if args.hedge else 10.0
    rng = np.random.default_rng(args.seed)
    reports = [simulate_policies(gain_stream(args.dist, args.k, args.t, rng), s,
                                 lookahead=not args.hedge)
               for _ in range(args.streams)]
    out = {
        "schema": "ndopt.regret-report/1",
        "config": _run_config(args),
        "s": s,
        "bound": reports[0].bound,
        "max_regret": max(r.regret for r in reports),
        "all_hold": all(r.holds for r in reports),
        "streams": [r.to_dict() for r in reports],
    }
    write_json(args.out, out)
    if args.out:
        print(f"max regret {out['max_regret']:.3e}  bound {out['bound']:.3e}  "
              f"holds {out['all_hold']}")
    return EXIT_OK


def cmd_gain_check(args):
    try:
        ks = tuple(int(v) for v in args.k.split(","))
    except ValueError as exc:
        raise UsageError(f"--k: {exc}") from exc
    report = gain_check(seed=args.seed, ks=ks, trials=args.trials, rtol=args.rtol,
                        inject_bug=args.inject_bug)
    report["config"] = _run_config(args)
    write_json(args.out, report)
    if args.out:
        print(f"{report['n_checks'] - report['n_failed']}/{report['n_checks']} checks passed")
    return EXIT_OK if report["passed"] else EXIT_CHECK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "finetune": cmd_finetune,
    "csst": cmd_csst,
    "simulate-policy": cmd_simulate_policy,
    "gain-check": cmd_gain_check,
}


def _thread_limit():
    raw = os.environ.get("NDOPT_THREADS")
    if not raw:
        return contextlib.nullcontext()
    n = int(raw)
    if n < 1:
        raise ValueError("NDOPT_THREADS must be a positive integer")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    except UsageError as exc:
        print(f"ndopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"ndopt: error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ndopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FeatureFormatError) as exc:
        print(f"ndopt: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"ndopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
