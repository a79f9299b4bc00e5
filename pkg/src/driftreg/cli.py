"""``driftreg`` command line: synth, pretrain, register, finetune, evaluate."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import cpd, graphnet, pipeline, synth
from .evaluation import METHOD_ORDER, TREStats, emit_report, rank_sum_test

log = logging.getLogger("driftreg")

REGISTER_METHODS = ("center", "knn", "cpd", "feat-cpd")
EVAL_METHODS = ("initial",) + REGISTER_METHODS + ("end-to-end",)

# config key -> type; each key is also a flag (underscores become dashes)
PARAM_FLAGS = {
    "alpha": float, "rho": float, "w": float, "lam": float, "beta": float,
    "iters": int, "feature_mode": str,
    "count": int, "seed": int, "knn_k": int, "repeats": int,
    "epochs": int, "lr": float, "margin": float, "init_seed": int, "k": int,
    "steps": int, "ft_lr": float, "unroll": int, "ft_rho": float, "ft_beta": float,
}
DEFAULTS = {
    "count": 4096, "seed": 0, "knn_k": 20, "repeats": 10,
    "epochs": 200, "lr": 1e-3, "margin": 0.2, "init_seed": 0, "k": 20,
    "steps": 50, "ft_lr": 1e-4, "unroll": 15, "ft_rho": 0.25, "ft_beta": 0.5,
}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class PipelineConfig:
    cpd: cpd.CPDParams
    count: int
    seed: int
    knn_k: int
    repeats: int
    epochs: int
    lr: float
    margin: float
    init_seed: int
    k: int
    steps: int
    ft_lr: float
    unroll: int
    ft_rho: float
    ft_beta: float

    @property
    def finetune_params(self):
        return self.cpd.relaxed(rho=self.ft_rho, beta=self.ft_beta, iterations=self.unroll)

    @property
    def end_to_end_params(self):
        # descriptors were tuned against the relaxed feature width; the kernel width
        # is only relaxed to let short unrolled runs move, so inference keeps beta
        return dataclasses.replace(self.cpd, rho=self.ft_rho)


def build_config(args):
    """Merge the JSON ``params`` object from ``--config`` with explicit flags."""
    values = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        params = raw.get("params", {}) if isinstance(raw, dict) else None
        if not isinstance(params, dict):
            raise ConfigError("config must be a JSON object with a flat 'params' object")
        unknown = sorted(set(params) - set(PARAM_FLAGS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in params.items():
            try:
                values[key] = PARAM_FLAGS[key](value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    for key in PARAM_FLAGS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    cpd_kw = {k: values.pop(k) for k in ("alpha", "rho", "w", "lam", "beta", "feature_mode") if k in values}
    if "iters" in values:
        cpd_kw["iterations"] = values.pop("iters")
    try:
        cfg = PipelineConfig(cpd=cpd.CPDParams(**cpd_kw), **values)
        graphnet.TrainConfig(lr=cfg.lr, margin=cfg.margin)
        cfg.finetune_params
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for name in ("count", "repeats", "epochs", "knn_k", "k", "unroll"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    if cfg.steps < 0:
        raise ConfigError("steps must be >= 0")
    return cfg


def threads():
    try:
        return max(1, int(os.environ.get("DRIFTREG_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, jobs):
    """Run ``fn`` over ``jobs`` in job order, in parallel when DRIFTREG_THREADS > 1."""
    n = min(threads(), len(jobs))
    if n <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _load_net(path, required=True):
    if path is None:
        if required:
            raise ConfigError("this method needs --weights")
        return None
    return graphnet.load_params(path)


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args, cfg):
    case = synth.make_case(args.kind, args.n, deform_seed=args.deform_seed, noise_sigma=args.noise,
                           outlier_frac=args.outlier_frac, supervision_count=args.supervision_count,
                           eval_count=args.eval_count, seed=args.seed, shape_seed=args.shape_seed)
    synth.save_case(case, args.out)
    print(f"wrote {args.out} (initial TRE {case.initial_tre:.3f} mm)")


def _pretrain(cases, cfg):
    init = graphnet.init_params(cfg.init_seed, k=cfg.k)
    tcfg = graphnet.TrainConfig(lr=cfg.lr, epochs=cfg.epochs, margin=cfg.margin, seed=cfg.seed)
    net = pipeline.pretrain(cases, init, tcfg, count=cfg.count, seed=cfg.seed)
    return net, tcfg.history


def _finetune(cases, net, cfg):
    fcfg = pipeline.FinetuneConfig(steps=cfg.steps, lr=cfg.ft_lr, seed=cfg.seed, count=cfg.count)
    net = pipeline.finetune(cases, net, cfg.finetune_params, fcfg)
    return net, fcfg.history


def cmd_pretrain(args, cfg):
    cases = [synth.load_case(d) for d in args.cases]
    net, history = _pretrain(cases, cfg)
    graphnet.save_params(net, args.out)
    print(f"wrote {args.out} (triplet loss {history[0]:.4f} -> {history[-1]:.4f})")


def cmd_finetune(args, cfg):
    cases = [synth.load_case(d) for d in args.cases]
    net, history = _finetune(cases, _load_net(args.weights), cfg)
    graphnet.save_params(net, args.out)
    if history:
        print(f"wrote {args.out} (correspondence loss {history[0]:.3f} -> {history[-1]:.3f})")
    else:
        print(f"wrote {args.out} (no steps)")


def cmd_register(args, cfg):
    case = synth.load_case(args.case)
    net = _load_net(args.weights, required=args.method in ("knn", "feat-cpd"))
    at_landmarks, sample, disp = pipeline.run_method(case, args.method, cfg.cpd, net,
                                                     cfg.count, cfg.seed, cfg.knn_k)
    out = Path(args.out or args.case)
    out.mkdir(parents=True, exist_ok=True)
    header = "x,y,z,dx,dy,dz"
    np.savetxt(out / "displacements.csv", np.hstack([sample.moving, disp]), delimiter=",",
               header=header, comments="", fmt="%.17g")
    warped = case.eval_landmarks.moving + at_landmarks
    np.savetxt(out / "warped_eval.csv", warped, delimiter=",", header="x,y,z", comments="", fmt="%.17g")
    stats = TREStats.from_errors(np.linalg.norm(case.eval_landmarks.fixed - warped, axis=1))
    print(f"{args.method}: eval TRE {stats.mean:.3f} +- {stats.std:.3f} mm over {stats.count} landmarks")


def _evaluate_case(case_dir, case, methods, cfg, net, tuned):
    """Per-landmark errors averaged over ``cfg.repeats`` FPS re-samplings."""
    rows = []
    for method in methods:
        if method == "end-to-end":
            mparams, mname, mnet = cfg.end_to_end_params, "feat-cpd", tuned
        else:
            mparams, mname, mnet = cfg.cpd, method, net
        runs = [pipeline.evaluate_method(case, mname, mparams, mnet, cfg.count, cfg.seed + r, cfg.knn_k).errors
                for r in range(cfg.repeats)]
        rows.append({"case": case_dir, "method": method, "stats": TREStats.from_errors(np.mean(runs, axis=0))})
        log.info("%s %s %.3f", case_dir, method, rows[-1]["stats"].mean)
    return rows


def _loo_job(i, dirs, methods, cfg):
    cases = [synth.load_case(d) for d in dirs]
    train = cases[:i] + cases[i + 1:]
    net = tuned = None
    if any(m in ("knn", "feat-cpd", "end-to-end") for m in methods):
        net, _ = _pretrain(train, cfg)
    if "end-to-end" in methods:
        tuned, _ = _finetune(train, net, cfg)
    return _evaluate_case(dirs[i], cases[i], methods, cfg, net, tuned)


def _fixed_job(i, dirs, methods, cfg, weights, finetuned):
    return _evaluate_case(dirs[i], synth.load_case(dirs[i]), methods, cfg,
                          _load_net(weights, False), _load_net(finetuned, False))


def comparisons(results, methods):
    """Rank-sum p-values between neighbouring methods, pooling landmark errors over cases."""
    pooled = {m: np.concatenate([r["stats"].errors for r in results if r["method"] == m]) for m in methods}
    ordered = sorted(methods, key=lambda m: METHOD_ORDER.index(m))
    return [(a, b, rank_sum_test(pooled[a], pooled[b])) for a, b in zip(ordered, ordered[1:])]


def cmd_evaluate(args, cfg):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in EVAL_METHODS]
    if bad or not methods:
        raise ConfigError(f"unknown methods {bad}; choose from {', '.join(EVAL_METHODS)}")
    if len(set(methods)) != len(methods):
        raise ConfigError("methods listed twice")
    dirs = [str(d) for d in args.case]
    if args.loo:
        if len(dirs) < 2:
            raise ConfigError("--loo needs at least two cases")
        jobs = [(i, dirs, methods, cfg) for i in range(len(dirs))]
        per_case = _map(_loo_job, jobs)
    else:
        if any(m in ("knn", "feat-cpd") for m in methods) and args.weights is None:
            raise ConfigError("knn and feat-cpd need --weights (or use --loo)")
        if "end-to-end" in methods and args.finetuned is None:
            raise ConfigError("end-to-end needs --finetuned (or use --loo)")
        jobs = [(i, dirs, methods, cfg, args.weights, args.finetuned) for i in range(len(dirs))]
        per_case = _map(_fixed_job, jobs)
    results = [row for rows in per_case for row in rows]
    comps = comparisons(results, methods) if len(methods) > 1 else None
    out = Path(args.out)
    emit_report(results, out, comps)
    for m in sorted(methods, key=lambda m: METHOD_ORDER.index(m)):
        means = [r["stats"].mean for r in results if r["method"] == m]
        print(f"{m:>11}: mean TRE {np.mean(means):.3f} mm")
    print(f"wrote {out / 'results.csv'}")


# -- argument parsing -------------------------------------------------------------

def _add_param_flags(p):
    g = p.add_argument_group("parameters (override --config)")
    g.add_argument("--config", help="JSON file with a flat 'params' object")
    for key, typ in PARAM_FLAGS.items():
        flag = "--" + key.replace("_", "-")
        g.add_argument(flag, dest=key, type=typ, default=None)


def make_parser():
    parser = argparse.ArgumentParser(prog="driftreg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic case directory")
    p.add_argument("--kind", default="branching_tree", choices=synth.SHAPES)
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deform-seed", type=int, default=None)
    p.add_argument("--shape-seed", type=int, default=None)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--outlier-frac", type=float, default=0.0)
    p.add_argument("--supervision-count", type=int, default=128)
    p.add_argument("--eval-count", type=int, default=100)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="triplet pretraining of the descriptor network")
    p.add_argument("--cases", nargs="+", required=True)
    p.add_argument("--out", required=True, help="weights JSON")
    _add_param_flags(p)

    p = sub.add_parser("register", help="register one case with one method")
    p.add_argument("--method", required=True, choices=REGISTER_METHODS)
    p.add_argument("--case", required=True)
    p.add_argument("--weights")
    p.add_argument("--out", help="output directory (default: the case directory)")
    _add_param_flags(p)

    p = sub.add_parser("finetune", help="end-to-end training through unrolled CPD")
    p.add_argument("--cases", nargs="+", required=True)
    p.add_argument("--weights", required=True, help="pretrained weights JSON")
    p.add_argument("--out", required=True, help="fine-tuned weights JSON")
    _add_param_flags(p)

    p = sub.add_parser("evaluate", help="TRE per method, rank-sum tests and report")
    p.add_argument("--case", nargs="+", required=True)
    p.add_argument("--methods", default="initial,center,cpd")
    p.add_argument("--weights")
    p.add_argument("--finetuned")
    p.add_argument("--loo", action="store_true", help="train on the other cases for each held-out case")
    p.add_argument("--out", default="report")
    _add_param_flags(p)
    return parser


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "register": cmd_register,
            "finetune": cmd_finetune, "evaluate": cmd_evaluate}


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            if args.deform_seed is None:
                args.deform_seed = args.seed
            cfg = None
        else:
            cfg = build_config(args)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError, ValueError, np.linalg.LinAlgError, KeyError) as exc:
        print(f"driftreg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
