"""Command-line interface: ``gramridge {tune,fit,predict,perf,bench,simulate}``.

Exit status is 0 on success, 2 for configuration or input errors and 3 for
numerical failures. Errors are reported as one line on stderr:
``error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import yaml

from .bench import BACKENDS, CrossCheckError, SimSpec, benchmark, simulate
from .cv import UtilitySpec, double_cv, make_folds
from .glm import ConvergenceError, iwls_fit
from .io import (
    BlockSpec,
    ConfigError,
    FitArtifact,
    RunConfig,
    build_artifact,
    ensure_dir,
    ingest,
    read_table,
    write_table,
)
from .linalg import DesignError, PenaltyConfig, RidgeContext
from .marglik import tune_ml
from .tuning import TunerConfig, tune, tune_preferential
from .vb_probit import tune_elbo, vb_dual, vb_fit

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _csv_list(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def _add_run_flags(p):
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int, dest="k")
    p.add_argument("--repeats", type=int)
    p.add_argument("--criterion", choices=["cvl", "auc", "cindex", "mse"])
    p.add_argument("--method", choices=["cv", "ml", "vb"])
    p.add_argument("--preferred", type=_csv_list, help="comma-separated block names")
    p.add_argument("--paired", type=_csv_list, help="blockA,blockB")
    p.add_argument("--workers", type=int)
    p.add_argument("--global-iters", type=int, dest="global_iters")
    p.add_argument("--local-iters", type=int, dest="local_iters")
    p.add_argument("--out", dest="output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gramridge", description="Multi-penalty ridge regression")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tune", help="tune penalties; writes penalties.json and trace.tsv")
    _add_run_flags(p)

    p = sub.add_parser("fit", help="tune (unless --lambdas) and fit; writes fit.json")
    _add_run_flags(p)
    p.add_argument("--lambdas", type=lambda s: [float(v) for v in _csv_list(s)])

    p = sub.add_parser("predict", help="predict new samples from a fit artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--config", required=True, help="YAML config naming the new block files")
    p.add_argument("--out", dest="output")

    p = sub.add_parser("perf", help="double cross-validation; writes metrics.tsv")
    _add_run_flags(p)
    p.add_argument("--outer-folds", type=int, default=3)

    p = sub.add_parser("bench", help="timing comparison of hat-matrix backends")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--p", type=int, default=5000, help="columns per block")
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--budget", type=int, default=1000)
    p.add_argument("--backends", type=_csv_list, default=list(BACKENDS))
    p.add_argument("--naive-evals", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", dest="output", default=".")

    p = sub.add_parser("simulate", help="write a synthetic data set and config")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--p", type=lambda s: [int(v) for v in _csv_list(s)], default=[50, 50],
                   help="comma-separated block sizes")
    p.add_argument("--lambdas", type=lambda s: [float(v) for v in _csv_list(s)])
    p.add_argument("--family", choices=["linear", "logistic", "probit", "cox"], default="logistic")
    p.add_argument("--censoring", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", dest="output", default=".")
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    for key in ("seed", "k", "repeats", "criterion", "method", "preferred", "paired", "workers",
                "global_iters", "local_iters", "output"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "output", None) is not None:
        # command-line paths are relative to the working directory, not the config file
        cfg.output = str(Path(args.output).resolve())
    return cfg


def _tuner(cfg: RunConfig) -> TunerConfig:
    return TunerConfig(global_iters=cfg.global_iters, local_iters=cfg.local_iters,
                       bounds=tuple(cfg.bounds), seed=cfg.seed, workers=cfg.workers)


def _run_tuning(cfg: RunConfig, ctx: RidgeContext, response):
    tcfg = _tuner(cfg)
    if cfg.method == "ml":
        return tune_ml(ctx, response, tcfg, preferred=cfg.preferred or None)
    if cfg.method == "vb":
        if cfg.preferred:
            raise ConfigError("preferential tuning is not available for method vb")
        return tune_elbo(ctx, response.y, tcfg)
    plan = make_folds(response, min(cfg.k, response.n), cfg.repeats, cfg.seed, cfg.stratify)
    utility = UtilitySpec(cfg.criterion)
    utility.check_family(response.family)
    if cfg.preferred:
        return tune_preferential(ctx, response, plan, utility, tcfg, cfg.preferred)
    return tune(ctx, response, plan, utility, tcfg)


def _penalties_json(pen: PenaltyConfig, ctx: RidgeContext, utility) -> dict:
    return {
        "block_names": list(ctx.block_names),
        "lambdas": [float(v) for v in pen.lambdas],
        "cross": None if pen.cross is None else float(pen.cross),
        "utility": None if utility is None or np.isnan(utility) else float(utility),
    }


def _write_trace(path, ctx, trace):
    header = ["eval"] + [f"lambda_{n}" for n in ctx.block_names] + ["cross", "utility"]
    rows = [[i] + list(lam) + ["" if c is None else float(c), float(u)]
            for i, (lam, c, u) in enumerate(trace)]
    write_table(path, header, rows)


def cmd_tune(args) -> int:
    cfg = _config(args)
    design, response, _ = ingest(cfg)
    ctx = RidgeContext.from_design(design)
    res = _run_tuning(cfg, ctx, response)
    out = ensure_dir(cfg.resolve(cfg.output))
    (out / "penalties.json").write_text(
        json.dumps(_penalties_json(res.penalties, ctx, res.utility), sort_keys=True, indent=1) + "\n")
    _write_trace(out / "trace.tsv", ctx, res.trace)
    print("lambdas\t" + "\t".join(repr(float(v)) for v in res.penalties.lambdas))
    return 0


def _link(cfg: RunConfig) -> str:
    if cfg.method == "vb":
        return "probit"
    return {"linear": "identity", "logistic": "logit", "cox": "log"}[cfg.family]


def cmd_fit(args) -> int:
    cfg = _config(args)
    design, response, ids = ingest(cfg)
    ctx = RidgeContext.from_design(design)
    trace = ()
    if args.lambdas is not None:
        if len(args.lambdas) != ctx.n_blocks:
            raise ConfigError(f"--lambdas needs {ctx.n_blocks} values")
        pen = PenaltyConfig(args.lambdas)
    else:
        res = _run_tuning(cfg, ctx, response)
        pen, trace = res.penalties, res.trace
    if cfg.method == "vb":
        gamma = ctx.gamma(pen)
        st = vb_fit(gamma, response.y)
        if not st.converged:
            raise ConvergenceError("VB iteration did not converge")
        fit_like = SimpleNamespace(dual=vb_dual(st, gamma), unpen_coef=np.zeros(0), eta=st.mu_eta,
                                   converged=True, kernels=(), baseline=None)
    else:
        fit_like = iwls_fit(ctx, pen, response)
        if not fit_like.converged:
            raise ConvergenceError(f"IWLS did not converge in {fit_like.iterations} iterations")
    art = build_artifact(fit_like, design, pen, cfg.family, _link(cfg), ids, trace, cfg.fingerprint())
    out = ensure_dir(cfg.resolve(cfg.output))
    art.save(out / "fit.json")
    if trace:
        _write_trace(out / "trace.tsv", ctx, trace)
    print(f"wrote {out / 'fit.json'}")
    return 0


def cmd_predict(args) -> int:
    art = FitArtifact.load(args.artifact)
    cfg = RunConfig.from_file(args.config)
    if args.output:
        cfg.output = str(Path(args.output).resolve())
    by_role = {b.role: [] for b in cfg.blocks}
    for b in cfg.blocks:
        by_role.setdefault(b.role, []).append(b)
    pen_specs = {b.name: b for b in by_role.get("penalized", [])}
    missing = [n for n in art.block_names if n not in pen_specs]
    if missing:
        raise ConfigError(f"config lacks blocks required by the artifact: {missing}")
    ref_ids = None
    blocks = []
    for name in art.block_names:
        path = cfg.resolve(pen_specs[name].path)
        ids, _, vals = read_table(path)
        if ref_ids is None:
            ref_ids = ids
        elif set(ids) != set(ref_ids):
            raise ConfigError(f"{path}: sample ids differ from the first block")
        pos = {s: i for i, s in enumerate(ids)}
        blocks.append(vals[[pos[s] for s in ref_ids]])
    unpen = None
    if by_role.get("unpenalized"):
        ids, _, vals = read_table(cfg.resolve(by_role["unpenalized"][0].path))
        pos = {s: i for i, s in enumerate(ids)}
        unpen = vals[[pos[s] for s in ref_ids]]
    eta = art.predict(blocks, unpen)
    scale = art.response_scale(eta)
    out = ensure_dir(cfg.resolve(cfg.output))
    label = {"logit": "probability", "probit": "probability", "log": "relative_risk",
             "identity": "mean"}[art.link]
    write_table(out / "predictions.tsv", ["id", "eta", label],
                [[i, float(e), float(s)] for i, e, s in zip(ref_ids, eta, scale)])
    print(f"wrote {out / 'predictions.tsv'}")
    return 0


def cmd_perf(args) -> int:
    cfg = _config(args)
    if cfg.method == "vb":
        raise ConfigError("perf supports methods cv and ml")
    design, response, _ = ingest(cfg)
    ctx = RidgeContext.from_design(design)
    report = double_cv(ctx, response, args.outer_folds, cfg.k, cfg.repeats, _tuner(cfg),
                       UtilitySpec(cfg.criterion), seed=cfg.seed, method=cfg.method)
    out = ensure_dir(cfg.resolve(cfg.output))
    (out / "metrics.tsv").write_text(report.table())
    print(f"mean {report.criterion}\t{report.mean!r}")
    return 0


def cmd_bench(args) -> int:
    spec = SimSpec(args.n, (args.p,) * args.blocks, (1.0,) * args.blocks, "linear", seed=args.seed)
    report = benchmark(spec, args.budget, args.backends, max_timed={"naive": args.naive_evals})
    out = ensure_dir(args.output)
    (out / "bench.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    (out / "bench.txt").write_text(report.table())
    print(report.table(), end="")
    return 0


def cmd_simulate(args) -> int:
    sizes = tuple(args.p)
    lambdas = tuple(args.lambdas) if args.lambdas else (1.0,) * len(sizes)
    spec = SimSpec(args.n, sizes, lambdas, args.family, args.censoring, args.seed)
    design, response, beta = simulate(spec)
    out = ensure_dir(args.output)
    ids = [f"s{i + 1}" for i in range(args.n)]
    blocks = []
    for b, x in enumerate(design.blocks):
        name = f"block{b + 1}"
        fname = f"{name}.csv"
        with open(out / fname, "w") as fh:
            fh.write("id," + ",".join(f"{name}_{j + 1}" for j in range(x.shape[1])) + "\n")
            for sid, row in zip(ids, x):
                fh.write(sid + "," + ",".join(repr(float(v)) for v in row) + "\n")
        blocks.append({"name": name, "path": fname})
    with open(out / "response.csv", "w") as fh:
        if response.family == "cox":
            fh.write("id,time,status\n")
            for sid, t, d in zip(ids, response.time, response.event):
                fh.write(f"{sid},{float(t)!r},{int(d)}\n")
        else:
            fh.write("id,y\n")
            for sid, yv in zip(ids, response.y):
                fh.write(f"{sid},{float(yv)!r}\n")
    write_table(out / "beta.tsv", ["index", "beta"], [[j, float(v)] for j, v in enumerate(beta)])
    family = "logistic" if args.family == "probit" else args.family
    config = {"blocks": blocks, "response": {"path": "response.csv", "family": family},
              "folds": {"k": 10, "seed": args.seed}, "output": "."}
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    print(f"wrote simulated data to {out}")
    return 0


COMMANDS = {
    "tune": cmd_tune,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "perf": cmd_perf,
    "bench": cmd_bench,
    "simulate": cmd_simulate,
}


def _fail(kind: str, exc: Exception, code: int) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def run_command(argv=None) -> int:
    """Parse ``argv`` and dispatch; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (np.linalg.LinAlgError, ConvergenceError, CrossCheckError, FloatingPointError) as exc:
        return _fail("numerical", exc, EXIT_NUMERIC)
    except (ConfigError, DesignError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        return _fail("config", exc, EXIT_CONFIG)


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
