"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 file-system errors.
Every subcommand writes its outputs and a ``manifest.json`` under ``--out``.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .bcf import (BcfConfig, estimate_propensity, fit_bcf, fit_logistic_propensity,
                  summarize_tau)
from .bench import (METHODS, BenchConfig, fit_two_models, raw_csv, render_table, run_grid,
                    runtime_csv)
from .config import (RunManifest, atomic_target, atomic_write, load_config, normalize_key, now,
                     sha256_file)
from .data import (ValidationError, design_matrix, load_csv, load_treatment_csv, parse_kind,
                   write_csv)
from .dgp import generate
from .forest.sampler import PROBIT_CONFIG, BartConfig, fit_bart, fit_probit_bart
from .ric_linear import b_shift_decomposition, random_problem, ric_report
from .summarize import fit_summary_tree, subgroup_contrast

MODELS = METHODS


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *a, **kw):
        kw.setdefault("allow_abbrev", False)
        super().__init__(*a, **kw)

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# per-command defaults; argparse itself defaults to None so that values given
# on the command line can be told apart from values to take from --config
DEFAULTS: dict[str, dict[str, object]] = {}
SUBPARSERS: dict[str, argparse.ArgumentParser] = {}


def _opt(p, cmd: str, flag: str, default=None, help: str = "", **kw):
    dest = normalize_key(flag)
    DEFAULTS.setdefault(cmd, {})[dest] = default
    if default is not None and kw.get("action") != "append":
        help = f"{help} (default: {default})".strip()
    p.add_argument(flag, dest=dest, default=None, help=help, **kw)


def _common(p, cmd: str):
    _opt(p, cmd, "--out", ".", "output directory")
    _opt(p, cmd, "--seed", 0, "random seed", type=int)
    _opt(p, cmd, "--jobs", 1, "worker processes", type=int)
    p.add_argument("--config", default=None, help="key = value file (or a run manifest); "
                   "command-line flags take precedence")


def _data_opts(p, cmd: str):
    _opt(p, cmd, "--data", None, "input CSV")
    _opt(p, cmd, "--outcome", "y", "outcome column")
    _opt(p, cmd, "--treatment", "z", "0/1 treatment column")
    _opt(p, cmd, "--propensity", None, "column holding propensity estimates")
    _opt(p, cmd, "--col", [], "column kind, NAME:KIND with KIND continuous, binary or "
         "categorical[:a|b|c] (repeatable)", action="append")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bcforest", description="Bayesian causal forests and related tools.")
    parser.add_argument("--version", action="version", version=f"bcforest {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("fit", help="fit a treatment-effect model to a CSV dataset")
    _data_opts(p, "fit")
    _opt(p, "fit", "--model", "bcf", "model", choices=MODELS)
    _opt(p, "fit", "--iterations", 2000, "MCMC iterations per chain", type=int)
    _opt(p, "fit", "--burn-in", 1000, "discarded iterations per chain", type=int)
    _opt(p, "fit", "--chains", 1, "independent chains", type=int)
    _opt(p, "fit", "--trees", 200, "trees in the prognostic (or only) forest", type=int)
    _opt(p, "fit", "--tau-trees", 50, "trees in the treatment-effect forest (bcf)", type=int)
    _opt(p, "fit", "--max-cuts", 100, "cutpoints per covariate", type=int)
    _opt(p, "fit", "--propensity-source", "internal", "how pi_hat is obtained when no "
         "--propensity column is given", choices=("internal", "logistic", "file"))
    _opt(p, "fit", "--propensity-file", None, "CSV with pi_hat in its first column")
    _common(p, "fit")

    p = sub.add_parser("simulate", help="generate a synthetic dataset with ground truth")
    _opt(p, "simulate", "--dgp", "sim61", "generator", choices=("example1", "sim61"))
    _opt(p, "simulate", "--n", 250, "sample size", type=int)
    _opt(p, "simulate", "--effect", "heterogeneous", "treatment-effect arm (sim61)",
         choices=("homogeneous", "heterogeneous", "none"))
    _opt(p, "simulate", "--surface", "nonlinear", "prognostic surface (sim61)",
         choices=("linear", "nonlinear"))
    _opt(p, "simulate", "--tau", -1.0, "treatment effect (example1)", type=float)
    _opt(p, "simulate", "--width", 0.05, "shelf width (example1)", type=float)
    _common(p, "simulate")

    p = sub.add_parser("bench", help="replicated method comparison on synthetic data")
    _opt(p, "bench", "--methods", ",".join(METHODS), "comma-separated methods")
    _opt(p, "bench", "--dgp", [], "DGP, e.g. example1 or sim61:effect=heterogeneous,"
         "surface=nonlinear,n=250 (repeatable; default example1)", action="append")
    _opt(p, "bench", "--reps", 50, "replications per DGP", type=int)
    _opt(p, "bench", "--iterations", 2000, "MCMC iterations per fit", type=int)
    _opt(p, "bench", "--burn-in", 1000, "discarded iterations per fit", type=int)
    _opt(p, "bench", "--propensity-source", "internal", "pi_hat for bcf and ps-bart",
         choices=("internal", "logistic"))
    _common(p, "bench")

    p = sub.add_parser("ric", help="linear-model regularization-induced confounding report")
    _opt(p, "ric", "--n", 100, "rows", type=int)
    _opt(p, "ric", "--p", 5, "controls", type=int)
    _opt(p, "ric", "--instances", 1, "random instances", type=int)
    _opt(p, "ric", "--draws", 100_000, "Monte-Carlo outcome draws", type=int)
    _opt(p, "ric", "--tau", 1.0, "treatment effect", type=float)
    _opt(p, "ric", "--sigma-nu", 0.5, "selection noise sd", type=float)
    _opt(p, "ric", "--b", 1.0, "shift used for the decomposition check", type=float)
    _common(p, "ric")

    p = sub.add_parser("summarize", help="summary tree and subgroup contrast from draws")
    _opt(p, "summarize", "--draws", None, "draws CSV with tau_1..tau_n columns")
    _data_opts(p, "summarize")
    _opt(p, "summarize", "--max-depth", 3, "summary tree depth", type=int)
    _opt(p, "summarize", "--min-leaf", None, "minimum rows per leaf (default max(25, n/40))",
         type=int)
    _opt(p, "summarize", "--subgroup1", None, "row filter, e.g. 'x4 == 1'")
    _opt(p, "summarize", "--subgroup2", None, "row filter for the comparison group")
    _opt(p, "summarize", "--bins", 30, "histogram bins for the contrast", type=int)
    _common(p, "summarize")

    p = sub.add_parser("propensity", help="estimate propensity scores")
    _opt(p, "propensity", "--data", None, "input CSV")
    _opt(p, "propensity", "--treatment", "z", "0/1 treatment column")
    _opt(p, "propensity", "--exclude", [], "columns that are not covariates (repeatable; "
         "default y)", action="append")
    _opt(p, "propensity", "--col", [], "column kind NAME:KIND (repeatable)", action="append")
    _opt(p, "propensity", "--method", "probit-bart", "model", choices=("probit-bart", "logistic"))
    _opt(p, "propensity", "--trees", PROBIT_CONFIG.num_trees, "trees", type=int)
    _opt(p, "propensity", "--iterations", PROBIT_CONFIG.iterations, "MCMC iterations", type=int)
    _opt(p, "propensity", "--burn-in", PROBIT_CONFIG.burn_in, "discarded iterations", type=int)
    _opt(p, "propensity", "--chains", 1, "independent chains", type=int)
    _common(p, "propensity")

    SUBPARSERS.update(sub.choices)
    return parser


def _convert(action: argparse.Action, values: list[str], key: str):
    conv = action.type or str

    def one(v):
        try:
            out = conv(v)
        except (TypeError, ValueError):
            raise ValidationError(f"config key {key!r}: bad value {v!r}") from None
        if action.choices is not None and out not in action.choices:
            raise ValidationError(f"config key {key!r}: {v!r} not in {list(action.choices)}")
        return out

    if isinstance(action, argparse._AppendAction):
        return [one(v) for v in values]
    if len(values) != 1:
        raise ValidationError(f"config key {key!r} given {len(values)} times")
    return one(values[0])


def resolve_args(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse ``argv``; unset flags fall back to the config file, then to defaults."""
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_help())
    sub = SUBPARSERS[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest in DEFAULTS[args.command]}
    if args.config:
        for key, values in load_config(args.config).items():
            if key not in actions:
                raise ValidationError(f"unknown config key {key!r} for '{args.command}'")
            if getattr(args, key) is None:
                setattr(args, key, _convert(actions[key], values, key))
    for dest, default in DEFAULTS[args.command].items():
        if getattr(args, dest) is None:
            setattr(args, dest, list(default) if isinstance(default, list) else default)
    if args.jobs < 1:
        raise ValidationError("--jobs must be >= 1")
    return args


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise ValidationError(f"missing required option(s): {', '.join(missing)}")


def _schema(cols) -> dict:
    out = {}
    for spec in cols or []:
        name, sep, kind = spec.partition(":")
        if not sep or not name:
            raise ValidationError(f"--col expects NAME:KIND, got {spec!r}")
        out[name.strip()] = parse_kind(kind)
    return out


def _matrix_csv(scalars: dict[str, np.ndarray], prefix: str | None = None,
                matrix: np.ndarray | None = None) -> str:
    """CSV with one row per draw: scalar columns then ``prefix_1..prefix_n``."""
    names = list(scalars)
    cols = [np.asarray(v, float).reshape(len(v), -1) for v in scalars.values()]
    if matrix is not None:
        names += [f"{prefix}_{i + 1}" for i in range(matrix.shape[1])]
        cols.append(np.asarray(matrix, float))
    buf = io.StringIO()
    buf.write(",".join(names) + "\n")
    np.savetxt(buf, np.hstack(cols), fmt="%.17g", delimiter=",")
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _start(args) -> tuple[Path, RunManifest]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in vars(args).items() if k not in ("config", "command")}
    return out, RunManifest(args.command, config, args.seed, __version__, started=now())


def _finish(out: Path, manifest: RunManifest, files: list[str]):
    manifest.outputs = {name: sha256_file(out / name) for name in files}
    manifest.finished = now()
    manifest.write(out / "manifest.json")


def _write(out: Path, files: list[str], name: str, text: str):
    atomic_write(out / name, text)
    files.append(name)


def _cate_csv(summ) -> str:
    frame = pd.DataFrame({"unit": np.arange(1, summ.mean.size + 1), "mean": summ.mean,
                          "lower": summ.lower, "upper": summ.upper})
    return frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")


def cmd_fit(args) -> int:
    _require(args, "data")
    ds = load_csv(args.data, args.outcome, args.treatment, args.propensity, _schema(args.col))
    out, manifest = _start(args)
    manifest.add_input(args.data)
    if args.propensity_file:
        manifest.add_input(args.propensity_file)
    files: list[str] = []
    pconf = BcfConfig(seed=args.seed, propensity_source=args.propensity_source,
                      propensity_file=args.propensity_file)
    bart = BartConfig(num_trees=args.trees, iterations=args.iterations, burn_in=args.burn_in,
                      chains=args.chains, seed=args.seed, max_cuts=args.max_cuts)
    summary: dict = {"model": args.model, "n": ds.n}
    if args.model == "bcf":
        config = replace(pconf, mu_trees=args.trees, tau_trees=args.tau_trees,
                         iterations=args.iterations, burn_in=args.burn_in, chains=args.chains,
                         max_cuts=args.max_cuts)
        draws = fit_bcf(ds, config, jobs=args.jobs)
        scalars = {"iteration": draws.iteration, "chain": draws.chain, "sigma": draws.sigma,
                   "s_mu": draws.s_mu, "s_tau": draws.s_tau}
        _write(out, files, "mu_draws.csv", _matrix_csv(
            {"iteration": draws.iteration, "chain": draws.chain}, "mu", draws.mu))
        pi_hat = draws.pi_hat
        summary.update(sigma_mean=float(draws.sigma.mean()), s_mu_mean=float(draws.s_mu.mean()),
                       s_tau_mean=float(draws.s_tau.mean()))
    elif args.model == "bart-f0f1":
        draws = fit_two_models(ds.y, ds.z, design_matrix(ds.X, ds.kinds), bart)
        scalars = {"iteration": draws.iteration, "chain": draws.chain,
                   "sigma_treated": draws.sigma[:, 0], "sigma_control": draws.sigma[:, 1]}
        pi_hat = None
    else:
        pi_hat = None
        if args.model == "ps-bart":
            pi_hat = ds.pi_hat if ds.pi_hat is not None else estimate_propensity(ds, pconf,
                                                                                 args.jobs)
            ds = ds.with_pi_hat(pi_hat)
        draws = fit_bart(ds, bart, with_propensity=args.model == "ps-bart", jobs=args.jobs)
        scalars = {"iteration": draws.iteration, "chain": draws.chain, "sigma": draws.sigma}
        summary["sigma_mean"] = float(draws.sigma.mean())
    _write(out, files, "draws.csv", _matrix_csv(scalars, "tau", draws.tau))
    if pi_hat is not None:
        _write(out, files, "pi_hat.csv", pd.DataFrame({"pi_hat": pi_hat}).to_csv(
            index=False, float_format="%.17g", lineterminator="\n"))
    summ = summarize_tau(draws.tau)
    _write(out, files, "cate.csv", _cate_csv(summ))
    lo, hi = summ.ate_interval
    summary.update(draws=int(draws.tau.shape[0]), ate={"mean": summ.ate, "lower": lo, "upper": hi},
                   accept={k: int(v) for k, v in draws.accept.items()})
    _write(out, files, "summary.json", _json(summary))
    _finish(out, manifest, files)
    return 0


def cmd_simulate(args) -> int:
    spec = {"dgp": args.dgp, "n": args.n}
    if args.dgp == "example1":
        spec.update(tau=args.tau, width=args.width)
    else:
        spec.update(effect=args.effect, surface=args.surface)
    sample = generate(spec, args.seed)
    out, manifest = _start(args)
    files: list[str] = []
    with atomic_target(out / "data.csv") as tmp:
        write_csv(sample.dataset(), tmp)
    files.append("data.csv")
    _write(out, files, "truth.csv", sample.truth_frame().to_csv(
        index=False, float_format="%.17g", lineterminator="\n"))
    _write(out, files, "provenance.json", _json({"params": sample.params, "seed": args.seed,
                                                  "ate": sample.ate}))
    _finish(out, manifest, files)
    return 0


def cmd_bench(args) -> int:
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    dgps = args.dgp or ["example1"]
    config = BenchConfig(
        bcf=BcfConfig(iterations=args.iterations, burn_in=args.burn_in),
        bart=BartConfig(iterations=args.iterations, burn_in=args.burn_in),
        propensity_source=args.propensity_source)
    report = run_grid(methods, dgps, args.reps, args.seed, args.jobs, config)
    text, table = render_table(report)
    out, manifest = _start(args)
    files: list[str] = []
    _write(out, files, "table.txt", text)
    _write(out, files, "table.csv", table)
    _write(out, files, "raw.csv", raw_csv(report))
    _write(out, files, "runtime.csv", runtime_csv(report))
    failures = sum(not r.ok for r in report.results)
    if failures:
        print(f"warning: {failures} fit(s) failed; see raw.csv", file=sys.stderr)
    _finish(out, manifest, files)
    return 0


def cmd_ric(args) -> int:
    if args.n <= args.p + 2 or args.p < 1:
        raise ValidationError("need p >= 1 and n > p + 2")
    rng = np.random.default_rng(args.seed)
    reports = []
    for _ in range(args.instances):
        problem = random_problem(args.n, args.p, rng, tau=args.tau, sigma_nu=args.sigma_nu)
        rep = ric_report(problem, args.draws, rng)
        shift = b_shift_decomposition(problem, args.b)
        rep["b_shift"] = {"b": shift.b, "tau_shift": shift.tau_shift,
                          "extra_resid_var": shift.extra_resid_var,
                          "max_abs_discrepancy": shift.discrepancy}
        reports.append(rep)
    out, manifest = _start(args)
    files: list[str] = []
    _write(out, files, "ric.json", _json({"instances": reports}))
    _finish(out, manifest, files)
    return 0


def _read_tau_draws(path) -> np.ndarray:
    frame = pd.read_csv(path, float_precision="round_trip")
    cols = sorted((c for c in frame.columns if c.startswith("tau_")),
                  key=lambda c: int(c.split("_", 1)[1]))
    if not cols:
        raise ValidationError(f"{path}: no tau_<i> columns")
    return frame[cols].to_numpy(dtype=float)


def _mask(X: pd.DataFrame, expr: str) -> np.ndarray:
    try:
        mask = X.eval(expr)
    except Exception as exc:
        raise ValidationError(f"bad subgroup expression {expr!r}: {exc}") from None
    mask = np.asarray(mask)
    if mask.dtype != bool or mask.shape != (len(X),):
        raise ValidationError(f"subgroup expression {expr!r} must give one true/false per row")
    return mask


def cmd_summarize(args) -> int:
    _require(args, "draws", "data")
    tau = _read_tau_draws(args.draws)
    exclude = [c for c in (args.outcome, args.propensity) if c]
    X, kinds, _ = load_treatment_csv(args.data, args.treatment, exclude, _schema(args.col))
    if len(X) != tau.shape[1]:
        raise ValidationError(f"draws cover {tau.shape[1]} units but data has {len(X)} rows")
    dm = design_matrix(X, kinds)
    tree = fit_summary_tree(dm, tau.mean(axis=0), args.max_depth, args.min_leaf)
    out, manifest = _start(args)
    manifest.add_input(args.draws)
    manifest.add_input(args.data)
    files: list[str] = []
    _write(out, files, "tree.txt", tree.to_text())
    _write(out, files, "tree.json", _json(tree.to_dict()))
    if args.subgroup1 or args.subgroup2:
        _require(args, "subgroup1", "subgroup2")
        con = subgroup_contrast(tau, _mask(X, args.subgroup1), _mask(X, args.subgroup2))
        report = con.to_dict()
        report.update(subgroup1=args.subgroup1, subgroup2=args.subgroup2)
        _write(out, files, "contrast.json", _json(report))
        counts, edges = con.histogram(args.bins)
        hist = pd.DataFrame({"left": edges[:-1], "right": edges[1:], "count": counts})
        _write(out, files, "contrast_hist.csv",
               hist.to_csv(index=False, float_format="%.17g", lineterminator="\n"))
    _finish(out, manifest, files)
    return 0


def cmd_propensity(args) -> int:
    _require(args, "data")
    exclude = args.exclude or ["y"]
    X, kinds, z = load_treatment_csv(args.data, args.treatment, exclude, _schema(args.col))
    dm = design_matrix(X, kinds)
    if args.method == "logistic":
        pi_hat = fit_logistic_propensity(dm, z)
    else:
        config = BartConfig(num_trees=args.trees, iterations=args.iterations,
                            burn_in=args.burn_in, chains=args.chains, seed=args.seed)
        pi_hat = fit_probit_bart(dm, z, config, jobs=args.jobs).pi_hat
    out, manifest = _start(args)
    manifest.add_input(args.data)
    files: list[str] = []
    _write(out, files, "pi_hat.csv", pd.DataFrame({"pi_hat": pi_hat}).to_csv(
        index=False, float_format="%.17g", lineterminator="\n"))
    _write(out, files, "summary.json", _json({
        "method": args.method, "n": int(z.size), "mean": float(pi_hat.mean()),
        "min": float(pi_hat.min()), "max": float(pi_hat.max()), "treated_share": float(z.mean())}))
    _finish(out, manifest, files)
    return 0


HANDLERS = {"fit": cmd_fit, "simulate": cmd_simulate, "bench": cmd_bench, "ric": cmd_ric,
            "summarize": cmd_summarize, "propensity": cmd_propensity}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = resolve_args(parser, argv)
        return HANDLERS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except (ValidationError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


def run():
    sys.exit(main())
