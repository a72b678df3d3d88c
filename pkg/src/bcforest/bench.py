"""Replication harness: method x DGP x replication grids and their metrics."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bcf import BcfConfig, estimate_propensity, fit_bcf, summarize_tau
from .data import ValidationError, design_matrix
from .dgp import DgpSample, generate
from .forest.sampler import (BartConfig, PROBIT_CONFIG, PosteriorDraws, fit_bart,
                             fit_regression)

log = logging.getLogger(__name__)

METHODS = ("bcf", "ps-bart", "bart", "bart-f0f1")
METRICS = ("ate_rmse", "ate_cover", "ate_len", "cate_rmse", "cate_cover", "cate_len")


def parse_dgp(text: str) -> dict:
    """``example1`` or ``sim61:effect=heterogeneous,surface=nonlinear,n=250``."""
    name, _, rest = text.partition(":")
    spec = {"dgp": name.strip()}
    for part in filter(None, (p.strip() for p in rest.split(","))):
        key, eq, value = part.partition("=")
        if not eq:
            raise ValidationError(f"bad DGP option {part!r} (expected key=value)")
        spec[key.strip()] = value.strip()
    if spec["dgp"] not in ("example1", "sim61"):
        raise ValidationError(f"unknown dgp {spec['dgp']!r}")
    return spec


def dgp_label(spec: dict) -> str:
    opts = ",".join(f"{k}={v}" for k, v in spec.items() if k != "dgp")
    return spec["dgp"] + (":" + opts if opts else "")


@dataclass(frozen=True)
class BenchConfig:
    bcf: BcfConfig = BcfConfig()
    bart: BartConfig = BartConfig()
    propensity: BartConfig = PROBIT_CONFIG
    propensity_source: str = "internal"


@dataclass
class RepResult:
    """Scores of one method on one replicated dataset."""

    method: str
    dgp: str
    rep: int
    ate_true: float = math.nan
    ate_hat: float = math.nan
    ate_lo: float = math.nan
    ate_hi: float = math.nan
    cate_rmse: float = math.nan
    cate_cover: float = math.nan
    cate_len: float = math.nan
    seconds: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def fit_seed(seed: int, rep: int, method: str) -> int:
    return int(np.random.SeedSequence([seed, rep, METHODS.index(method)]).generate_state(1)[0])


def score_draws(tau_draws: np.ndarray, sample: DgpSample, method: str, dgp: str, rep: int,
                seconds: float = 0.0) -> RepResult:
    """Score (draws, n) treatment-effect draws against the sample's truth."""
    summ = summarize_tau(tau_draws)
    lo, hi = summ.ate_interval
    truth = sample.true_tau
    return RepResult(
        method, dgp, rep, ate_true=sample.ate, ate_hat=summ.ate, ate_lo=lo, ate_hi=hi,
        cate_rmse=float(np.sqrt(np.mean((summ.mean - truth) ** 2))),
        cate_cover=float(np.mean((summ.lower <= truth) & (truth <= summ.upper))),
        cate_len=float(np.mean(summ.upper - summ.lower)), seconds=seconds)


def fit_method(method: str, sample: DgpSample, config: BenchConfig, seed: int,
               pi_hat: np.ndarray | None) -> np.ndarray:
    """Treatment-effect draws (draws, n) for one method on one dataset."""
    ds = sample.dataset()
    if method == "bcf":
        bconf = replace(config.bcf, seed=seed, propensity_source="file")
        return fit_bcf(ds.with_pi_hat(pi_hat), bconf).tau
    bart = replace(config.bart, seed=seed)
    if method == "ps-bart":
        return fit_bart(ds.with_pi_hat(pi_hat), bart, with_propensity=True).tau
    if method == "bart":
        return fit_bart(ds, bart).tau
    if method == "bart-f0f1":
        dm = design_matrix(sample.X, sample.kinds)
        return fit_two_models(sample.y, sample.z, dm, bart).tau
    raise ValidationError(f"unknown method {method!r}")


def fit_two_models(y: np.ndarray, z: np.ndarray, dm, config: BartConfig) -> PosteriorDraws:
    """Separate BART fits on treated and control rows.

    Treatment-effect draws are ``f1(x) - f0(x)`` over all rows, pairing the two
    chains by iteration; ``sigma`` is (draws, 2) holding the treated and
    control error sds.
    """
    preds, sigmas = [], []
    for arm, offset in ((1, 1), (0, 2)):
        rows = z == arm
        if not rows.any():
            raise ValidationError("both treatment arms must be nonempty")
        cfg = replace(config, seed=int(np.random.SeedSequence([config.seed, offset])
                                       .generate_state(1)[0]))
        draws = fit_regression(y[rows], dm.rows(rows), cfg, predict=dm.values, keep_fit=False)
        preds.append(draws.predict)
        sigmas.append(draws.sigma)
    return PosteriorDraws(np.column_stack(sigmas), draws.chain, draws.iteration,
                          tau=preds[0] - preds[1])


def run_rep(spec: dict, rep: int, seed: int, methods: tuple[str, ...],
            config: BenchConfig) -> list[RepResult]:
    label = dgp_label(spec)
    sample = generate(spec, seed + rep)
    pi_hat = None
    pi_error = ""
    if {"bcf", "ps-bart"} & set(methods):
        pconf = BcfConfig(propensity_source=config.propensity_source,
                          propensity_config=config.propensity,
                          seed=fit_seed(seed, rep, "bcf"))
        try:
            pi_hat = estimate_propensity(sample.dataset(), pconf)
        except Exception as exc:  # recorded per method below
            pi_error = f"propensity: {exc}"
    out = []
    for method in methods:
        if method in ("bcf", "ps-bart") and pi_error:
            out.append(RepResult(method, label, rep, ate_true=sample.ate, error=pi_error))
            continue
        t0 = time.perf_counter()
        try:
            tau = fit_method(method, sample, config, fit_seed(seed, rep, method), pi_hat)
        except Exception as exc:
            log.warning("%s failed on %s rep %d: %s", method, label, rep, exc)
            out.append(RepResult(method, label, rep, ate_true=sample.ate, error=repr(exc)))
            continue
        out.append(score_draws(tau, sample, method, label, rep, time.perf_counter() - t0))
    return out


@dataclass
class MetricsReport:
    """Raw per-replication scores and their per (method, DGP) aggregates."""

    results: list[RepResult]
    methods: tuple[str, ...]
    dgps: tuple[str, ...]
    seed: int = 0
    rows: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.rows:
            self.rows = aggregate(self.results, self.methods, self.dgps)

    def row(self, method: str, dgp: str) -> dict:
        for r in self.rows:
            if r["method"] == method and r["dgp"] == dgp:
                return r
        raise KeyError((method, dgp))

    def metrics(self, include_runtime: bool = False) -> list[dict]:
        if include_runtime:
            return [dict(r) for r in self.rows]
        return [{k: v for k, v in r.items() if k != "seconds"} for r in self.rows]


def aggregate(results: list[RepResult], methods, dgps) -> list[dict]:
    """ATE rmse / bias / coverage / length over replications; CATE metrics are
    per-dataset averages over units, then averaged over replications."""
    rows = []
    for dgp in dgps:
        for method in methods:
            rs = [r for r in results if r.method == method and r.dgp == dgp]
            good = [r for r in rs if r.ok]
            row = {"dgp": dgp, "method": method, "reps": len(good), "failures": len(rs) - len(good)}
            if good:
                err = np.array([r.ate_hat - r.ate_true for r in good])
                row.update(
                    ate_rmse=float(np.sqrt(np.mean(err ** 2))),
                    ate_bias=float(np.mean(err)),
                    ate_cover=float(np.mean([r.ate_lo <= r.ate_true <= r.ate_hi for r in good])),
                    ate_len=float(np.mean([r.ate_hi - r.ate_lo for r in good])),
                    cate_rmse=float(np.mean([r.cate_rmse for r in good])),
                    cate_cover=float(np.mean([r.cate_cover for r in good])),
                    cate_len=float(np.mean([r.cate_len for r in good])),
                    seconds=float(np.mean([r.seconds for r in good])),
                )
            else:
                row.update({k: math.nan for k in METRICS + ("ate_bias", "seconds")})
            rows.append(row)
    return rows


def _rep_job(args):
    spec, rep, seed, methods, config = args
    return run_rep(spec, rep, seed, methods, config)


def run_grid(methods, dgps, reps: int, seed: int = 0, jobs: int = 1,
             config: BenchConfig = BenchConfig(), progress=None) -> MetricsReport:
    """Run every method on ``reps`` datasets per DGP (dataset seed ``seed + rep``).

    Replications are independent jobs; results are merged in (DGP, rep,
    method) order so the report does not depend on ``jobs``.
    """
    methods = tuple(methods)
    if not methods:
        raise ValidationError("no methods given")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValidationError(f"unknown methods {bad}; choose from {list(METHODS)}")
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    specs = [parse_dgp(d) if isinstance(d, str) else dict(d) for d in dgps]
    if not specs:
        raise ValidationError("no DGPs given")
    tasks = [(spec, rep, seed, methods, config) for spec in specs for rep in range(reps)]
    results: list[RepResult] = []
    if jobs <= 1:
        for k, task in enumerate(tasks):
            results.extend(_rep_job(task))
            if progress:
                progress(k + 1, len(tasks))
    else:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for k, res in enumerate(ex.map(_rep_job, tasks)):
                results.extend(res)
                if progress:
                    progress(k + 1, len(tasks))
    order = {m: i for i, m in enumerate(methods)}
    labels = tuple(dgp_label(s) for s in specs)
    results.sort(key=lambda r: (labels.index(r.dgp), r.rep, order[r.method]))
    failures = sum(not r.ok for r in results)
    if failures:
        log.warning("%d fits failed and were excluded", failures)
    return MetricsReport(results, methods, labels, seed)


TABLE_COLUMNS = ("dgp", "method", "reps", "failures", "ate_rmse", "ate_bias", "ate_cover",
                 "ate_len", "cate_rmse", "cate_cover", "cate_len")


def _sig2(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.2g}"


def render_table(report: MetricsReport) -> tuple[str, str]:
    """Fixed-width text table (2 significant digits) and the raw CSV."""
    if not report.rows:
        raise ValidationError("empty report")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in report.rows:
        writer.writerow({k: r[k] for k in TABLE_COLUMNS})
    head = ("method", "ATE rmse", "cover", "len", "CATE rmse", "cover", "len", "bias", "reps")
    lines = []
    for dgp in report.dgps:
        lines.append(dgp)
        lines.append("  " + "".join(f"{h:>11}" if i else f"{h:<11}" for i, h in enumerate(head)))
        for r in report.rows:
            if r["dgp"] != dgp:
                continue
            vals = [r["method"]] + [_sig2(r[k]) for k in METRICS] + [_sig2(r["ate_bias"]),
                                                                    str(r["reps"])]
            lines.append("  " + "".join(f"{v:>11}" if i else f"{v:<11}" for i, v in enumerate(vals)))
        lines.append("")
    return "\n".join(lines), buf.getvalue()


def read_table_csv(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in r.items():
            if k in ("dgp", "method"):
                row[k] = v
            elif k in ("reps", "failures"):
                row[k] = int(v)
            else:
                row[k] = float(v)
        rows.append(row)
    return rows


RAW_COLUMNS = ("dgp", "method", "rep", "ate_true", "ate_hat", "ate_lo", "ate_hi", "cate_rmse",
               "cate_cover", "cate_len", "error")
RUNTIME_COLUMNS = ("dgp", "method", "rep", "seconds")


def _csv(report: MetricsReport, columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in report.results:
        writer.writerow([getattr(r, c) for c in columns])
    return buf.getvalue()


def raw_csv(report: MetricsReport) -> str:
    """Per-replication scores; wall-clock times live in :func:`runtime_csv`
    so this file is reproducible bit for bit."""
    return _csv(report, RAW_COLUMNS)


def runtime_csv(report: MetricsReport) -> str:
    return _csv(report, RUNTIME_COLUMNS)
