"""Study orchestration: replicates, performance measures, persistence."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
import yaml
from scipy import stats

from .datagen import (
    DESIGNS, METHODS, GenParams, ScenarioConfig, TrialDataset, build_scenario_grid, generate_dataset,
)
from .fcs import FcsModelSpec, ImputedSet, fcs_impute
from .lmm import cca_prepare, fit_bivariate_lmm
from .missingness import impose_missingness, make_missingness_spec
from .mmi import MmiPriors, pan_gibbs_impute
from .pooling import rubin_pool
from .rngkit import make_stream

log = logging.getLogger(__name__)

RECORD_COLUMNS = (
    "scenario_index", "replicate", "method", "outcome", "estimate", "std_error", "df",
    "ci_lower", "ci_upper", "converged", "n_imputation_failures",
)
OUTCOMES = ("Y1", "Y2")
FAILURE_LIMIT = 0.10
UNDERCOVERAGE = 90.0
OVERCOVERAGE = 97.0


class ScenarioAborted(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class ReplicateRecord:
    scenario_index: int
    replicate: int
    method: str
    outcome: str
    estimate: float
    std_error: float
    df: float
    ci_lower: float
    ci_upper: float
    converged: bool
    n_imputation_failures: int = 0


@dataclass
class PerfSummary:
    scenario_index: int
    method: str
    outcome: str
    coverage_rate: float
    bias: float
    pct_bias: float
    rmse: float
    avg_width: float
    mc_error_bias: float
    mc_error_cr: float
    n_effective: int
    undercoverage: bool
    overcoverage: bool
    biased: bool


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    records: list[ReplicateRecord]
    summaries: list[PerfSummary]
    diagnostics: dict = field(default_factory=dict)


def _observed_digest(data: TrialDataset) -> str:
    return hashlib.sha256(np.ascontiguousarray(data.y[data.r]).tobytes()).hexdigest()


def _failed(s, l, method, n_fail=0) -> list[ReplicateRecord]:
    nan = float("nan")
    return [ReplicateRecord(s, l, method, o, nan, nan, nan, nan, nan, False, n_fail) for o in OUTCOMES]


def _impute(method: str, data: TrialDataset, config: ScenarioConfig, stream) -> ImputedSet:
    if method in ("SMI", "FMI"):
        spec = FcsModelSpec(method, config.n_cycles, config.M, on_empty_cluster=config.fmi_empty_cluster)
        return fcs_impute(data, spec, stream)
    return pan_gibbs_impute(data, MmiPriors(), config.M, config.burn_in, config.thin, stream)


def run_replicate(config: ScenarioConfig, replicate: int, spec=None) -> tuple[list[ReplicateRecord], dict]:
    """Generate, impose missingness and analyse one replicate with every requested method."""
    s, seed = config.scenario_index, config.master_seed
    spec = spec or make_missingness_spec(config)
    full = generate_dataset(config, make_stream(seed, s, replicate, "datagen"))
    data = impose_missingness(full, spec, make_stream(seed, s, replicate, "missing"))
    digest = _observed_digest(data)
    diag = {"observed_altered": 0, "empty_cluster_warnings": data.n_empty_cluster_warnings,
            "missing_rate": [float(v) for v in 1.0 - data.r.mean(axis=0)], "errors": {}}
    records: list[ReplicateRecord] = []
    for method in config.methods:
        try:
            if method == "CCA":
                cc = cca_prepare(data)
                fit = fit_bivariate_lmm(cc)
                if not fit.converged:
                    records += _failed(s, replicate, method)
                    continue
                df = cc.n_clusters - 2
                q = stats.t.ppf(0.975, df)
                for k, o in enumerate(OUTCOMES):
                    est, se = float(fit.beta_hat[k]), float(fit.std_errors[k])
                    records.append(ReplicateRecord(s, replicate, method, o, est, se, float(df),
                                                   est - q * se, est + q * se, True, 0))
                continue
            imputed = _impute(method, data, config, make_stream(seed, s, replicate, f"impute-{method}"))
            fits = []
            for completed in imputed:
                if _observed_digest(completed) != digest:
                    diag["observed_altered"] += 1
                fits.append(fit_bivariate_lmm(completed))
            good = [f for f in fits if f.converged]
            n_fail = len(fits) - len(good)
            if len(good) < 2:
                records += _failed(s, replicate, method, n_fail)
                continue
            df_com = data.n_clusters - 2 if config.rubin_df == "barnard-rubin" else None
            for k, o in enumerate(OUTCOMES):
                pooled = rubin_pool([f.beta_hat[k] for f in good], [f.beta_cov[k, k] for f in good], df_com=df_com)
                records.append(ReplicateRecord(s, replicate, method, o, pooled.q_bar, pooled.std_error,
                                               pooled.df, pooled.ci[0], pooled.ci[1], True, n_fail))
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            diag["errors"][method] = str(exc)
            records += _failed(s, replicate, method)
    return records, diag


def _run_chunk(args):
    config, replicates = args
    spec = make_missingness_spec(config)
    return [(l, *run_replicate(config, l, spec)) for l in replicates]


def _method_order(config):
    return {m: i for i, m in enumerate(config.methods)}


def compute_performance(records: Sequence[ReplicateRecord], true_theta: float) -> PerfSummary:
    """Coverage, bias, RMSE and average width over the converged records of one group."""
    conv = [r for r in records if r.converged]
    if len(conv) < 2:
        raise ValueError("compute_performance needs at least 2 converged records")
    est = np.array([r.estimate for r in conv])
    lo = np.array([r.ci_lower for r in conv])
    hi = np.array([r.ci_upper for r in conv])
    n = est.size
    cr = 100.0 * float(np.mean((lo <= true_theta) & (true_theta <= hi)))
    bias = float(np.mean(est) - true_theta)
    pct = 100.0 * bias / true_theta if true_theta != 0 else float("nan")
    rmse = float(np.sqrt(np.mean((est - true_theta) ** 2)))
    aw = float(np.mean(hi) - np.mean(lo))
    mce_bias = float(np.std(est, ddof=1) / np.sqrt(n))
    mce_cr = float(np.sqrt(cr * (100.0 - cr) / n))
    first = conv[0]
    return PerfSummary(
        first.scenario_index, first.method, first.outcome, cr, bias, pct, rmse, aw, mce_bias, mce_cr, n,
        undercoverage=cr < UNDERCOVERAGE, overcoverage=cr > OVERCOVERAGE, biased=abs(bias) > 1.96 * mce_bias,
    )


def summarise_records(config: ScenarioConfig, records: Iterable[ReplicateRecord]) -> list[PerfSummary]:
    groups: dict[tuple[str, str], list[ReplicateRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.outcome), []).append(r)
    out = []
    for method in config.methods:
        for k, o in enumerate(OUTCOMES):
            recs = groups.get((method, o), [])
            if sum(r.converged for r in recs) >= 2:
                out.append(compute_performance(recs, config.gen.beta[k]))
    return out


def run_scenario(config: ScenarioConfig, parallelism: int = 1, replicates: Sequence[int] | None = None,
                 chunk_size: int = 25) -> ScenarioResult:
    """Run every replicate of one scenario; results do not depend on ``parallelism``.

    Failed method fits are recorded with ``converged=False`` and excluded from
    the summaries.  :class:`ScenarioAborted` (carrying the result) is raised
    when more than 10% of replicates fail for some method.
    """
    reps = list(range(config.N)) if replicates is None else list(replicates)
    chunks = [(config, reps[i : i + chunk_size]) for i in range(0, len(reps), chunk_size)]
    if parallelism <= 1:
        results = [item for c in chunks for item in _run_chunk(c)]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = [item for part in pool.map(_run_chunk, chunks) for item in part]
    order = _method_order(config)
    results.sort(key=lambda t: t[0])
    records = [r for _, recs, _ in results for r in recs]
    records.sort(key=lambda r: (r.replicate, order[r.method], r.outcome))
    diags = [d for _, _, d in results]
    errors: dict[str, int] = {}
    for d in diags:
        for m in d["errors"]:
            errors[m] = errors.get(m, 0) + 1
    diagnostics = {
        "observed_altered": int(sum(d["observed_altered"] for d in diags)),
        "empty_cluster_warnings": int(sum(d["empty_cluster_warnings"] for d in diags)),
        "mean_missing_rate": np.mean([d["missing_rate"] for d in diags], axis=0).tolist() if diags else [],
        "method_errors": errors,
    }
    result = ScenarioResult(config, records, summarise_records(config, records), diagnostics)
    for method in config.methods:
        failed = {r.replicate for r in records if r.method == method and not r.converged}
        if reps and len(failed) > FAILURE_LIMIT * len(reps):
            raise ScenarioAborted(f"scenario {config.scenario_index}: {method} failed in {len(failed)} replicates",
                                  result)
    return result


# -- persistence -----------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else format(float(v), ".17g")
    return str(v)


def _write_records(records: Iterable[ReplicateRecord], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in RECORD_COLUMNS])


def records_csv_text(records: Iterable[ReplicateRecord]) -> str:
    buf = io.StringIO()
    _write_records(records, buf)
    return buf.getvalue()


def write_records_csv(records: Iterable[ReplicateRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        _write_records(records, fh)


def read_records_csv(path) -> list[ReplicateRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ReplicateRecord(
                int(row["scenario_index"]), int(row["replicate"]), row["method"], row["outcome"],
                float(row["estimate"]), float(row["std_error"]), float(row["df"]),
                float(row["ci_lower"]), float(row["ci_upper"]), row["converged"] == "true",
                int(row["n_imputation_failures"]),
            ))
    return out


def summaries_frame(summaries: Iterable[PerfSummary], configs: Sequence[ScenarioConfig] = ()) -> pd.DataFrame:
    df = pd.DataFrame([asdict(s) for s in summaries])
    if configs and not df.empty:
        meta = pd.DataFrame([{
            "scenario_index": c.scenario_index, "mechanism": c.mechanism, "design": c.design.label,
            "eta": c.eta, "nonresponse": c.nonresponse, "icc": c.icc_label,
            "icc1": c.icc[0], "icc2": c.icc[1],
        } for c in configs])
        df = meta.merge(df, on="scenario_index", how="right")
    return df


def summarize_run(summaries: Iterable[PerfSummary], configs: Sequence[ScenarioConfig]):
    """Bias table and coverage/width table, one row per scenario x method x outcome."""
    df = summaries_frame(summaries, configs)
    keys = ["scenario_index", "mechanism", "design", "eta", "nonresponse", "icc", "icc1", "icc2", "outcome", "method"]
    bias = df[keys + ["pct_bias", "bias", "mc_error_bias", "biased", "n_effective"]]
    cov = df[keys + ["coverage_rate", "avg_width", "mc_error_cr", "undercoverage", "overcoverage", "n_effective"]]
    order = {m: i for i, m in enumerate(METHODS)}
    sort = lambda t: t.sort_values(["outcome", "scenario_index", "method"],  # noqa: E731
                                   key=lambda c: c.map(order) if c.name == "method" else c).reset_index(drop=True)
    return sort(bias), sort(cov)


# -- config files ----------------------------------------------------------------------------

_RUN_KEYS = {"M", "N", "seed", "methods", "n_cycles", "burn_in", "thin", "rubin_df", "fmi_empty_cluster"}
_GEN_KEYS = set(GenParams.__dataclass_fields__)
_FACTOR_KEYS = {"icc", "design", "mechanism", "eta", "nonresponse"}


def configs_from_mapping(doc: dict) -> list[ScenarioConfig]:
    """Scenario list from a parsed config document with ``factors``, ``generation`` and ``run`` blocks."""
    doc = dict(doc or {})
    unknown = set(doc) - {"factors", "generation", "run"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    factors = dict(doc.get("factors") or {})
    gen = dict(doc.get("generation") or {})
    run = dict(doc.get("run") or {})
    for block, allowed, name in ((factors, _FACTOR_KEYS, "factors"), (gen, _GEN_KEYS, "generation"),
                                 (run, _RUN_KEYS, "run")):
        bad = set(block) - allowed
        if bad:
            raise ValueError(f"unknown config keys: {sorted(f'{name}.{k}' for k in bad)}")
    gen_params = GenParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in gen.items()})
    extra = {k: run[k] for k in _RUN_KEYS - {"seed", "methods"} if k in run}
    if "methods" in run:
        extra["methods"] = tuple(run["methods"])
    return build_scenario_grid(int(run.get("seed", 0)), factors, gen=gen_params, **extra)


def load_config(path) -> list[ScenarioConfig]:
    with open(path) as fh:
        return configs_from_mapping(yaml.safe_load(fh))


def config_from_dict(d: dict) -> ScenarioConfig:
    d = dict(d)
    d["design"] = DESIGNS[d["design"]]
    d["icc"] = tuple(d["icc"])
    d["methods"] = tuple(d["methods"])
    d["gen"] = GenParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["gen"].items()})
    if d.get("targets") is not None:
        d["targets"] = tuple(tuple(t) for t in d["targets"])
    return ScenarioConfig(**d)


def write_scenarios(configs: Sequence[ScenarioConfig], path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump([c.to_dict() for c in configs], fh, sort_keys=False)


def read_scenarios(path) -> list[ScenarioConfig]:
    with open(path) as fh:
        return [config_from_dict(d) for d in yaml.safe_load(fh)]


def run_study(configs: Sequence[ScenarioConfig], out_dir, parallelism: int = 1) -> list[ScenarioResult]:
    """Run scenarios in turn and write ``records.csv``, ``scenarios.yaml``, ``performance.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for cfg in configs:
        log.info("scenario %d (%s, %s, %s)", cfg.scenario_index, cfg.mechanism, cfg.design.label, cfg.icc_label)
        try:
            results.append(run_scenario(cfg, parallelism))
        except ScenarioAborted as exc:
            log.error("%s", exc)
            results.append(exc.result)
    write_scenarios(configs, out / "scenarios.yaml")
    write_records_csv([r for res in results for r in res.records], out / "records.csv")
    summaries_frame([s for res in results for s in res.summaries], configs).to_csv(out / "performance.csv", index=False)
    with open(out / "diagnostics.json", "w") as fh:
        json.dump({str(res.config.scenario_index): res.diagnostics for res in results}, fh, indent=1)
    return results


def summarize_dir(in_dir, out_dir) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Recompute performance from a run directory and write the two report tables."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    configs = read_scenarios(in_dir / "scenarios.yaml")
    records = read_records_csv(in_dir / "records.csv")
    by_s: dict[int, list[ReplicateRecord]] = {}
    for r in records:
        by_s.setdefault(r.scenario_index, []).append(r)
    summaries = [s for c in configs for s in summarise_records(c, by_s.get(c.scenario_index, []))]
    bias, cov = summarize_run(summaries, configs)
    out_dir.mkdir(parents=True, exist_ok=True)
    bias.to_csv(out_dir / "table_bias.csv", index=False)
    cov.to_csv(out_dir / "table_coverage.csv", index=False)
    summaries_frame(summaries, configs).to_csv(out_dir / "performance.csv", index=False)
    return bias, cov


def default_parallelism() -> int:
    return os.cpu_count() or 1
