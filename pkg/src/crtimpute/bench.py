"""Reproduction harness: run canned scenario sets and check assertions on their results.

A suite file lists cases. A simulation case names a scenario config (inline
or a file path) and assertions on metric paths such as
``MMI.Y1.coverage_rate``; a check case names one of the registered
deterministic checks in :data:`CHECKS`. Scenario results can be cached on
disk, keyed by the config and by a fingerprint of the simulation code.
"""
from __future__ import annotations

import hashlib
import json
import logging
import operator
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import pandas as pd
import yaml

from . import simrunner
from .datagen import ScenarioConfig
from .simrunner import ScenarioResult

log = logging.getLogger(__name__)

COMPARATORS: dict[str, Callable[[float, float], bool]] = {
    "<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge,
    "between": lambda x, b: b[0] <= x <= b[1],
}
PERF_FIELDS = tuple(f for f in simrunner.PerfSummary.__dataclass_fields__
                    if f not in ("scenario_index", "method", "outcome"))
DERIVED_FIELDS = ("abs_bias", "abs_pct_bias", "abs_bias_over_mc")
REPORT_COLUMNS = ("case", "assertion", "status", "observed", "bound", "detail", "seconds")

_SIM_MODULES = ("rngkit", "_mat2", "datagen", "missingness", "fcs", "mmi", "lmm", "pooling", "simrunner")


def code_fingerprint() -> str:
    """Hash of the modules that determine simulation output."""
    h = hashlib.sha256()
    here = Path(__file__).parent
    for name in _SIM_MODULES:
        h.update((here / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


def records_csv_bytes(records) -> bytes:
    return simrunner.records_csv_text(records).encode()


class ScenarioCache:
    """Runs scenarios, reusing results stored under ``root`` when config and code match."""

    def __init__(self, root=None, parallelism: int = 1):
        self.root = Path(root) if root else None
        self.parallelism = parallelism
        self._memo: dict[str, ScenarioResult] = {}

    def key(self, config: ScenarioConfig) -> str:
        blob = json.dumps({"config": config.to_dict(), "code": code_fingerprint()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def run(self, config: ScenarioConfig) -> ScenarioResult:
        key = self.key(config)
        if key in self._memo:
            return self._memo[key]
        result = self._load(key, config)
        if result is None:
            try:
                result = simrunner.run_scenario(config, self.parallelism)
            except simrunner.ScenarioAborted as exc:
                log.warning("%s", exc)
                result = exc.result
            self._store(key, result)
        self._memo[key] = result
        return result

    def _load(self, key, config):
        if self.root is None:
            return None
        d = self.root / key
        if not (d / "done").exists():
            return None
        records = simrunner.read_records_csv(d / "records.csv")
        with open(d / "diagnostics.json") as fh:
            diagnostics = json.load(fh)
        return ScenarioResult(config, records, simrunner.summarise_records(config, records), diagnostics)

    def _store(self, key, result):
        if self.root is None:
            return
        d = self.root / key
        d.mkdir(parents=True, exist_ok=True)
        simrunner.write_records_csv(result.records, d / "records.csv")
        with open(d / "diagnostics.json", "w") as fh:
            json.dump(result.diagnostics, fh)
        with open(d / "config.yaml", "w") as fh:
            yaml.safe_dump(result.config.to_dict(), fh, sort_keys=False)
        (d / "done").write_text("")


class UnknownMetric(KeyError):
    pass


def metric_value(result: ScenarioResult, path: str) -> float:
    """Look up ``METHOD.OUTCOME.field`` or ``diagnostics.key`` in one scenario's result."""
    parts = path.split(".")
    if parts[0] == "diagnostics" and len(parts) == 2:
        if parts[1] not in result.diagnostics:
            raise UnknownMetric(f"unknown metric {path!r}")
        return float(result.diagnostics[parts[1]])
    if len(parts) != 3:
        raise UnknownMetric(f"unknown metric {path!r}")
    method, outcome, name = parts
    if name not in PERF_FIELDS and name not in DERIVED_FIELDS:
        raise UnknownMetric(f"unknown metric {path!r}")
    for s in result.summaries:
        if s.method == method and s.outcome == outcome:
            if name == "abs_bias":
                return abs(s.bias)
            if name == "abs_pct_bias":
                return abs(s.pct_bias)
            if name == "abs_bias_over_mc":
                return abs(s.bias) / s.mc_error_bias if s.mc_error_bias > 0 else float("inf")
            return float(getattr(s, name))
    raise UnknownMetric(f"unknown metric {path!r}: no summary for {method} {outcome}")


@dataclass
class Assertion:
    metric: str
    comparator: str
    bound: float | str | list  # number, metric path, or [low, high] for "between"
    tolerance: float = 0.0
    scope: str = "all"  # "all" or "at_least:k" over the case's scenarios

    def __post_init__(self):
        if self.comparator not in COMPARATORS:
            raise ValueError(f"unknown comparator {self.comparator!r}")
        if self.scope != "all" and not self.scope.startswith("at_least:"):
            raise ValueError(f"unknown scope {self.scope!r}")
        if (self.comparator == "between") != isinstance(self.bound, (list, tuple)):
            raise ValueError("'between' needs a [low, high] bound and only 'between' takes one")

    def label(self) -> str:
        text = f"{self.metric} {self.comparator} {self.bound}"
        if self.tolerance:
            text += f" (tol {self.tolerance})"
        if self.scope != "all":
            text += f" [{self.scope}]"
        return text

    def holds(self, observed: float, bound: float) -> bool:
        # tolerance widens the bound in the permissive direction
        if self.comparator == "between":
            return bool(bound[0] - self.tolerance <= observed <= bound[1] + self.tolerance)
        slack = self.tolerance if self.comparator in (">", ">=") else -self.tolerance
        return bool(COMPARATORS[self.comparator](observed, bound - slack))

    def _bound(self, result):
        if isinstance(self.bound, str):
            return metric_value(result, self.bound)
        if isinstance(self.bound, (list, tuple)):
            return tuple(float(b) for b in self.bound)
        return float(self.bound)

    def evaluate(self, results: Sequence[ScenarioResult]) -> tuple[bool, str, str]:
        obs, bounds, ok = [], [], []
        for res in results:
            value = metric_value(res, self.metric)
            b = self._bound(res)
            obs.append(value)
            bounds.append(b)
            ok.append(self.holds(value, b))
        needed = len(results) if self.scope == "all" else int(self.scope.split(":", 1)[1])
        passed = sum(ok) >= needed and len(results) > 0
        fmt = lambda xs: ";".join(f"{x:.4g}" for x in xs)  # noqa: E731
        observed = fmt(obs)
        if self.scope != "all":
            observed += f" ({sum(ok)}/{len(ok)} hold)"
        if isinstance(self.bound, (list, tuple)):
            return passed, observed, f"[{self.bound[0]}, {self.bound[1]}]"
        return passed, observed, fmt(bounds)


@dataclass
class AcceptanceCase:
    name: str
    config: dict | str | None = None
    assertions: list[Assertion] = field(default_factory=list)
    check: str | None = None
    budget_seconds: float | None = None
    params: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, d: dict, base: Path | None = None) -> "AcceptanceCase":
        d = dict(d)
        config = d.pop("config", None)
        if isinstance(config, str) and base is not None and not Path(config).is_absolute():
            config = str(base / config)
        asserts = [Assertion(**a) for a in d.pop("assertions", [])]
        return cls(name=d.pop("name"), config=config, assertions=asserts, check=d.pop("check", None),
                   budget_seconds=d.pop("budget_seconds", None), params=d.pop("params", {}) or {})

    def configs(self) -> list[ScenarioConfig]:
        if isinstance(self.config, str):
            return simrunner.load_config(self.config)
        return simrunner.configs_from_mapping(self.config or {})


def load_suite(path) -> list[AcceptanceCase]:
    path = Path(path)
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    return [AcceptanceCase.from_mapping(c, path.parent) for c in doc.get("cases", []) or []]


# -- deterministic checks ------------------------------------------------------------------------

CHECKS: dict[str, Callable] = {}


def register_check(name: str):
    def wrap(fn):
        CHECKS[name] = fn
        return fn
    return wrap


@register_check("oracles")
def _check_oracles(case: AcceptanceCase, cache: ScenarioCache) -> list[tuple[str, bool, str, str]]:
    from . import validation
    return validation.oracle_checks()


@register_check("determinism")
def _check_determinism(case: AcceptanceCase, cache: ScenarioCache):
    configs = case.configs()
    workers = int(case.params.get("parallelism", 8))
    rows = []
    for cfg in configs:
        serial = cache.run(cfg)
        try:
            parallel = simrunner.run_scenario(cfg, parallelism=workers)
        except simrunner.ScenarioAborted as exc:
            parallel = exc.result
        a, b = records_csv_bytes(serial.records), records_csv_bytes(parallel.records)
        same = a == b
        rows.append((f"scenario {cfg.scenario_index} records csv, 1 vs {workers} workers", same,
                     f"sha256 {hashlib.sha256(a).hexdigest()[:12]} vs {hashlib.sha256(b).hexdigest()[:12]}",
                     "identical"))
    return rows


@register_check("sampler_validity")
def _check_sampler(case: AcceptanceCase, cache: ScenarioCache):
    from . import validation
    rows = []
    for cfg in case.configs():
        res = cache.run(cfg)
        altered = int(res.diagnostics.get("observed_altered", -1))
        rows.append((f"scenario {cfg.scenario_index} observed cells unaltered", altered == 0, str(altered), "0"))
    rows += validation.sampler_checks(**case.params.get("sampler", {}))
    return rows


# -- runner --------------------------------------------------------------------------------------

def run_case(case: AcceptanceCase, cache: ScenarioCache) -> list[dict]:
    t0 = time.perf_counter()
    rows = []
    try:
        if case.check is not None:
            if case.check not in CHECKS:
                raise KeyError(f"unknown check {case.check!r}")
            for label, passed, observed, bound in CHECKS[case.check](case, cache):
                rows.append({"case": case.name, "assertion": label, "status": "pass" if passed else "fail",
                             "observed": observed, "bound": bound, "detail": ""})
        else:
            results = [cache.run(cfg) for cfg in case.configs()]
            for a in case.assertions:
                passed, observed, bound = a.evaluate(results)
                rows.append({"case": case.name, "assertion": a.label(), "status": "pass" if passed else "fail",
                             "observed": observed, "bound": bound, "detail": ""})
    except Exception as exc:  # noqa: BLE001 - a broken case must not stop the suite
        log.exception("case %s errored", case.name)
        rows = [{"case": case.name, "assertion": "", "status": "errored", "observed": "", "bound": "",
                 "detail": f"{type(exc).__name__}: {exc}"}]
    elapsed = time.perf_counter() - t0
    for r in rows:
        r["seconds"] = round(elapsed, 2)
    if case.budget_seconds is not None and elapsed > case.budget_seconds:
        log.warning("case %s took %.0fs (budget %.0fs)", case.name, elapsed, case.budget_seconds)
    return rows


def run_acceptance(suite: Sequence[AcceptanceCase], parallelism: int = 1, cache_dir=None) -> pd.DataFrame:
    """Run every case in order and return one report row per assertion."""
    cache = ScenarioCache(cache_dir, parallelism)
    rows = [row for case in suite for row in run_case(case, cache)]
    return pd.DataFrame(rows, columns=list(REPORT_COLUMNS))


def report_ok(report: pd.DataFrame) -> bool:
    return bool((report["status"] == "pass").all()) if len(report) else True
