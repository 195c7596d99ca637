"""Factorial ANOVA and MANOVA over scenario-level performance measures.

The F-statistics here are descriptive: they rank how much each factor (or
interaction of factors) moves a performance measure across the scenario
grid. No p-values are produced.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

ANOVA_FACTORS = ("design", "icc", "mechanism", "eta", "nonresponse")

MEASURE_COLUMNS = {
    "bias": "bias",
    "coverage": "coverage_rate",
    "rmse": "rmse",
    "aw": "avg_width",
}


@dataclass
class AnovaTable:
    """Sequential (Type-I) ANOVA table; the residual row is kept separately."""

    measure: str
    terms: list[str]
    df: np.ndarray
    sum_sq: np.ndarray
    resid_df: int
    resid_ss: float
    total_ss: float
    method: str | None = None
    outcome: str | None = None

    @property
    def mean_sq(self) -> np.ndarray:
        return np.where(self.df > 0, self.sum_sq / np.maximum(self.df, 1), 0.0)

    @property
    def resid_ms(self) -> float:
        return self.resid_ss / self.resid_df

    @property
    def F(self) -> np.ndarray:
        ms = self.mean_sq
        mse = self.resid_ms
        # a term with no variability contributes F = 0, even on a perfect fit
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(ms > 0, ms / mse, 0.0)
        return f

    def get(self, term: str) -> dict:
        i = self.terms.index(term)
        return {"df": int(self.df[i]), "sum_sq": float(self.sum_sq[i]),
                "mean_sq": float(self.mean_sq[i]), "F": float(self.F[i])}

    def to_frame(self) -> pd.DataFrame:
        out = pd.DataFrame({"term": self.terms, "df": self.df.astype(int), "sum_sq": self.sum_sq,
                            "mean_sq": self.mean_sq, "F": self.F})
        resid = pd.DataFrame({"term": ["Residual"], "df": [self.resid_df], "sum_sq": [self.resid_ss],
                              "mean_sq": [self.resid_ms], "F": [np.nan]})
        out = pd.concat([out, resid], ignore_index=True)
        out.insert(0, "measure", self.measure)
        if self.outcome is not None:
            out.insert(0, "outcome", self.outcome)
        if self.method is not None:
            out.insert(0, "method", self.method)
        return out


def term_labels(factors: Sequence[str], max_order: int = 4) -> list[tuple[str, ...]]:
    """Main effects first, then 2-way interactions, and so on, each group in factor order."""
    return [c for k in range(1, min(max_order, len(factors)) + 1) for c in combinations(factors, k)]


def _contrasts(codes: np.ndarray, n_levels: int) -> np.ndarray:
    # sum-to-zero coding keeps interaction blocks orthogonal to main effects on balanced grids
    if n_levels < 2:
        return np.zeros((codes.size, 0))
    c = np.zeros((codes.size, n_levels - 1))
    for k in range(n_levels - 1):
        c[:, k] = (codes == k).astype(float)
    c[codes == n_levels - 1, :] = -1.0
    return c


def _term_block(term, coded):
    block = np.ones((next(iter(coded.values())).shape[0], 1))
    for f in term:
        c = coded[f]
        block = (block[:, :, None] * c[:, None, :]).reshape(block.shape[0], -1)
    return block


def _sequential_projections(X_blocks: list[np.ndarray], Y: np.ndarray, tol: float = 1e-10):
    """Per-block sequential hypothesis cross-products, residual cross-product and block ranks."""
    n = Y.shape[0]
    basis = np.ones((n, 1)) / np.sqrt(n)
    Yc = Y - basis @ (basis.T @ Y)
    hyp, ranks = [], []
    for B in X_blocks:
        if B.shape[1] == 0:
            hyp.append(np.zeros((Y.shape[1], Y.shape[1])))
            ranks.append(0)
            continue
        # two passes of Gram-Schmidt against earlier terms for numerical safety
        B = B - basis @ (basis.T @ B)
        B = B - basis @ (basis.T @ B)
        u, s, _ = np.linalg.svd(B, full_matrices=False)
        keep = s > tol * max(1.0, s[0] if s.size else 0.0)
        Q = u[:, keep]
        proj = Q.T @ Yc
        hyp.append(proj.T @ proj)
        ranks.append(Q.shape[1])
        Yc = Yc - Q @ proj
        basis = np.hstack([basis, Q])
    return hyp, Yc.T @ Yc, ranks, basis.shape[1]


def _coded_factors(frame: pd.DataFrame, factors: Sequence[str]):
    coded = {}
    for f in factors:
        codes, levels = pd.factorize(frame[f], sort=True)
        coded[f] = _contrasts(codes, len(levels))
    return coded


def _design_blocks(frame, factors, max_order):
    terms = term_labels(factors, max_order)
    coded = _coded_factors(frame, factors)
    return terms, [_term_block(t, coded) for t in terms]


def factorial_anova(frame: pd.DataFrame, factors: Sequence[str], response: str,
                    max_order: int = 4, measure: str | None = None) -> AnovaTable:
    """Fixed-effects ANOVA with all interactions up to ``max_order``, Type-I sums of squares.

    Terms are entered in the order given by ``factors``; terms that carry no
    degrees of freedom once earlier terms are in the model are dropped.
    """
    y = np.asarray(frame[response], dtype=float)
    if np.isnan(y).any():
        raise ValueError(f"missing values in response {response!r}")
    terms, blocks = _design_blocks(frame, list(factors), max_order)
    hyp, resid, ranks, rank = _sequential_projections(blocks, y[:, None])
    resid_df = y.size - rank
    if resid_df <= 0:
        raise ValueError("saturated model: no residual degrees of freedom")
    keep = [i for i, r in enumerate(ranks) if r > 0]
    ss = np.array([hyp[i][0, 0] for i in keep])
    total = float(np.sum((y - y.mean()) ** 2))
    return AnovaTable(
        measure=measure or response,
        terms=[":".join(terms[i]) for i in keep],
        df=np.array([ranks[i] for i in keep]),
        sum_sq=np.clip(ss, 0.0, None),
        resid_df=int(resid_df),
        resid_ss=max(float(resid[0, 0]), 0.0),
        total_ss=total,
    )


@dataclass
class WilksResult:
    term: str
    df: int
    wilks_lambda: float
    approx_F: float
    num_df: float
    den_df: float


def rao_f(wilks: float, p: int, q: int, resid_df: int) -> tuple[float, float, float]:
    """Rao's F approximation for Wilks' lambda with p responses and q hypothesis df."""
    if p * p + q * q - 5 > 0:
        t = np.sqrt((p * p * q * q - 4.0) / (p * p + q * q - 5.0))
    else:
        t = 1.0
    w = resid_df + q - (p + q + 1) / 2.0
    df1 = p * q
    df2 = w * t - p * q / 2.0 + 1.0
    root = wilks ** (1.0 / t)
    if root == 0:
        return np.inf, df1, df2
    return (1.0 - root) / root * df2 / df1, df1, df2


def manova_wilks(frame: pd.DataFrame, factors: Sequence[str], responses: Sequence[str],
                 max_order: int = 4) -> list[WilksResult]:
    """Wilks' lambda and its approximate F for every term, using sequential hypothesis matrices."""
    Y = np.asarray(frame[list(responses)], dtype=float)
    if Y.ndim != 2 or Y.shape[1] < 1:
        raise ValueError("manova needs at least one response")
    terms, blocks = _design_blocks(frame, list(factors), max_order)
    hyp, E, ranks, rank = _sequential_projections(blocks, Y)
    resid_df = Y.shape[0] - rank
    if resid_df <= 0:
        raise ValueError("saturated model: no residual degrees of freedom")
    det_e = np.linalg.det(E)
    scale = np.prod(np.diag(E)) if np.all(np.diag(E) > 0) else 0.0
    if not scale > 0 or det_e <= 1e-12 * scale:
        raise ValueError("degenerate residual structure: residual cross-product matrix is singular")
    p = Y.shape[1]
    out = []
    for t, H, q in zip(terms, hyp, ranks):
        if q == 0:
            continue
        lam = det_e / np.linalg.det(E + H)
        lam = float(min(max(lam, 0.0), 1.0))
        f, d1, d2 = rao_f(lam, p, q, resid_df)
        out.append(WilksResult(":".join(t), q, lam, float(f), float(d1), float(d2)))
    return out


def unsatisfactory_proportion(perf: pd.DataFrame, measure: str) -> float:
    """Share of scenarios flagged for a measure: biased for bias, under/over-coverage for coverage.

    Other measures carry no flag and return 1 so their F values are only normalised.
    """
    if perf.empty:
        return 0.0
    if measure == "bias":
        flag = perf["biased"]
    elif measure == "coverage":
        flag = perf["undercoverage"] | perf["overcoverage"]
    else:
        return 1.0
    return float(np.mean(flag.astype(bool)))


def normalize_and_scale_f(tables: Iterable[AnovaTable], flag_proportions: Mapping) -> pd.DataFrame:
    """Divide F by the largest F for the same measure and scale by each method's flag proportion.

    ``flag_proportions`` is keyed by method or by ``(method, measure)``.
    """
    tables = list(tables)
    if not tables:
        raise ValueError("no tables to normalise")
    top: dict[str, float] = {}
    for t in tables:
        f = t.F[np.isfinite(t.F)]
        top[t.measure] = max(top.get(t.measure, 0.0), float(f.max()) if f.size else 0.0)
    rows = []
    for t in tables:
        prop = flag_proportions.get((t.method, t.measure), flag_proportions.get(t.method, 1.0))
        peak = top[t.measure]
        for term, f in zip(t.terms, t.F):
            value = 0.0 if peak == 0 else float(min(f, peak)) / peak * prop
            row = {"method": t.method, "measure": t.measure, "term": term, "scaled_value": value}
            if t.outcome is not None:
                row["outcome"] = t.outcome
            rows.append(row)
    return pd.DataFrame(rows)


@dataclass
class AnovaReport:
    tables: list[AnovaTable] = field(default_factory=list)
    scaled: pd.DataFrame | None = None
    pooled: list[AnovaTable] = field(default_factory=list)

    def table_frame(self) -> pd.DataFrame:
        frames = [t.to_frame() for t in self.tables + self.pooled]
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def _present_factors(frame: pd.DataFrame, factors: Sequence[str]) -> list[str]:
    return [f for f in factors if f in frame and frame[f].nunique() > 1]


def analyse_performance(perf: pd.DataFrame, measure: str, factors: Sequence[str] = ANOVA_FACTORS,
                        max_order: int = 4) -> AnovaReport:
    """Per-method, per-outcome ANOVA of one measure plus a pooled fit with method as a factor."""
    if measure not in MEASURE_COLUMNS:
        raise ValueError(f"unknown measure {measure!r}; expected one of {sorted(MEASURE_COLUMNS)}")
    col = MEASURE_COLUMNS[measure]
    perf = perf.dropna(subset=[col])
    factors = _present_factors(perf, factors)
    report = AnovaReport()
    props = {}
    for (method, outcome), part in perf.groupby(["method", "outcome"], sort=True):
        t = factorial_anova(part, factors, col, max_order=max_order, measure=measure)
        t.method, t.outcome = method, outcome
        report.tables.append(t)
        props[method] = unsatisfactory_proportion(perf[perf["method"] == method], measure)
    report.scaled = normalize_and_scale_f(report.tables, props) if report.tables else None
    if perf["method"].nunique() > 1:
        for outcome, part in perf.groupby("outcome", sort=True):
            t = factorial_anova(part, list(factors) + ["method"], col, max_order=max_order, measure=measure)
            t.method, t.outcome = "pooled", outcome
            report.pooled.append(t)
    return report
