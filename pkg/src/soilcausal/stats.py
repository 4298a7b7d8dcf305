"""Gaussian conditional-independence tests and structure scores.

Everything runs off a (n, mean, covariance) sufficient statistic, so the
constraint-based and score-based searches never touch raw rows more than
once.  Singular covariance submatrices (expected under one-hot collinearity
and duplicated lag columns) fall back to a tiny ridge and are counted on a
warning counter that benchmark reports surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, NumericError

RIDGE = 1e-10
_RSS_FLOOR = 1e-12  # keeps log-likelihoods finite under exact collinearity


@dataclass
class WarningCounter:
    """Mutable tally of numerical fallbacks, surfaced in benchmark reports."""

    singular_fallbacks: int = 0
    empty_interventional: int = 0

    def reset(self) -> None:
        self.singular_fallbacks = 0
        self.empty_interventional = 0

    def total(self) -> int:
        return self.singular_fallbacks + self.empty_interventional


GLOBAL_WARNINGS = WarningCounter()


@dataclass(frozen=True, eq=False)
class GaussianSuffStat:
    """Second-moment summary of a set of columns (covariance uses ddof=1)."""

    n: int
    mean: np.ndarray
    cov: np.ndarray
    columns: tuple[str, ...]

    def index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError as exc:
            raise ConfigError(f"column {name!r} not in sufficient statistic") from exc


def _extract(table, columns: Sequence[str] | None) -> tuple[np.ndarray, tuple[str, ...]]:
    """Accept an ingest Table (via .matrix), a (matrix, names) pair, or a
    bare matrix; return float64 data plus column names."""
    if hasattr(table, "matrix"):
        names = tuple(columns) if columns is not None else tuple(c.name for c in table.schema)
        return np.asarray(table.matrix(names), dtype=np.float64), names
    if isinstance(table, tuple) and len(table) == 2:
        data, names = table
        data = np.asarray(data, dtype=np.float64)
        names = tuple(names)
        if columns is not None:
            idx = [names.index(c) for c in columns]
            return data[:, idx], tuple(columns)
        return data, names
    data = np.asarray(table, dtype=np.float64)
    if columns is not None:
        names = tuple(columns)
        if len(names) != data.shape[1]:
            raise ConfigError("column name count does not match matrix width")
    else:
        names = tuple(f"c{i}" for i in range(data.shape[1]))
    return data, names


def suff_stat(table, columns: Sequence[str] | None = None) -> GaussianSuffStat:
    """Mean and unbiased covariance of the named columns."""
    data, names = _extract(table, columns)
    n = data.shape[0]
    if n < 2:
        raise NumericError("sufficient statistic needs at least 2 rows")
    mean = data.mean(axis=0)
    xc = data - mean
    cov = (xc.T @ xc) / (n - 1)
    cov = (cov + cov.T) / 2.0
    return GaussianSuffStat(n=n, mean=mean, cov=cov, columns=names)


def _spd_inverse(m: np.ndarray, warn: WarningCounter) -> np.ndarray:
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        warn.singular_fallbacks += 1
        m = m + RIDGE * np.eye(m.shape[0])
    return np.linalg.inv(m)


def partial_correlation(
    i: int,
    j: int,
    S: Iterable[int],
    stat: GaussianSuffStat,
    warn: WarningCounter = GLOBAL_WARNINGS,
) -> float:
    """Correlation of the residuals of columns i and j after linearly
    removing the columns in S, read off the precision of the covariance
    submatrix on {i, j} | S."""
    S = tuple(sorted(S))
    if i == j:
        raise ConfigError("partial correlation needs two distinct columns")
    if i in S or j in S:
        raise ConfigError("conditioning set must exclude the tested pair")
    idx = [i, j, *S]
    sub = stat.cov[np.ix_(idx, idx)]
    # Work on the correlation scale: partial correlation is invariant to
    # per-column scaling and the ridge fallback then has a scale-free effect.
    d = np.sqrt(np.clip(np.diag(sub), 0.0, None))
    if d[0] == 0.0 or d[1] == 0.0:  # constant column: no linear signal
        warn.singular_fallbacks += 1
        return 0.0
    dsafe = np.where(d > 0.0, d, 1.0)
    corr = sub / np.outer(dsafe, dsafe)
    np.fill_diagonal(corr, 1.0)
    prec = _spd_inverse(corr, warn)
    denom = math.sqrt(prec[0, 0] * prec[1, 1])
    r = float(-prec[0, 1] / denom)
    if not math.isfinite(r):
        raise NumericError(f"partial correlation diverged for ({i}, {j} | {S})")
    r = max(-1.0, min(1.0, r))
    if abs(r) > 1.0 - 1e-8:  # collapse ridge-sized fuzz at the boundary so
        r = math.copysign(1.0, r)  # exact proportionality reports |r| = 1
    return r


@dataclass(frozen=True)
class CITestResult:
    statistic: float
    p_value: float
    independent: bool


def fisher_z_test(
    i: int,
    j: int,
    S: Iterable[int],
    stat: GaussianSuffStat,
    alpha: float = 0.05,
    warn: WarningCounter = GLOBAL_WARNINGS,
) -> CITestResult:
    """Two-sided test of zero partial correlation via the z-transform
    z = 0.5 * sqrt(n - |S| - 3) * ln((1+r)/(1-r))."""
    S = tuple(sorted(S))
    dof = stat.n - len(S) - 3
    if dof <= 0:
        raise NumericError(
            f"need n > |S| + 3 for the z-test (n={stat.n}, |S|={len(S)})"
        )
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    r = partial_correlation(i, j, S, stat, warn=warn)
    if abs(r) >= 1.0:
        return CITestResult(math.copysign(math.inf, r), 0.0, False)
    z = 0.5 * math.sqrt(dof) * math.log((1.0 + r) / (1.0 - r))
    p = float(2.0 * norm.sf(abs(z)))
    return CITestResult(z, p, p > alpha)


# ---------------------------------------------------------------------------
# Gaussian BIC structure scores (higher is better)
# ---------------------------------------------------------------------------


def bic_local_stat(
    y: int,
    parents: Iterable[int],
    stat: GaussianSuffStat,
    warn: WarningCounter = GLOBAL_WARNINGS,
) -> float:
    """Local score of column y given parent columns, from the statistic:
    -(n/2) ln(RSS/n) - (k/2) ln(n) with k = |parents| + 2."""
    parents = tuple(sorted(parents))
    if y in parents:
        raise ConfigError("a column cannot parent itself")
    n = stat.n
    syy = float(stat.cov[y, y])
    if parents:
        idxp = list(parents)
        spp = stat.cov[np.ix_(idxp, idxp)]
        spy = stat.cov[idxp, y]
        prec = _spd_inverse(spp, warn)
        explained = float(spy @ prec @ spy)
    else:
        explained = 0.0
    rss = max((n - 1) * (syy - explained), _RSS_FLOOR)
    k = len(parents) + 2
    return -(n / 2.0) * math.log(rss / n) - (k / 2.0) * math.log(n)


def _masked_local_score(node, parents, table, mask, warn) -> float:
    cols = (node, *sorted(parents))
    data, _ = _extract(table, cols)
    sub = data[mask]
    if sub.shape[0] < 2:
        warn.empty_interventional += 1
        return 0.0
    stat = suff_stat(sub, cols)
    return bic_local_stat(0, range(1, len(cols)), stat, warn=warn)


def bic_local(
    node: str,
    parents: Iterable[str],
    table,
    warn: WarningCounter = GLOBAL_WARNINGS,
) -> float:
    """Observational local score of `node` given `parents` (column names)."""
    parents = tuple(sorted(parents))
    if node in parents:
        raise ConfigError("a column cannot parent itself")
    data, _ = _extract(table, (node, *parents))
    mask = np.ones(data.shape[0], dtype=bool)
    return _masked_local_score(node, parents, table, mask, warn)


def bic_graph(dag, table, warn: WarningCounter = GLOBAL_WARNINGS) -> float:
    """Decomposable graph score: sum of local scores under the DAG's parent
    sets; equal across Markov-equivalent DAGs up to float error."""
    stat = suff_stat(table, dag.nodes)
    idx = {name: k for k, name in enumerate(stat.columns)}
    parents: dict[str, list[int]] = {v: [] for v in dag.nodes}
    for a, b in dag.edges:
        parents[b].append(idx[a])
    return sum(
        bic_local_stat(idx[v], parents[v], stat, warn=warn) for v in dag.nodes
    )


def bic_local_interventional(
    node: str,
    parents: Iterable[str],
    table,
    targets: Sequence[frozenset[str]],
    warn: WarningCounter = GLOBAL_WARNINGS,
) -> float:
    """Local score restricted to rows where `node` was not intervened on;
    rows whose mechanism was replaced say nothing about the natural one.
    With no interventions anywhere this equals bic_local bit for bit."""
    parents = tuple(sorted(parents))
    if node in parents:
        raise ConfigError("a column cannot parent itself")
    data, _ = _extract(table, (node, *parents))
    n = data.shape[0]
    if len(targets) != n:
        raise ConfigError("one intervention-target set required per row")
    mask = np.fromiter((node not in t for t in targets), dtype=bool, count=n)
    if not mask.any():
        warn.empty_interventional += 1
        return 0.0
    return _masked_local_score(node, parents, table, mask, warn)
