"""Correlation, error, interval and hypothesis-test statistics used by the evaluation harness."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special


class ConstantSeriesWarning(RuntimeWarning):
    pass


class DegenerateTestError(ValueError):
    pass


def pearson_flagged(pred, target) -> tuple[float, bool]:
    """Sample Pearson coefficient and a flag set when either series is constant (rho := 0)."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"series lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("pearson needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return 0.0, True
    rho = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho)), False


def pearson(pred, target) -> float:
    rho, constant = pearson_flagged(pred, target)
    if constant:
        warnings.warn("constant series; correlation defined as 0", ConstantSeriesWarning, stacklevel=2)
    return rho


def channel_pearson(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Per-channel rho over [S,n] arrays and the indices of constant channels."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ValueError(f"expected matching [S,n] arrays, got {pred.shape} and {target.shape}")
    rhos, flagged = [], []
    for c in range(pred.shape[1]):
        rho, constant = pearson_flagged(pred[:, c], target[:, c])
        rhos.append(rho)
        if constant:
            flagged.append(c)
    return np.array(rhos), flagged


def mae(pred, target) -> float:
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shapes differ: {x.shape} vs {y.shape}")
    return float(np.mean(np.abs(x - y)))


# -- distributions -----------------------------------------------------------
def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    return float(special.betainc(a, b, x))


def f_sf(f: float, d1: float, d2: float) -> float:
    """Upper tail P(F > f) for the F(d1, d2) distribution."""
    if f <= 0:
        return 1.0
    return betainc_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))


def t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) for Student's t."""
    tail = 0.5 * betainc_reg(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def t_ppf(q: float, df: float) -> float:
    if not 0.0 < q < 1.0:
        raise ValueError("quantile must lie in (0, 1)")
    return float(special.stdtrit(df, q))


def chi2_sf_df2(x: float) -> float:
    return math.exp(-x / 2.0) if x > 0 else 1.0


# -- intervals and tests -----------------------------------------------------
def ci95(values: Sequence[float]) -> tuple[float, float]:
    """mean +- t(0.975, r-1) * s / sqrt(r)."""
    v = np.asarray(values, dtype=np.float64)
    r = v.size
    if r < 2:
        raise ValueError("ci95 needs at least two values")
    half = t_ppf(0.975, r - 1) * v.std(ddof=1) / math.sqrt(r)
    m = float(v.mean())
    return m - half, m + half


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p: float


def _check_groups(groups) -> list[np.ndarray]:
    gs = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(gs) < 2:
        raise ValueError(f"need at least 2 groups, got {len(gs)}")
    for i, g in enumerate(gs):
        if g.size < 2:
            raise ValueError(f"group {i} has {g.size} values; need at least 2")
    return gs


def anova_oneway(*groups) -> TestResult:
    """Classical one-way ANOVA: F = MS_between / MS_within."""
    gs = _check_groups(groups)
    k = len(gs)
    n_total = sum(g.size for g in gs)
    grand = np.concatenate(gs).mean()
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in gs)
    ss_within = sum(float(((g - g.mean()) ** 2).sum()) for g in gs)
    if ss_within == 0.0:
        raise DegenerateTestError("degenerate ANOVA: zero within-group variance")
    df_b, df_w = k - 1, n_total - k
    f = (ss_between / df_b) / (ss_within / df_w)
    return TestResult(float(f), f_sf(f, df_b, df_w))


def levene(*groups) -> TestResult:
    """Levene's test with mean centering: ANOVA on absolute deviations."""
    gs = _check_groups(groups)
    dev = [np.abs(g - g.mean()) for g in gs]
    try:
        return anova_oneway(*dev)
    except DegenerateTestError:
        raise DegenerateTestError("degenerate Levene test: constant absolute deviations") from None


def jarque_bera(residuals) -> TestResult:
    x = np.asarray(residuals, dtype=np.float64).ravel()
    n = x.size
    if n < 3:
        raise ValueError("jarque_bera needs at least 3 values")
    d = x - x.mean()
    m2 = float(np.mean(d ** 2))
    if m2 == 0.0:
        raise DegenerateTestError("degenerate Jarque-Bera: zero variance")
    skew = float(np.mean(d ** 3)) / m2 ** 1.5
    kurt = float(np.mean(d ** 4)) / m2 ** 2
    jb = n / 6.0 * (skew ** 2 + (kurt - 3.0) ** 2 / 4.0)
    return TestResult(jb, chi2_sf_df2(jb))


def relative_diff(rho_clean: float, rho_noisy: float) -> float:
    """Percent change from clean to noisy; negative means degradation."""
    if rho_clean == 0:
        raise ZeroDivisionError("relative difference undefined for a clean score of 0")
    return 100.0 * (rho_noisy - rho_clean) / rho_clean


__all__ = ["pearson", "pearson_flagged", "channel_pearson", "mae", "ci95", "anova_oneway", "levene",
           "jarque_bera", "relative_diff", "betainc_reg", "f_sf", "t_sf", "t_ppf", "TestResult",
           "ConstantSeriesWarning", "DegenerateTestError"]
