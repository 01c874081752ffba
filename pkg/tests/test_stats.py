import math
import warnings

import mpmath
import numpy as np
import pytest
from scipy import stats as sps

from stat_oracles import oracle_anova, oracle_jb, oracle_levene, oracle_pearson
from rgcnode.stats import (ConstantSeriesWarning, DegenerateTestError, anova_oneway, betainc_reg, channel_pearson,
                           ci95, f_sf, jarque_bera, levene, mae, pearson, pearson_flagged, relative_diff, t_ppf,
                           t_sf)

FIXTURES = [
    [[0.56, 0.57, 0.57, 0.57, 0.58], [0.60, 0.61, 0.59, 0.62, 0.60], [0.55, 0.52, 0.56, 0.54, 0.53]],
    [[1.0, 2.5, 3.1], [2.0, 2.2, 2.9, 4.0], [0.3, 1.1]],
    [[0.0, 0.1], [5.0, 5.1], [10.0, 10.1]],
]


# -- pearson / mae ------------------------------------------------------------------
def test_pearson_examples():
    x = [0.3, 1.2, -0.4, 2.2]
    assert pearson(x, x) == pytest.approx(1.0, abs=1e-15)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)
    # sxy = 2, sxx = 2.75, syy = 2
    assert pearson([0, 0, 1, 2], [0, 1, 1, 2]) == pytest.approx(2 / math.sqrt(5.5), abs=1e-12)
    assert pearson([0, 0, 1, 2], [0, 1, 1, 2]) == pytest.approx(0.8528, abs=1e-4)
    assert pearson([0, 0, 1, 2], [0, 1, 1, 2]) == pytest.approx(oracle_pearson([0, 0, 1, 2], [0, 1, 1, 2]), abs=1e-12)


def test_pearson_matches_oracle_random():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal(200), rng.standard_normal(200)
    y = y + 0.5 * x
    assert pearson(x, y) == pytest.approx(oracle_pearson(list(x), list(y)), abs=1e-12)
    assert pearson(x, y) == pytest.approx(sps.pearsonr(x, y)[0], abs=1e-12)


def test_pearson_constant_series_flagged():
    rho, flag = pearson_flagged([1, 1, 1], [1, 2, 3])
    assert rho == 0.0 and flag
    with pytest.warns(ConstantSeriesWarning):
        assert pearson([1, 2, 3], [4, 4, 4]) == 0.0
    rhos, flagged = channel_pearson(np.array([[1, 2], [1, 3], [1, 5]]), np.array([[0, 1], [1, 2], [2, 3]]))
    assert flagged == [0] and rhos[0] == 0.0 and -1 <= rhos[1] <= 1
    with pytest.raises(ValueError):
        pearson([1.0], [2.0])


def test_mae_examples():
    assert mae([1, 2, 3], [1, 2, 3]) == 0.0
    assert mae([0, 4], [2, 2]) == 2.0
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(1000), rng.standard_normal(1000)
    brute = 0.0
    for u, v in zip(a, b):
        brute += abs(u - v)
    assert mae(a, b) == pytest.approx(brute / 1000, abs=1e-12)


# -- confidence intervals -----------------------------------------------------------
def test_ci95_examples():
    lo, hi = ci95([0.4] * 5)
    assert lo == hi == pytest.approx(0.4)
    vals = [0.56, 0.57, 0.57, 0.57, 0.58]
    lo, hi = ci95(vals)
    s = math.sqrt(sum((v - 0.57) ** 2 for v in vals) / 4)
    assert lo < 0.57 < hi
    assert (hi - lo) / 2 == pytest.approx(2.776 * s / math.sqrt(5), rel=1e-3)
    assert (lo + hi) / 2 == pytest.approx(np.mean(vals), abs=1e-15)
    with pytest.raises(ValueError):
        ci95([0.5])


def test_t_quantile_against_table_and_mpmath():
    assert t_ppf(0.975, 4) == pytest.approx(2.776, abs=5e-4)
    for df in (1, 2, 4, 9, 30):
        q = t_ppf(0.975, df)
        tail = mpmath.betainc(df / 2, 0.5, 0, df / (df + q * q), regularized=True) / 2
        assert float(tail) == pytest.approx(0.025, abs=1e-10)
        assert t_sf(q, df) == pytest.approx(0.025, abs=1e-10)


# -- special functions --------------------------------------------------------------
@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (1.0, 2.0, 0.9), (2.5, 7.0, 0.1), (10.0, 0.5, 0.95),
                                   (40.0, 3.0, 0.8), (0.1, 12.0, 0.001)])
def test_betainc_matches_mpmath(a, b, x):
    ref = float(mpmath.betainc(a, b, 0, x, regularized=True))
    assert abs(betainc_reg(a, b, x) - ref) <= 1e-10


def test_f_sf_matches_scipy():
    for f, d1, d2 in [(0.5, 2, 12), (3.1, 3, 20), (25.0, 2, 6)]:
        assert f_sf(f, d1, d2) == pytest.approx(sps.f.sf(f, d1, d2), abs=1e-12)
    assert f_sf(0.0, 2, 5) == 1.0


# -- ANOVA, Levene, Jarque-Bera ---------------------------------------------------------
@pytest.mark.parametrize("groups", FIXTURES)
def test_anova_matches_textbook(groups):
    f, p = oracle_anova(groups)
    res = anova_oneway(*groups)
    assert res.statistic == pytest.approx(f, abs=1e-6)
    assert res.p == pytest.approx(p, abs=1e-4)
    ref = sps.f_oneway(*groups)
    assert res.statistic == pytest.approx(ref.statistic, rel=1e-9)


def test_anova_examples():
    res = anova_oneway([1, 2, 3], [1, 2, 3], [1, 2, 3])
    assert res.statistic == 0.0 and res.p == 1.0
    assert anova_oneway([0, 0.1], [5, 5.1], [10, 10.1]).p < 1e-4
    with pytest.raises(ValueError):
        anova_oneway([1, 2, 3])
    with pytest.raises(ValueError):
        anova_oneway([1, 2], [3])
    with pytest.raises(DegenerateTestError, match="degenerate ANOVA"):
        anova_oneway([1, 1], [2, 2])


@pytest.mark.parametrize("groups", FIXTURES[:2])
def test_levene_matches_textbook(groups):
    w, p = oracle_levene(groups)
    res = levene(*groups)
    assert res.statistic == pytest.approx(w, abs=1e-6)
    assert res.p == pytest.approx(p, abs=1e-4)
    ref = sps.levene(*groups, center="mean")
    assert res.statistic == pytest.approx(ref.statistic, rel=1e-9)


def test_levene_simulation():
    rng = np.random.default_rng(42)
    same = [rng.standard_normal(30) for _ in range(3)]
    assert levene(*same).p > 0.05
    scaled = [rng.standard_normal(30), rng.standard_normal(30), 100 * rng.standard_normal(30)]
    assert levene(*scaled).p < 0.01
    with pytest.raises(DegenerateTestError):
        levene([1, 1], [2, 2])


def test_jarque_bera_matches_textbook_and_simulation():
    x = list(np.random.default_rng(3).exponential(size=40))
    jb, p = oracle_jb(x)
    res = jarque_bera(x)
    assert res.statistic == pytest.approx(jb, abs=1e-6)
    assert res.p == pytest.approx(p, abs=1e-4)
    ref = sps.jarque_bera(x)
    assert res.statistic == pytest.approx(ref.statistic, rel=1e-9)
    normal = jarque_bera(np.random.default_rng(7).standard_normal(500))
    assert normal.p > 0.05
    with pytest.raises(DegenerateTestError):
        jarque_bera([2.0, 2.0, 2.0])


def test_relative_diff():
    assert relative_diff(0.5, 0.5) == 0.0
    assert relative_diff(0.5, 0.45) == pytest.approx(-10.0)
    with pytest.raises(ZeroDivisionError):
        relative_diff(0.0, 0.3)
