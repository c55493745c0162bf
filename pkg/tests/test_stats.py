"""Oracle tests for the self-contained stats module.

Expected values were computed independently (closed form where available,
scipy.stats/scipy.special otherwise) and frozen here; scipy also serves as a
live second route on randomized fixtures so the two implementations are never
collapsed into one.
"""

import math

import numpy as np
import pytest
from scipy import special as sp_special
from scipy import stats as sp_stats

from advstim import stats


def test_betainc_matches_scipy_to_1e10():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(400):
        a = float(rng.uniform(0.3, 60.0))
        b = float(rng.uniform(0.3, 60.0))
        x = float(rng.uniform(0.0, 1.0))
        got = stats.betainc_reg(a, b, x)
        want = float(sp_special.betainc(a, b, x))
        worst = max(worst, abs(got - want))
    assert worst < 1e-10


def test_betainc_endpoints_and_symmetry():
    assert stats.betainc_reg(2.0, 3.0, 0.0) == 0.0
    assert stats.betainc_reg(2.0, 3.0, 1.0) == 1.0
    # I_x(a,b) + I_{1-x}(b,a) == 1
    v = stats.betainc_reg(4.5, 2.5, 0.3) + stats.betainc_reg(2.5, 4.5, 0.7)
    assert abs(v - 1.0) < 1e-12


def test_t_sf_against_scipy():
    rng = np.random.default_rng(3)
    for _ in range(200):
        t = float(rng.normal(scale=3.0))
        dof = float(rng.integers(2, 200))
        assert abs(stats.t_sf(t, dof) - sp_stats.t.sf(t, dof)) < 1e-10
        assert abs(stats.t_two_tailed_p(t, dof) - 2 * sp_stats.t.sf(abs(t), dof)) < 1e-10


def test_f_sf_against_scipy():
    rng = np.random.default_rng(4)
    for _ in range(200):
        f = float(rng.uniform(0.0, 12.0))
        d1 = float(rng.integers(1, 12))
        d2 = float(rng.integers(2, 300))
        assert abs(stats.f_sf(f, d1, d2) - sp_stats.f.sf(f, d1, d2)) < 1e-10


def test_one_sample_t_binary_12_of_20():
    # 12 target choices out of 20 against 0.5; frozen from an independent run
    x = [1.0] * 12 + [0.0] * 8
    res = stats.one_sample_t(x, 0.5)
    assert abs(res.statistic - 0.889756521002609) < 1e-9
    assert abs(res.p_value - 0.384724230431452) < 1e-9
    assert res.dof == 19


def test_one_sample_t_exact_null_and_degenerate():
    res = stats.one_sample_t([0, 1, 0, 1], 0.5)
    assert res.statistic == 0.0
    assert res.p_value == 1.0
    const = stats.one_sample_t([0.75, 0.75, 0.75], 0.5)
    assert math.isinf(const.statistic) and const.p_value == 0.0
    on_null = stats.one_sample_t([0.5, 0.5, 0.5], 0.5)
    assert on_null.statistic == 0.0 and on_null.p_value == 1.0


def test_two_sample_t_fixture():
    a = [2.1, 2.5, 1.9, 2.8, 2.4]
    b = [1.2, 1.6, 1.1, 1.4, 1.8, 1.3]
    res = stats.two_sample_t(a, b)
    assert abs(res.statistic - 5.10565811186421) < 1e-9
    assert abs(res.p_value - 0.000640243221978396) < 1e-9
    assert res.dof == 9
    welch = stats.two_sample_t(a, b, equal_var=False)
    assert abs(welch.statistic - 4.95882863659598) < 1e-9
    assert abs(welch.p_value - 0.00145326745414949) < 1e-9


def test_two_sample_t_random_vs_scipy():
    rng = np.random.default_rng(7)
    for _ in range(50):
        a = rng.normal(size=rng.integers(4, 40))
        b = rng.normal(loc=0.3, size=rng.integers(4, 40))
        res = stats.two_sample_t(a, b)
        t, p = sp_stats.ttest_ind(a, b)
        assert abs(res.statistic - t) < 1e-9
        assert abs(res.p_value - p) < 1e-9


def test_anova_closed_form_fixture():
    # grand mean 3.5; SSB = 3*(1.5^2)*2 = 13.5, SSW = 4, F = 13.5
    res = stats.one_way_anova([1, 2, 3], [4, 5, 6])
    assert abs(res.statistic - 13.5) < 1e-12
    assert res.dof_between == 1 and res.dof_within == 4
    assert abs(res.p_value - 0.0213116411287567) < 1e-9


def test_anova_random_vs_scipy():
    rng = np.random.default_rng(8)
    for _ in range(30):
        gs = [rng.normal(loc=m, size=rng.integers(3, 25)) for m in (0.0, 0.2, 0.5)]
        res = stats.one_way_anova(*gs)
        f, p = sp_stats.f_oneway(*gs)
        assert abs(res.statistic - f) < 1e-9
        assert abs(res.p_value - p) < 1e-9


def test_anova_identical_groups():
    res = stats.one_way_anova([1.0, 2.0], [1.0, 2.0])
    assert res.statistic == 0.0
    assert res.p_value == 1.0


def test_pearson_five_point_fixture():
    xs = [1.0, 2.0, 3.0, 4.0, 5.0]
    ys = [1.2, 1.9, 3.4, 3.9, 5.1]
    res = stats.pearson_correlation(xs, ys)
    assert abs(res.r - 0.99096119499178692) < 1e-12
    assert abs(res.p_value - 0.0010301742308432328) < 1e-9


def test_pearson_perfect_lines():
    xs = [0.0, 1.0, 2.0, 3.0]
    res = stats.pearson_correlation(xs, [2 * v + 1 for v in xs])
    assert res.r == 1.0 and res.p_value == 0.0
    res = stats.pearson_correlation(xs, [-3 * v for v in xs])
    assert res.r == -1.0 and res.p_value == 0.0


def test_binomial_sf_against_scipy():
    rng = np.random.default_rng(9)
    for _ in range(100):
        n = int(rng.integers(5, 200))
        k = int(rng.integers(0, n + 1))
        p = float(rng.uniform(0.05, 0.95))
        assert abs(stats.binomial_sf(k, n, p) - sp_stats.binom.sf(k - 1, n, p)) < 1e-10


def test_paired_success_sign_test():
    # 30 adv-only successes vs 2 flip-only successes is decisive
    assert stats.paired_success_sign_test(30, 2) < 1e-5
    assert stats.paired_success_sign_test(0, 0) == 1.0
    assert abs(stats.paired_success_sign_test(1, 1) - 0.75) < 1e-12


def test_ks_uniform_against_scipy():
    rng = np.random.default_rng(10)
    for _ in range(20):
        x = rng.uniform(size=200)
        d, p = stats.ks_uniform(x)
        sd, sp = sp_stats.kstest(x, "uniform")
        assert abs(d - sd) < 1e-12
        # corrected-asymptotic vs exact p: percent-level agreement is all the
        # alpha=0.01 simulation gates need at n=200
        assert abs(p - sp) < 2e-2


def test_ks_uniform_detects_nonuniform():
    rng = np.random.default_rng(12)
    x = rng.uniform(size=500) ** 3
    _, p = stats.ks_uniform(x)
    assert p < 1e-6


@pytest.mark.parametrize("dof", [1, 2, 5, 30])
def test_t_p_monotone_in_statistic(dof):
    ps = [stats.t_two_tailed_p(t, dof) for t in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert all(a > b for a, b in zip(ps, ps[1:]))
    assert ps[0] == 1.0


def test_anova_null_p_uniform():
    # continuous null data: p-values must look uniform under K-S
    rng = np.random.default_rng(123)
    ps = []
    for _ in range(500):
        gs = [rng.normal(size=12) for _ in range(3)]
        ps.append(stats.one_way_anova(*gs).p_value)
    _, p = stats.ks_uniform(ps)
    assert p > 0.01
