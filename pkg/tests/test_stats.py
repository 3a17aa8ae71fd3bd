import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from nof1embed.dataio import TrialDesign
from nof1embed.errors import ConfigError, NumericError, UsageError, ValidationError
from nof1embed.stats import (
    AssignmentScheme,
    PhaseSeries,
    TestResult,
    enumerate_assignments,
    enumerate_block_assignments,
    lm_ar1,
    paired_t_test,
    randomization_test_mc,
    scrt_exact,
    two_sample_t_test,
)

ABAB8 = [False, True] * 4


def toy_b4():
    # one observation per block; treatment on blocks 1 and 3
    return PhaseSeries.regular([4.0, 1.0, 3.0, 0.0], [False, True, False, True], 1)


def paired_from_differences(d):
    """Series whose chronological pairing reproduces the given differences."""
    d = np.asarray(d, dtype=float)
    n = len(d)
    off = np.zeros(n)
    values = np.concatenate([off, d])
    return PhaseSeries(values, np.r_[np.zeros(n, bool), np.ones(n, bool)], n, np.arange(2 * n))


# --- paired t ---------------------------------------------------------------

def test_paired_t_hand_example():
    res = paired_t_test(paired_from_differences([1, 2, 3]), alternative="greater")
    # t = sum(D) / sqrt((n sum(D^2) - sum(D)^2) / (n - 1)) = 6 / sqrt((3*14 - 36)/2)
    assert res.statistic == pytest.approx(6 / math.sqrt(3), abs=1e-12)
    assert res.statistic == pytest.approx(3.4641, abs=1e-3)
    assert res.params["df"] == 2
    assert res.p_value == pytest.approx(0.0371, abs=5e-4)


def test_paired_t_symmetric_differences():
    res = paired_t_test(paired_from_differences([1, -1]), alternative="two-sided")
    assert res.statistic == 0.0
    assert res.p_value == 1.0


def test_paired_t_zero_variance_and_small_n():
    with pytest.raises(NumericError):
        paired_t_test(paired_from_differences([2, 2, 2]))
    with pytest.raises(UsageError):
        paired_t_test(paired_from_differences([1]))


def test_paired_t_matches_scipy_ttest_rel():
    rng = np.random.default_rng(0)
    values = rng.standard_normal(48)
    s = PhaseSeries.regular(values, ABAB8, 6)
    on, off = values[s.intervention], values[~s.intervention]
    for alt in ("less", "greater", "two-sided"):
        ref = sps.ttest_rel(on, off, alternative=alt)
        res = paired_t_test(s, alternative=alt)
        assert res.statistic == pytest.approx(ref.statistic, rel=1e-12)
        assert res.p_value == pytest.approx(ref.pvalue, abs=1e-10)


def test_paired_t_truncates_unequal_phases_with_warning():
    values = np.random.default_rng(3).standard_normal(10)
    s = PhaseSeries(values, [False] * 3 + [True] * 3 + [False] * 3 + [True], 3, np.arange(10))
    with pytest.warns(UserWarning, match="truncated"):
        res = paired_t_test(s)
    assert res.params["n_pairs"] == 4
    assert res.notes


def test_paired_t_block_means_pairing():
    values = np.r_[np.zeros(6), np.ones(6) * 2, np.zeros(6), np.ones(6) * 3]
    s = PhaseSeries.regular(values, [False, True, False, True], 6)
    res = paired_t_test(s, pairing="block_means", alternative="greater")
    assert res.params["n_pairs"] == 2
    assert res.params["mean_difference"] == pytest.approx(2.5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=3, max_size=12))
def test_paired_t_two_sided_is_twice_smaller_tail(diffs):
    s = paired_from_differences(diffs)
    if np.std(diffs, ddof=1) < 1e-6:
        return
    less = paired_t_test(s, "less").p_value
    two = paired_t_test(s, "two-sided").p_value
    assert two == pytest.approx(min(1.0, 2 * min(less, 1 - less)), abs=1e-12)


def test_two_sample_t_matches_scipy():
    rng = np.random.default_rng(1)
    values = rng.standard_normal(45)
    s = PhaseSeries(values, np.r_[np.zeros(20, bool), np.ones(25, bool)], 1, np.arange(45))
    on, off = values[s.intervention], values[~s.intervention]
    for alt in ("less", "two-sided"):
        ref = sps.ttest_ind(on, off, alternative=alt)
        res = two_sample_t_test(s, alternative=alt)
        assert res.statistic == pytest.approx(ref.statistic, rel=1e-12)
        assert res.p_value == pytest.approx(ref.pvalue, abs=1e-10)


# --- series / result types -------------------------------------------------

def test_phase_series_validation():
    with pytest.raises(UsageError):
        PhaseSeries([1.0, 2.0], [True], 1, [0, 1])
    with pytest.raises(UsageError):
        PhaseSeries([1.0, 2.0], [True, True], 1, [1, 1])
    with pytest.raises(ValidationError):
        PhaseSeries([1.0, 2.0], [True, False], 2, [0, 1])


def test_test_result_bounds():
    with pytest.raises(NumericError):
        TestResult("x", 1.0, 1.5, "less")
    with pytest.raises(NumericError):
        TestResult("x", float("nan"), 0.5, "less")


# --- assignments -------------------------------------------------------------

def test_block_permutation_counts():
    assert len(enumerate_block_assignments(AssignmentScheme("block_permutation", 4))) == 6
    full = enumerate_assignments(TrialDesign(), AssignmentScheme("block_permutation", 8))
    assert full.shape == (70, 48)
    assert np.all(full.sum(axis=1) == 24)
    assert len({r.tobytes() for r in full}) == 70


def test_systematic_alternation_is_abab_and_baba():
    rows = enumerate_block_assignments(AssignmentScheme("systematic_alternation", 4))
    as_text = {"".join("B" if v else "A" for v in r) for r in rows}
    assert as_text == {"ABAB", "BABA"}


def test_restricted_alternation_is_filtered_block_permutation():
    rows = enumerate_block_assignments(AssignmentScheme("restricted_alternation", 8, max_run_length=2))
    brute = [
        c for c in itertools.product([False, True], repeat=8)
        if sum(c) == 4 and max(len(list(g)) for _, g in itertools.groupby(c)) <= 2
    ]
    assert {tuple(r) for r in rows} == set(brute)
    assert all(r.sum() == 4 for r in rows)


def test_odd_block_count_rejected():
    with pytest.raises(UsageError):
        AssignmentScheme("block_permutation", 5)
    with pytest.raises(UsageError):
        enumerate_assignments(TrialDesign(n_days=6, block_length_days=2), AssignmentScheme())
    with pytest.raises(ConfigError):
        AssignmentScheme("coin_flip", 4)


# --- exact randomization --------------------------------------------------------

def test_scrt_hand_enumerated_toy():
    s = toy_b4()
    scheme = AssignmentScheme("block_permutation", 4)
    res = scrt_exact(s, scheme, "less")
    assert res.statistic == pytest.approx(-3.0)
    assert res.p_value == 1 / 6
    assert scrt_exact(s, scheme, "two-sided").p_value == 2 / 6
    assert scrt_exact(s, scheme, "greater").p_value == 1.0


def test_scrt_constant_values_give_one():
    s = PhaseSeries.regular(np.full(48, 0.1), ABAB8, 6)
    for alt in ("less", "greater", "two-sided"):
        assert scrt_exact(s, AssignmentScheme(), alt).p_value == 1.0


def test_scrt_rejects_assignment_outside_support():
    s = PhaseSeries.regular(np.arange(4.0), [True, True, False, False], 1)
    with pytest.raises(ValidationError):
        scrt_exact(s, AssignmentScheme("systematic_alternation", 4))


def test_scrt_handles_missing_observations():
    rng = np.random.default_rng(2)
    full = PhaseSeries.regular(rng.standard_normal(48), ABAB8, 6)
    keep = np.ones(48, bool)
    keep[[3, 10, 11, 40]] = False
    s = PhaseSeries(full.values[keep], full.intervention[keep], 6, full.timestamps[keep])
    res = scrt_exact(s, AssignmentScheme())
    # brute force: recompute every assignment's statistic by hand
    blocks = s.timestamps // 6
    stats = []
    for on in itertools.combinations(range(8), 4):
        lab = np.isin(blocks, on)
        stats.append(s.values[lab].mean() - s.values[~lab].mean())
    s_obs = s.values[s.intervention].mean() - s.values[~s.intervention].mean()
    assert res.statistic == pytest.approx(s_obs, abs=1e-12)
    assert res.p_value == np.mean(np.asarray(stats) <= s_obs + 1e-12)


def test_scrt_flip_identity_on_b4_toy():
    s = toy_b4()
    flipped = PhaseSeries(-s.values, s.intervention, s.block_length, s.timestamps)
    scheme = AssignmentScheme("block_permutation", 4)
    p = scrt_exact(s, scheme, "less").p_value
    tie_mass = 1 / 6  # only the observed assignment attains s*
    assert scrt_exact(flipped, scheme, "less").p_value == pytest.approx(1 - p + tie_mass)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=16, max_size=16),
    st.floats(-1e4, 1e4), st.floats(1e-3, 1e3),
)
def test_scrt_shift_and_scale_invariance(values, shift, scale):
    base = PhaseSeries.regular(values, ABAB8, 2)
    scheme = AssignmentScheme()
    p = scrt_exact(base, scheme, "less").p_value
    shifted = PhaseSeries.regular(np.asarray(values) + shift, ABAB8, 2)
    scaled = PhaseSeries.regular(np.asarray(values) * scale, ABAB8, 2)
    assert 0 < p <= 1
    assert scrt_exact(scaled, scheme, "less").p_value == p
    # shifting only perturbs ties at the rounding level
    assert abs(scrt_exact(shifted, scheme, "less").p_value - p) <= 1 / 70 + 1e-12 or p == 1.0


# --- Monte Carlo randomization ----------------------------------------------------

def _effect_series(seed, effect=-0.5):
    rng = np.random.default_rng(seed)
    s = PhaseSeries.regular(rng.standard_normal(48), ABAB8, 6)
    return PhaseSeries(s.values + effect * s.intervention, s.intervention, 6, s.timestamps)


def test_mc_floor_when_nothing_is_as_extreme():
    s = PhaseSeries.regular(np.tile(np.r_[np.zeros(6), np.full(6, -100.0)], 4), ABAB8, 6)
    res = randomization_test_mc(s, AssignmentScheme(), "less", M=500, seed=1, support="observations")
    assert res.params["n_extreme"] == 0
    assert res.p_value == 1 / 501


def test_mc_constant_values_give_one():
    s = PhaseSeries.regular(np.full(48, 3.3), ABAB8, 6)
    assert randomization_test_mc(s, AssignmentScheme(), "less", M=200, seed=0).p_value == 1.0


def test_mc_is_seed_reproducible():
    s = _effect_series(3)
    a = randomization_test_mc(s, AssignmentScheme(), M=1000, seed=9)
    b = randomization_test_mc(s, AssignmentScheme(), M=1000, seed=9)
    assert a == b


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mc_close_to_exact(seed):
    s = _effect_series(seed, effect=-0.3)
    scheme = AssignmentScheme()
    p = scrt_exact(s, scheme, "less").p_value
    M = 10_000
    p_hat = randomization_test_mc(s, scheme, "less", M=M, seed=seed).p_value
    assert abs(p_hat - p) <= 3 * math.sqrt(p * (1 - p) / M) + 1 / (M + 1)


def test_mc_restricted_sampling_stays_in_support():
    scheme = AssignmentScheme("restricted_alternation", 8, 2)
    s = _effect_series(4)
    res = randomization_test_mc(s, scheme, "two-sided", M=2000, seed=0)
    exact = scrt_exact(s, scheme, "two-sided").p_value
    assert abs(res.p_value - exact) < 0.05


def test_mc_p_never_zero():
    s = _effect_series(5, effect=-10)
    res = randomization_test_mc(s, AssignmentScheme(), "less", M=50, seed=0, support="observations")
    assert res.p_value > 0


# --- linear model with AR(1) errors --------------------------------------------

def _ols(y, X):
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    resid = y - X @ beta
    sigma2 = resid @ resid / (len(y) - X.shape[1])
    se = np.sqrt(np.diag(sigma2 * np.linalg.inv(X.T @ X)))
    return beta, se


def _ar1_noise(rng, n, rho):
    e = np.empty(n)
    e[0] = rng.standard_normal() / math.sqrt(1 - rho**2)
    for t in range(1, n):
        e[t] = rho * e[t - 1] + rng.standard_normal()
    return e


def test_rho_zero_reproduces_ols():
    rng = np.random.default_rng(0)
    s = PhaseSeries.regular(rng.standard_normal(48) + 0.3 * np.repeat(ABAB8, 6), ABAB8, 6)
    cov = rng.standard_normal((48, 2))
    res = lm_ar1(s, covariates=cov, rho=0.0)
    X = np.column_stack([np.ones(48), s.intervention, cov])
    beta, se = _ols(s.values, X)
    np.testing.assert_allclose(res.params["coefficients"], beta, atol=1e-8, rtol=0)
    np.testing.assert_allclose(res.params["standard_errors"], se, atol=1e-8, rtol=0)
    t = beta[1] / se[1]
    assert res.p_value == pytest.approx(2 * sps.t.sf(abs(t), 44), abs=1e-10)


def test_rho_recovered_under_ar1():
    rhos = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        lab = np.repeat([False, True] * 10, 10)
        s = PhaseSeries(_ar1_noise(rng, 200, 0.5), lab, 10, np.arange(200))
        rhos.append(lm_ar1(s).params["rho"])
    assert abs(np.mean(rhos) - 0.5) <= 0.1


def test_null_rho_small_and_p_uniform():
    rhos, ps = [], []
    lab = np.repeat([False, True] * 10, 10)
    for seed in range(200):
        y = np.random.default_rng(1000 + seed).standard_normal(200)
        res = lm_ar1(PhaseSeries(y, lab, 10, np.arange(200)))
        rhos.append(res.params["rho"])
        ps.append(res.p_value)
    assert np.mean(np.abs(rhos) <= 0.15) >= 0.95
    assert sps.kstest(ps, "uniform").pvalue > 0.01


def test_profiled_p_matches_ols_p_under_null():
    lab = np.repeat([False, True] * 50, 2)
    gaps = []
    for seed in range(100):
        y = np.random.default_rng(2000 + seed).standard_normal(200)
        s = PhaseSeries(y, lab, 2, np.arange(200))
        gaps.append(lm_ar1(s).p_value - lm_ar1(s, rho=0.0).p_value)
    assert np.mean(np.abs(gaps)) <= 0.005


def test_lm_ar1_errors():
    with pytest.raises(UsageError):
        lm_ar1(PhaseSeries.regular([1.0, 2.0, 3.0], [False, True, False], 1))
    with pytest.raises(NumericError):
        lm_ar1(PhaseSeries.regular(np.arange(6.0), [True, True], 3))
    with pytest.raises(ConfigError):
        lm_ar1(toy_b4(), method="OLS")


def test_lm_ar1_ml_variant_runs():
    s = _effect_series(7)
    reml = lm_ar1(s)
    ml = lm_ar1(s, method="ML")
    assert ml.params["method"] == "ML"
    assert abs(ml.params["beta1"] - reml.params["beta1"]) < 0.2
