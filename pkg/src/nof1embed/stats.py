"""Treatment-effect tests for a single participant's phase-labelled series.

Conventions
-----------
``intervention`` is True for treatment (B) observations.  Every statistic is
oriented as treatment minus control, so ``alternative="less"`` is the
hypothesis that treatment lowers the outcome.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .dataio import TrialDesign
from .errors import ConfigError, NumericError, UsageError, ValidationError
from .tdist import t_cdf, t_sf

ALTERNATIVES = ("less", "greater", "two-sided")
SCHEMES = ("block_permutation", "restricted_alternation", "systematic_alternation")
RHO_BOUND = 0.999


@dataclass
class PhaseSeries:
    values: np.ndarray
    intervention: np.ndarray
    block_length: int
    timestamps: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.intervention = np.asarray(self.intervention, dtype=bool)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n = len(self.values)
        if self.values.ndim != 1 or len(self.intervention) != n or len(self.timestamps) != n:
            raise UsageError("values, intervention and timestamps must be 1-D and equally long")
        if self.block_length < 1:
            raise UsageError(f"block_length must be positive, got {self.block_length}")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise UsageError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("series contains non-finite values")
        blocks = self.block_ids
        for b in np.unique(blocks):
            if len(set(self.intervention[blocks == b])) > 1:
                raise ValidationError(f"intervention flag changes inside block {b}")

    @classmethod
    def regular(cls, values, block_labels: Sequence[bool], block_length: int) -> PhaseSeries:
        """Complete series: ``block_length`` consecutive observations per block label."""
        values = np.asarray(values, dtype=np.float64)
        labels = np.repeat(np.asarray(block_labels, dtype=bool), block_length)
        if len(labels) != len(values):
            raise UsageError(f"{len(values)} values do not fill {len(block_labels)} blocks of {block_length}")
        return cls(values, labels, block_length, np.arange(len(values)))

    @property
    def block_ids(self) -> np.ndarray:
        return self.timestamps // self.block_length

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class TestResult:
    test_name: str
    statistic: float
    p_value: float
    alternative: str
    params: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise NumericError(f"{self.test_name}: p-value {self.p_value} outside [0, 1]")
        if not math.isfinite(self.statistic):
            raise NumericError(f"{self.test_name}: statistic is not finite")

    def to_dict(self) -> dict:
        return {
            "test_name": self.test_name,
            "statistic": float(self.statistic),
            "p_value": float(self.p_value),
            "alternative": self.alternative,
            "params": self.params,
            "notes": list(self.notes),
        }


@dataclass(frozen=True)
class AssignmentScheme:
    kind: str = "block_permutation"
    block_count: int = 8
    max_run_length: int = 2

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ConfigError(f"unknown assignment scheme {self.kind!r}; choose from {SCHEMES}")
        if self.block_count < 2 or self.block_count % 2:
            raise UsageError(f"equal-count schemes need an even block count >= 2, got {self.block_count}")
        if self.max_run_length < 1:
            raise ConfigError("max_run_length must be >= 1")


def _check_alternative(alternative: str) -> None:
    if alternative not in ALTERNATIVES:
        raise ConfigError(f"alternative must be one of {ALTERNATIVES}, got {alternative!r}")


def _t_p_value(t: float, df: float, alternative: str) -> float:
    if alternative == "less":
        return t_cdf(t, df)
    if alternative == "greater":
        return t_sf(t, df)
    return min(1.0, 2.0 * t_sf(abs(t), df))


# ---------------------------------------------------------------------------
# t-tests

def _paired_differences(series: PhaseSeries, pairing: str) -> tuple[np.ndarray, list[str]]:
    notes = []
    if pairing == "chronological":
        on = series.values[series.intervention]
        off = series.values[~series.intervention]
    elif pairing == "block_means":
        blocks = series.block_ids
        on, off = [], []
        for b in np.unique(blocks):
            sel = blocks == b
            (on if series.intervention[sel][0] else off).append(series.values[sel].mean())
        on, off = np.asarray(on), np.asarray(off)
    else:
        raise ConfigError(f"pairing must be 'chronological' or 'block_means', got {pairing!r}")
    n = min(len(on), len(off))
    if len(on) != len(off):
        msg = f"unequal phase counts ({len(on)} treatment vs {len(off)} control); truncated to {n} pairs"
        warnings.warn(msg, stacklevel=3)
        notes.append(msg)
    return on[:n] - off[:n], notes


def paired_t_test(series: PhaseSeries, alternative: str = "two-sided", pairing: str = "chronological") -> TestResult:
    """Paired t-test on treatment-minus-control differences.

    The j-th treatment observation is paired with the j-th control
    observation in time order (``pairing="chronological"``), or the k-th
    treatment block mean with the k-th control block mean.
    """
    _check_alternative(alternative)
    d, notes = _paired_differences(series, pairing)
    n = len(d)
    if n < 2:
        raise UsageError(f"paired t-test needs at least 2 pairs, got {n}")
    # (n*sum(D^2) - sum(D)^2) / (n - 1) == n * var(D), computed in centred form
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise NumericError("paired t-test undefined: all differences are identical")
    t = float(d.sum() / math.sqrt(n * sd * sd))
    return TestResult(
        "paired_t", t, _t_p_value(t, n - 1, alternative), alternative,
        {"df": n - 1, "n_pairs": n, "pairing": pairing, "mean_difference": float(d.mean())}, notes,
    )


def two_sample_t_test(series: PhaseSeries, alternative: str = "two-sided") -> TestResult:
    """Pooled-variance two-sample t-test (treatment minus control)."""
    _check_alternative(alternative)
    on = series.values[series.intervention]
    off = series.values[~series.intervention]
    n1, n0 = len(on), len(off)
    if n1 < 1 or n0 < 1 or n1 + n0 < 3:
        raise UsageError("two-sample t-test needs observations in both phases and at least 3 in total")
    df = n1 + n0 - 2
    pooled = (np.sum((on - on.mean()) ** 2) + np.sum((off - off.mean()) ** 2)) / df
    if pooled == 0.0:
        raise NumericError("two-sample t-test undefined: zero pooled variance")
    t = float((on.mean() - off.mean()) / math.sqrt(pooled * (1 / n1 + 1 / n0)))
    return TestResult("two_sample_t", t, _t_p_value(t, df, alternative), alternative, {"df": df})


# ---------------------------------------------------------------------------
# linear model with AR(1) errors

def _ar1_whiten(a: np.ndarray, rho: float) -> np.ndarray:
    """Apply L with L C L' = I for the AR(1) correlation matrix C_ij = rho^|i-j|."""
    out = np.empty_like(a)
    out[0] = a[0]
    out[1:] = (a[1:] - rho * a[:-1]) / math.sqrt(1.0 - rho * rho)
    return out


@dataclass
class _GLSFit:
    rho: float
    beta: np.ndarray
    cov: np.ndarray
    sigma2: float
    objective: float


def _gls(y: np.ndarray, X: np.ndarray, rho: float, method: str) -> _GLSFit:
    n, p = X.shape
    yw, Xw = _ar1_whiten(y, rho), _ar1_whiten(X, rho)
    beta, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    resid = yw - Xw @ beta
    rss = float(resid @ resid)
    xtx = Xw.T @ Xw
    logdet_c = (n - 1) * math.log1p(-rho * rho)
    sign, logdet_xtx = np.linalg.slogdet(xtx)
    if sign <= 0:
        raise NumericError("design matrix is rank deficient after AR(1) whitening")
    rss = max(rss, 1e-300)
    if method == "REML":
        sigma2 = rss / (n - p)
        obj = 0.5 * ((n - p) * math.log(sigma2) + logdet_c + logdet_xtx)
    else:
        sigma2 = rss / n
        obj = 0.5 * (n * math.log(sigma2) + logdet_c)
    cov = sigma2 * np.linalg.inv(xtx)
    return _GLSFit(rho, beta, cov, sigma2, obj)


def lm_ar1(
    series: PhaseSeries,
    covariates: np.ndarray | None = None,
    alternative: str = "two-sided",
    method: str = "REML",
    rho: float | None = None,
) -> TestResult:
    """Wald test of the treatment coefficient in ``y = b0 + b1*I + (covariates) + AR(1) error``.

    The autocorrelation is profiled over (-0.999, 0.999) by maximising the
    restricted (or full, ``method="ML"``) likelihood; ``rho`` fixes it
    instead.  Observations are taken as consecutive in their stored order.
    """
    _check_alternative(alternative)
    if method not in ("REML", "ML"):
        raise ConfigError(f"method must be 'REML' or 'ML', got {method!r}")
    y = series.values
    n = len(y)
    if n < 4:
        raise UsageError(f"lm_ar1 needs at least 4 observations, got {n}")
    cols = [np.ones(n), series.intervention.astype(np.float64)]
    if covariates is not None:
        cov_arr = np.asarray(covariates, dtype=np.float64).reshape(n, -1)
        if not np.all(np.isfinite(cov_arr)):
            raise UsageError("covariates contain NaN/Inf")
        cols.extend(cov_arr.T)
    X = np.column_stack(cols)
    p = X.shape[1]
    if n <= p or np.linalg.matrix_rank(X) < p:
        raise NumericError(f"design matrix with {p} columns is rank deficient for {n} observations")

    notes = []
    converged = True
    if rho is None:
        res = minimize_scalar(
            lambda r: _gls(y, X, r, method).objective,
            bounds=(-RHO_BOUND, RHO_BOUND),
            method="bounded",
            options={"xatol": 1e-8},
        )
        if res.success and np.isfinite(res.fun):
            fit = _gls(y, X, float(res.x), method)
        else:
            converged = False
            msg = "AR(1) parameter search did not converge; falling back to rho = 0"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
            fit = _gls(y, X, 0.0, method)
    else:
        if not -1.0 < rho < 1.0:
            raise ConfigError(f"rho must lie in (-1, 1), got {rho}")
        fit = _gls(y, X, float(rho), method)

    beta1 = float(fit.beta[1])
    se = math.sqrt(float(fit.cov[1, 1]))
    if se == 0.0:
        raise NumericError("lm_ar1: zero standard error for the treatment coefficient")
    t = beta1 / se
    df = n - p
    return TestResult(
        "lm_ar1", t, _t_p_value(t, df, alternative), alternative,
        {
            "df": df, "beta1": beta1, "se": se, "rho": fit.rho, "sigma": math.sqrt(fit.sigma2),
            "method": method, "converged": converged, "n_covariates": p - 2,
            "coefficients": [float(b) for b in fit.beta],
            "standard_errors": [float(s) for s in np.sqrt(np.diag(fit.cov))],
        },
        notes,
    )


# ---------------------------------------------------------------------------
# assignment supports

def enumerate_block_assignments(scheme: AssignmentScheme) -> np.ndarray:
    """All admissible block labelings (True = treatment), shape (n_assignments, block_count)."""
    b = scheme.block_count
    if scheme.kind == "systematic_alternation":
        abab = np.arange(b) % 2 == 1
        return np.array([abab, ~abab])
    rows = []
    for on in itertools.combinations(range(b), b // 2):
        row = np.zeros(b, dtype=bool)
        row[list(on)] = True
        if scheme.kind == "restricted_alternation" and _longest_run(row) > scheme.max_run_length:
            continue
        rows.append(row)
    return np.array(rows, dtype=bool).reshape(-1, b)


def _longest_run(row: np.ndarray) -> int:
    best = run = 1
    for prev, cur in zip(row[:-1], row[1:]):
        run = run + 1 if cur == prev else 1
        best = max(best, run)
    return best


def enumerate_assignments(design: TrialDesign, scheme: AssignmentScheme) -> np.ndarray:
    """Observation-level intervention vectors for every admissible assignment.

    Returns a boolean array of shape (n_assignments, n_days * measurements_per_day).
    """
    if design.n_blocks % 2:
        raise UsageError(f"equal-count schemes need an even block count, design has {design.n_blocks}")
    if scheme.block_count != design.n_blocks:
        scheme = AssignmentScheme(scheme.kind, design.n_blocks, scheme.max_run_length)
    return np.repeat(enumerate_block_assignments(scheme), design.block_length, axis=1)


def _sample_block_assignments(scheme: AssignmentScheme, m: int, rng: np.random.Generator) -> np.ndarray:
    b = scheme.block_count
    if scheme.kind == "systematic_alternation":
        support = enumerate_block_assignments(scheme)
        return support[rng.integers(len(support), size=m)]
    base = np.arange(b) < b // 2
    out = np.empty((m, b), dtype=bool)
    filled = 0
    # uniform permutations of a balanced multiset are uniform over its arrangements;
    # rejection keeps that uniformity on the restricted support
    while filled < m:
        draw = rng.permuted(np.tile(base, (m - filled, 1)), axis=1)
        if scheme.kind == "restricted_alternation":
            keep = np.array([_longest_run(r) <= scheme.max_run_length for r in draw], dtype=bool)
            draw = draw[keep]
        out[filled : filled + len(draw)] = draw
        filled += len(draw)
    return out


# ---------------------------------------------------------------------------
# randomization tests

def _block_structure(series: PhaseSeries, scheme: AssignmentScheme) -> tuple[np.ndarray, np.ndarray]:
    """Map observations to block indices and read off the observed block labeling."""
    blocks = series.block_ids
    if blocks.min(initial=0) < 0 or blocks.max(initial=0) >= scheme.block_count:
        raise ValidationError(
            f"observations fall outside the {scheme.block_count}-block design (block ids {blocks.min()}..{blocks.max()})"
        )
    observed = np.zeros(scheme.block_count, dtype=bool)
    present = np.zeros(scheme.block_count, dtype=bool)
    observed[blocks] = series.intervention
    present[blocks] = True
    if not present.all():
        missing = np.flatnonzero(~present).tolist()
        raise ValidationError(f"blocks {missing} have no observations; the observed assignment is undetermined")
    return blocks, observed


def _mean_differences(values: np.ndarray, obs_assign: np.ndarray) -> np.ndarray:
    """Treatment-minus-control mean for each observation-level assignment row."""
    on = obs_assign.astype(np.float64)
    n_on = on.sum(axis=1)
    n_off = on.shape[1] - n_on
    if np.any(n_on == 0) or np.any(n_off == 0):
        raise UsageError("an assignment leaves one phase without observations")
    total = values.sum()
    s_on = on @ values
    return s_on / n_on - (total - s_on) / n_off


def _tie_tolerance(values: np.ndarray) -> float:
    return 1e-9 * float(np.max(np.abs(values))) if len(values) else 0.0


def _count_extreme(stats: np.ndarray, observed: float, alternative: str, tol: float) -> int:
    if alternative == "less":
        return int(np.sum(stats <= observed + tol))
    if alternative == "greater":
        return int(np.sum(stats >= observed - tol))
    return int(np.sum(np.abs(stats) >= abs(observed) - tol))


def _centred(series: PhaseSeries) -> np.ndarray:
    # the mean-difference statistic is shift invariant; centring keeps ties exact under shifts
    return series.values - series.values.mean()


def scrt_exact(series: PhaseSeries, scheme: AssignmentScheme, alternative: str = "less") -> TestResult:
    """Exact single-case randomization test on the phase mean difference.

    The p-value is the share of admissible block assignments whose
    statistic is at least as extreme as the observed one (observed included).
    """
    _check_alternative(alternative)
    blocks, observed = _block_structure(series, scheme)
    support = enumerate_block_assignments(scheme)
    if not np.any(np.all(support == observed, axis=1)):
        raise ValidationError(f"observed block assignment {observed.astype(int).tolist()} is not in the {scheme.kind} support")
    values = _centred(series)
    stats = _mean_differences(values, support[:, blocks])
    s_obs = float(_mean_differences(values, observed[blocks][None, :])[0])
    count = _count_extreme(stats, s_obs, alternative, _tie_tolerance(values))
    return TestResult(
        "scrt", s_obs, count / len(support), alternative,
        {"scheme": scheme.kind, "n_assignments": len(support), "n_extreme": count, "block_count": scheme.block_count},
    )


def randomization_test_mc(
    series: PhaseSeries,
    scheme: AssignmentScheme,
    alternative: str = "less",
    M: int = 10_000,
    seed: int = 0,
    support: str = "scheme",
) -> TestResult:
    """Monte Carlo randomization test with p = (1 + #extreme) / (M + 1).

    ``support="scheme"`` samples block assignments uniformly (with
    replacement) from the scheme; ``support="observations"`` permutes the
    observation-level labels, ignoring the block structure.
    """
    _check_alternative(alternative)
    if M < 1:
        raise UsageError(f"M must be >= 1, got {M}")
    rng = np.random.default_rng(seed)
    values = _centred(series)
    if support == "scheme":
        blocks, observed = _block_structure(series, scheme)
        draws = _sample_block_assignments(scheme, M, rng)[:, blocks]
    elif support == "observations":
        draws = rng.permuted(np.tile(series.intervention, (M, 1)), axis=1)
    else:
        raise ConfigError(f"support must be 'scheme' or 'observations', got {support!r}")
    s_obs = float(_mean_differences(values, series.intervention[None, :])[0])
    stats = _mean_differences(values, draws)
    count = _count_extreme(stats, s_obs, alternative, _tie_tolerance(values))
    return TestResult(
        "mc_rt", s_obs, (1 + count) / (M + 1), alternative,
        {"scheme": scheme.kind if support == "scheme" else "observation_permutation", "M": M, "seed": seed,
         "n_extreme": count},
    )
