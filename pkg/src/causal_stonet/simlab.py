"""Synthetic benchmark generators and evaluation metrics.

Three generators: a high-dimensional correlated-covariate design with a
bounded nonlinear propensity, an autoregressive design with optional missing
values (completely observed, missing at random, or missing not at random),
and a small linear-Gaussian design for calibration studies.  Generators are
pure functions of their sizes, seed and scenario.

The first two designs resample candidate rows until the treatment and
control arms are balanced (sizes differ by at most one), so the covariate
law in a generated dataset is the balanced mixture of the two arms.  Frozen
Monte Carlo constants below were computed over exactly that law.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, ndtr
from scipy.stats import beta as beta_dist

from .data import Dataset, TrainValTest, Truth
from .errors import ConfigurationError, DataError

__all__ = [
    "MetricsReport",
    "gen_varying_size",
    "gen_ar2_missing",
    "gen_linear_gaussian",
    "ar2_precision",
    "ar2_draw_covariates",
    "mae_ate",
    "pehe",
    "fsr_nsr",
    "ci_coverage",
    "F_PRODUCT_MEAN",
    "F_PRODUCT_MEAN_SE",
    "AR2_TRUE_ATE",
    "AR2_TRUE_ATE_SE",
]

# E[f(x1) f(x2)] with f(x) = 2 / (1 + exp(-x + 0.5)) under the correlated
# covariate law below; Monte Carlo, 2e7 draws.
F_PRODUCT_MEAN = 0.7132552209112003
F_PRODUCT_MEAN_SE = 1.4e-4

# Mean conditional treatment effect of the autoregressive design under the
# balanced generator law; Monte Carlo over the generator, 1e6 rows
# (tools/freeze_constants.py).  The iid-law value is 3.1628, 0.002 away.
AR2_TRUE_ATE = 3.1611197408179583
AR2_TRUE_ATE_SE = 2.8e-3

_VARYING_P = 1000
_AR2_P = 100


def _truncated_normal(rng: np.random.Generator, shape, bound: float = 10.0) -> np.ndarray:
    """Standard normal conditioned on [-bound, bound], by rejection."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def _take_balanced(a_chunk: np.ndarray, need1: int, need0: int) -> np.ndarray:
    """Keep candidate rows in order until each arm's quota is filled."""
    is1 = a_chunk == 1.0
    c1 = np.cumsum(is1)
    c0 = np.cumsum(~is1)
    return (is1 & (c1 <= need1)) | (~is1 & (c0 <= need0))


def _balanced_collect(rng, n, draw_chunk, chunk_size):
    """Accumulate balanced rows from a vectorized candidate sampler.

    ``draw_chunk(rng, m)`` returns a tuple of aligned arrays whose second
    element is the treatment.  The treated arm receives the extra row when
    ``n`` is odd.
    """
    need1 = n - n // 2
    need0 = n // 2
    parts = None
    while need1 > 0 or need0 > 0:
        chunk = draw_chunk(rng, chunk_size)
        keep = _take_balanced(chunk[1], need1, need0)
        kept = [arr[keep] for arr in chunk]
        need1 -= int((kept[1] == 1.0).sum())
        need0 -= int((kept[1] == 0.0).sum())
        if parts is None:
            parts = [[arr] for arr in kept]
        else:
            for lst, arr in zip(parts, kept):
                lst.append(arr)
    return [np.concatenate(lst, axis=0) for lst in parts]


# ---------------------------------------------------------------------------
# high-dimensional correlated design
# ---------------------------------------------------------------------------


def _f_shift(x):
    return 2.0 * expit(x - 0.5)


def _varying_chunk(rng: np.random.Generator, m: int):
    e = _truncated_normal(rng, m)
    z = _truncated_normal(rng, (m, _VARYING_P))
    x = (e[:, None] + z) / np.sqrt(2.0)
    score = (ndtr(x[:, 0]) + ndtr(x[:, 2]) + ndtr(x[:, 4])) / 3.0
    ps = 0.25 * (1.0 + beta_dist.cdf(score, 2, 4))
    a = (rng.random(m) < ps).astype(np.float64)
    noise = rng.standard_normal(m)
    return x, a, ps, noise


def _varying_split(rng: np.random.Generator, n: int, tau: float, sigma: float) -> Dataset:
    x, a, ps, noise = _balanced_collect(rng, n, _varying_chunk, max(512, min(n, 4096)))
    eta = _f_shift(x[:, 0]) * _f_shift(x[:, 1]) - F_PRODUCT_MEAN
    c = 5.0 * x[:, 2] / (1.0 + x[:, 3] ** 2) + 2.0 * x[:, 4]
    y = c + tau * a + eta * a + sigma * noise
    truth = Truth(
        ate=tau,
        cate=tau + eta,
        propensity=ps,
        treatment_covariates=frozenset({0, 2, 4}),
        outcome_covariates=frozenset({0, 1, 2, 3, 4}),
    )
    return Dataset(x=x, a=a, y=y, truth=truth)


def gen_varying_size(n_train: int, n_val: int, n_test: int, seed: int) -> TrainValTest:
    """Correlated high-dimensional design (p = 1000).

    Covariates share a common factor (pairwise correlation 1/2); the true
    propensity is bounded in [0.25, 0.5]; the outcome is nonlinear in five
    covariates with a heterogeneous, mean-centered interaction riding on a
    homogeneous effect of 3.  Arms are balanced by resampling.
    """
    if min(n_train, n_val, n_test) < 1:
        raise DataError("split sizes must be positive")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), 0xA71))))
    return TrainValTest(
        train=_varying_split(rng, n_train, tau=3.0, sigma=0.25),
        val=_varying_split(rng, n_val, tau=3.0, sigma=0.25),
        test=_varying_split(rng, n_test, tau=3.0, sigma=0.25),
    )


# ---------------------------------------------------------------------------
# autoregressive design with missing values
# ---------------------------------------------------------------------------


def ar2_precision(p: int = _AR2_P) -> np.ndarray:
    """Banded concentration matrix: 1 on the diagonal, 0.5 and 0.25 off it."""
    c = np.eye(p)
    idx = np.arange(p - 1)
    c[idx, idx + 1] = c[idx + 1, idx] = 0.5
    idx = np.arange(p - 2)
    c[idx, idx + 2] = c[idx + 2, idx] = 0.25
    return c


_AR2_CHOL = np.linalg.cholesky(ar2_precision())


def ar2_draw_covariates(rng: np.random.Generator, m: int) -> np.ndarray:
    """IID draws from the zero-mean Gaussian with the banded concentration."""
    z = rng.standard_normal((m, _AR2_P))
    # X = L^{-T} Z  gives  Cov(X) = (L L^T)^{-1}
    return solve_triangular(_AR2_CHOL, z.T, lower=True, trans="T").T


def _ar2_outcome_mean(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    inner23 = np.tanh(2.0 * x[:, 1] - 2.0 * x[:, 2])
    g = np.tanh(-2.0 * np.tanh(2.0 * x[:, 0] + x[:, 3]) + inner23)
    h = np.tanh(inner23 - 2.0 * np.tanh(-2.0 * x[:, 3] + x[:, 4]))
    return -4.0 * np.tanh(g - 2.0 * a) + 2.0 * np.tanh(-a + 2.0 * h)


def _ar2_cate(x: np.ndarray) -> np.ndarray:
    ones = np.ones(x.shape[0])
    return _ar2_outcome_mean(x, ones) - _ar2_outcome_mean(x, np.zeros_like(ones))


def _ar2_propensity(x: np.ndarray) -> np.ndarray:
    s = np.tanh(-x[:, 0] - 2.0 * x[:, 4]) - np.tanh(2.0 * x[:, 1] - 2.0 * x[:, 2])
    return expit(s)


def _ar2_chunk(rng: np.random.Generator, m: int):
    x = ar2_draw_covariates(rng, m)
    ps = _ar2_propensity(x)
    a = (rng.random(m) < ps).astype(np.float64)
    noise = rng.standard_normal(m)
    return x, a, ps, noise


def _ar2_split(rng: np.random.Generator, n: int) -> Dataset:
    x, a, ps, noise = _balanced_collect(rng, n, _ar2_chunk, max(512, min(n, 8192)))
    y = _ar2_outcome_mean(x, a) + noise
    truth = Truth(
        ate=AR2_TRUE_ATE,
        cate=_ar2_cate(x),
        propensity=ps,
        treatment_covariates=frozenset({0, 1, 2, 4}),
        outcome_covariates=frozenset({0, 1, 2, 3, 4}),
    )
    return Dataset(x=x, a=a, y=y, truth=truth)


def _mnar_logits(x: np.ndarray, a: np.ndarray):
    odd = x[:, 0::2]  # x1, x3, ..., x99 (1-based)
    even = x[:, 1::2]  # x2, x4, ..., x100
    j = np.arange(1, 51, dtype=np.float64)
    s1 = 4.0 - 2.0 * a + odd @ np.power(-0.1, j - 1.0)
    s4 = 4.0 - 2.0 * a + even @ np.power(-0.1, j)
    return s1, s4


def gen_ar2_missing(
    n_train: int, n_val: int, n_test: int, seed: int, scenario: str = "complete"
) -> TrainValTest:
    """Autoregressive design (p = 100) with optional missingness.

    Covariates follow the zero-mean Gaussian with the banded concentration
    matrix of :func:`ar2_precision`; the treatment depends on x1, x2, x3, x5
    and the outcome on x1..x5, with arms balanced by resampling.  Missing
    values appear in the training split only: ``mar`` deletes exactly 10% of
    x1 and x4 uniformly at random, ``mnar`` deletes them with
    treatment-and-covariate-dependent probabilities (roughly 10%).
    """
    if min(n_train, n_val, n_test) < 1:
        raise DataError("split sizes must be positive")
    if scenario not in ("complete", "mar", "mnar"):
        raise DataError(f"unknown scenario {scenario!r}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), 0xA72))))
    train = _ar2_split(rng, n_train)
    val = _ar2_split(rng, n_val)
    test = _ar2_split(rng, n_test)

    if scenario == "mar":
        k = int(np.floor(0.1 * n_train))
        observed = np.ones((n_train, _AR2_P), dtype=bool)
        for col in (0, 3):
            gone = rng.choice(n_train, size=k, replace=False)
            observed[gone, col] = False
        train.observed = observed
    elif scenario == "mnar":
        s1, s4 = _mnar_logits(train.x, train.a)
        observed = np.ones((n_train, _AR2_P), dtype=bool)
        observed[:, 0] = rng.random(n_train) < expit(s1)
        observed[:, 3] = rng.random(n_train) < expit(s4)
        train.observed = observed
    return TrainValTest(train=train, val=val, test=test)


# ---------------------------------------------------------------------------
# linear-Gaussian calibration design
# ---------------------------------------------------------------------------


def gen_linear_gaussian(
    n: int,
    p: int,
    seed: int,
    tau: float = 1.0,
    beta_a: Optional[np.ndarray] = None,
    beta_y: Optional[np.ndarray] = None,
) -> Dataset:
    """Independent Gaussian covariates, logistic propensity, linear outcome.

    A homogeneous-effect design with every truth field populated, used to
    calibrate confidence-interval coverage and the double-robustness
    identities.  Rows are iid (no balancing), so the influence-function
    variance applies exactly as derived.
    """
    if n < 1 or p < 1:
        raise DataError("n and p must be positive")
    if beta_a is None:
        beta_a = np.zeros(p)
        if p >= 2:
            beta_a[0], beta_a[1] = 0.5, -0.5
    if beta_y is None:
        beta_y = np.zeros(p)
        beta_y[0] = 1.0
        if p >= 3:
            beta_y[2] = 1.0
        if p >= 5:
            beta_y[4] = 0.5
    beta_a = np.asarray(beta_a, dtype=np.float64)
    beta_y = np.asarray(beta_y, dtype=np.float64)
    if beta_a.shape != (p,) or beta_y.shape != (p,):
        raise DataError("coefficient vectors must have length p")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), 0xA70))))
    x = rng.standard_normal((n, p))
    ps = expit(x @ beta_a)
    a = (rng.random(n) < ps).astype(np.float64)
    y = x @ beta_y + tau * a + rng.standard_normal(n)
    truth = Truth(
        ate=tau,
        cate=np.full(n, tau),
        propensity=ps,
        treatment_covariates=frozenset(np.nonzero(beta_a)[0].tolist()),
        outcome_covariates=frozenset(np.nonzero(beta_y)[0].tolist()),
    )
    return Dataset(x=x, a=a, y=y, truth=truth)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Evaluation metrics; any field may be absent."""

    mae_ate: Optional[float] = None
    pehe: Optional[float] = None
    fsr_treatment: Optional[float] = None
    nsr_treatment: Optional[float] = None
    fsr_outcome: Optional[float] = None
    nsr_outcome: Optional[float] = None
    ci_coverage: Optional[float] = None

    def __post_init__(self):
        for name in ("fsr_treatment", "nsr_treatment", "fsr_outcome", "nsr_outcome", "ci_coverage"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise DataError(f"{name} must lie in [0, 1]")
        for name in ("mae_ate", "pehe"):
            v = getattr(self, name)
            if v is not None and v < 0.0:
                raise DataError(f"{name} must be nonnegative")


def mae_ate(estimates, truth: float) -> float:
    """Mean absolute error of ATE estimates against the true value."""
    est = np.atleast_1d(np.asarray(estimates, dtype=np.float64))
    return float(np.abs(est - truth).mean())


def pehe(cate_hat, cate_true) -> float:
    """Root mean squared error of per-sample treatment-effect estimates."""
    hat = np.asarray(cate_hat, dtype=np.float64)
    true = np.asarray(cate_true, dtype=np.float64)
    if hat.shape != true.shape:
        raise DataError("effect estimate and truth lengths differ")
    return float(np.sqrt(((hat - true) ** 2).mean()))


def fsr_nsr(selected, truth) -> tuple[float, float]:
    """False and negative selection rates aggregated across datasets.

    ``FSR = sum |S_hat_i \\ S| / sum |S_hat_i|`` (0 when nothing selected),
    ``NSR = sum |S \\ S_hat_i| / (m * |S|)`` (0 when the truth is empty).
    """
    truth = set(truth)
    sel = [set(s) for s in selected]
    if not sel:
        raise DataError("need at least one selection set")
    n_selected = sum(len(s) for s in sel)
    false_hits = sum(len(s - truth) for s in sel)
    missed = sum(len(truth - s) for s in sel)
    fsr = false_hits / n_selected if n_selected else 0.0
    nsr = missed / (len(sel) * len(truth)) if truth else 0.0
    return float(fsr), float(nsr)


def ci_coverage(intervals, truth: float) -> float:
    """Fraction of (closed) intervals containing the true value."""
    arr = np.atleast_2d(np.asarray(intervals, dtype=np.float64))
    if arr.shape[1] != 2:
        raise DataError("intervals must be (lower, upper) pairs")
    return float(((arr[:, 0] <= truth) & (truth <= arr[:, 1])).mean())
