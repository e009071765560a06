"""Causal quantities computed from a fitted model.

Propensity scores come from the treatment unit's pre-activation, potential
outcomes from the forward pass with the treatment clamped to either arm, and
the average treatment effect from the augmented inverse-probability-weighted
(doubly robust) combination of the two.  The variance estimator and normal
confidence interval follow the influence-function asymptotics.  Covariate
selection reads unmasked paths off the sparsity mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, ndtri

from .data import Dataset
from .errors import ConfigurationError, DataError
from .network import dnn_forward
from .training import FittedModel, TailSnapshot

__all__ = [
    "AteEstimate",
    "SelectionReport",
    "propensity",
    "outcome",
    "cate",
    "aipw_ate",
    "variance_estimate",
    "confidence_interval",
    "selected_covariates",
    "estimate_ate",
    "format_estimate_report",
    "parse_estimate_report",
]

DEFAULT_CLIP = 0.01


@dataclass
class AteEstimate:
    """Average-treatment-effect estimate with inference pieces.

    ``ci`` is ``tau_hat +/- z_{1-alpha/2} * sqrt(v_hat / n)``; ``influence``
    holds the per-sample doubly robust contributions whose mean is
    ``tau_hat``.  ``diagnostics`` carries the scalar arm fractions and the
    number of trajectory iterates averaged (1 for a single completion).
    """

    tau_hat: float
    v_hat: float
    n: int
    alpha: float
    ci: tuple[float, float]
    clip: float
    influence: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass
class SelectionReport:
    """0-based covariate index sets read off the sparsity mask."""

    treatment_model_covariates: tuple[int, ...]
    outcome_model_covariates: tuple[int, ...]


def _clip_propensity(p: np.ndarray, clip: float) -> np.ndarray:
    if not 0.0 <= clip < 0.5:
        raise ConfigurationError("clip must lie in [0, 0.5)")
    return np.clip(p, clip, 1.0 - clip)


def propensity(fitted: FittedModel, x: np.ndarray, clip: float = DEFAULT_CLIP) -> np.ndarray:
    """Estimated treatment probability, clipped to ``[clip, 1 - clip]``."""
    if not fitted.config.has_treatment:
        raise ConfigurationError("model has no treatment unit")
    single = np.asarray(x).ndim == 1
    fwd = dnn_forward(fitted.config, fitted.params, x, np.zeros(1 if single else len(x)), fitted.mask)
    logit = np.atleast_1d(fwd.propensity_logit)
    p = _clip_propensity(expit(logit), clip)
    return float(p[0]) if single else p


def outcome(fitted: FittedModel, x: np.ndarray, a) -> np.ndarray:
    """Predicted outcome with the treatment clamped to ``a``.

    Returns the predicted probability for a binary outcome, the regression
    value otherwise; both treatment arms are available for any ``x``.
    """
    fwd = dnn_forward(fitted.config, fitted.params, x, a, fitted.mask)
    out = fwd.output
    if fitted.config.output_kind == "binary-logistic":
        out = expit(out)
    return out


def cate(fitted: FittedModel, x: np.ndarray) -> np.ndarray:
    """Conditional treatment effect ``mu(x, 1) - mu(x, 0)``."""
    x_arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ones = np.ones(x_arr.shape[0])
    diff = outcome(fitted, x_arr, ones) - outcome(fitted, x_arr, np.zeros_like(ones))
    return float(diff[0]) if np.asarray(x).ndim == 1 else diff


def _influence(y, a, p, mu1, mu0):
    """Per-sample doubly robust contribution (the estimator's summand)."""
    return (
        a * y / p
        - (a - p) / p * mu1
        - (1.0 - a) * y / (1.0 - p)
        - (a - p) / (1.0 - p) * mu0
    )


def _nuisances(fitted: FittedModel, x: np.ndarray, clip: float):
    p = propensity(fitted, x, clip)
    mu1 = outcome(fitted, x, np.ones(x.shape[0]))
    mu0 = outcome(fitted, x, np.zeros(x.shape[0]))
    return np.atleast_1d(p), np.atleast_1d(mu1), np.atleast_1d(mu0)


def _resolve_completions(fitted, dataset, use_tail):
    """Covariate matrices to average the estimator over (one per iterate)."""
    if use_tail is None:
        use_tail = dataset.has_missing
    if not use_tail:
        if dataset.has_missing:
            raise DataError(
                "dataset has missing covariates; estimation needs the imputation trajectory"
            )
        return [dataset.x]
    if not fitted.tail:
        raise DataError("fitted model holds no trajectory tail to average over")
    if not dataset.has_missing:
        return [dataset.x]
    return [fitted.completed_x(dataset, snap) for snap in fitted.tail]


def aipw_ate(
    fitted: FittedModel,
    dataset: Dataset,
    clip: float = DEFAULT_CLIP,
    use_tail: Optional[bool] = None,
) -> AteEstimate:
    """Doubly robust ATE point estimate (no variance/interval yet).

    With missing covariates the estimator is averaged over the stored
    imputation trajectory; otherwise it is evaluated once on the observed
    data.  ``v_hat`` is filled by :func:`variance_estimate` /
    :func:`estimate_ate`.
    """
    if dataset.n == 0:
        raise DataError("empty dataset")
    completions = _resolve_completions(fitted, dataset, use_tail)
    infl = np.zeros(dataset.n)
    p1_frac = float((dataset.a == 1.0).mean())
    for x in completions:
        p, mu1, mu0 = _nuisances(fitted, x, clip)
        infl += _influence(dataset.y, dataset.a, p, mu1, mu0)
    infl /= len(completions)
    return AteEstimate(
        tau_hat=float(infl.mean()),
        v_hat=float("nan"),
        n=dataset.n,
        alpha=float("nan"),
        ci=(float("nan"), float("nan")),
        clip=clip,
        influence=infl,
        diagnostics={
            "p1_scalar": p1_frac,
            "p0_scalar": 1.0 - p1_frac,
            "tail_iterates": len(completions),
        },
    )


def variance_estimate(
    fitted: FittedModel,
    dataset: Dataset,
    clip: float = DEFAULT_CLIP,
    use_tail: Optional[bool] = None,
) -> float:
    """Influence-function variance estimate.

    First term: squared arm residuals weighted by the squared (clipped) model
    propensities.  Second term: squared centered contrast of the two outcome
    predictions, centered at their doubly robust means.  The scalar arm
    fractions are reported in diagnostics only; the formula uses the
    per-sample model propensities.
    """
    completions = _resolve_completions(fitted, dataset, use_tail)
    a, y = dataset.a, dataset.y
    total = 0.0
    for x in completions:
        p, mu1, mu0 = _nuisances(fitted, x, clip)
        mu1_bar = float((a * (y - mu1) / p + mu1).mean())
        mu0_bar = float(((1.0 - a) * (y - mu0) / (1.0 - p) + mu0).mean())
        term1 = float((a * (y - mu1) ** 2 / p**2 + (1.0 - a) * (y - mu0) ** 2 / (1.0 - p) ** 2).mean())
        term2 = float((((mu1 - mu1_bar) - (mu0 - mu0_bar)) ** 2).mean())
        total += term1 + term2
    return total / len(completions)


def confidence_interval(tau_hat: float, v_hat: float, n: int, alpha: float) -> tuple[float, float]:
    """Normal interval ``tau_hat +/- z_{1-alpha/2} sqrt(v_hat / n)``."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError("alpha must lie in (0, 1]")
    if v_hat < 0.0 or n < 1:
        raise ConfigurationError("need v_hat >= 0 and n >= 1")
    z = float(ndtri(1.0 - alpha / 2.0))
    half = z * np.sqrt(v_hat / n)
    return (tau_hat - half, tau_hat + half)


def _reach_from_inputs(mask_weights, start_layer_reach, layers):
    reach = start_layer_reach
    for w in layers:
        reach = (w @ reach) > 0
    return reach


def selected_covariates(fitted: FittedModel) -> SelectionReport:
    """Covariates with unmasked paths into the model.

    A covariate is in the treatment set when an unmasked directed path
    reaches the treatment unit's pre-activation, and in the outcome set when
    one reaches the output.  The clamped treatment unit carries no covariate
    signal itself, so direct outcome paths must bypass it; when the unit has
    an unmasked outgoing path to the output, every treatment-set covariate
    influences the outcome through the treatment and joins the outcome set.
    """
    config, mask = fitted.config, fitted.mask
    if not config.has_treatment:
        raise ConfigurationError("model has no treatment unit")
    t, pos = config.treatment_layer, config.treatment_position
    mw = [w.astype(bool) for w in mask.weights]

    # reach[u, j] is True when input j reaches unit u of the current layer
    r = mw[0]
    for i in range(1, t):
        r = (mw[i] @ r) > 0
    treatment_set = set(np.nonzero(r[pos])[0].tolist())

    # direct outcome paths: propagate to the output, zeroing the slot's reach
    # row at the treatment layer (its value is the clamped treatment, so no
    # covariate signal passes through it)
    r = mw[0]
    if t == 1:
        r = r.copy()
        r[pos, :] = False
    for i in range(1, config.n_layers):
        r = (mw[i] @ r) > 0
        if i + 1 == t:
            r[pos, :] = False
    outcome_set = set(np.nonzero(r.any(axis=0))[0].tolist())

    # does the treatment unit itself reach the output?
    unit = np.zeros(config.layer_widths[t], dtype=bool)
    unit[pos] = True
    for i in range(t, config.n_layers):
        unit = (mw[i] @ unit) > 0
    if unit.any():
        outcome_set |= treatment_set

    return SelectionReport(
        treatment_model_covariates=tuple(sorted(treatment_set)),
        outcome_model_covariates=tuple(sorted(outcome_set)),
    )


def estimate_ate(
    fitted: FittedModel,
    dataset: Dataset,
    clip: float = DEFAULT_CLIP,
    alpha: float = 0.05,
    use_tail: Optional[bool] = None,
) -> AteEstimate:
    """Point estimate, variance, and confidence interval in one call."""
    est = aipw_ate(fitted, dataset, clip, use_tail)
    v = variance_estimate(fitted, dataset, clip, use_tail)
    est.v_hat = v
    est.alpha = alpha
    est.ci = confidence_interval(est.tau_hat, v, est.n, alpha)
    return est


_REPORT_VERSION = "estimate-report v1"


def format_estimate_report(est: AteEstimate, selection: SelectionReport) -> str:
    """Stable-order structured text consumed by the CLI and tests."""
    q = np.quantile(est.influence, [0.0, 0.25, 0.5, 0.75, 1.0])
    names_t = ",".join(f"x{j + 1}" for j in _sorted_indices(selection.treatment_model_covariates))
    names_y = ",".join(f"x{j + 1}" for j in _sorted_indices(selection.outcome_model_covariates))
    lines = [
        _REPORT_VERSION,
        f"n = {est.n}",
        f"alpha = {est.alpha!r}",
        f"clip = {est.clip!r}",
        f"tau_hat = {est.tau_hat!r}",
        f"v_hat = {est.v_hat!r}",
        f"ci_lower = {est.ci[0]!r}",
        f"ci_upper = {est.ci[1]!r}",
        f"p1_scalar = {est.diagnostics.get('p1_scalar', float('nan'))!r}",
        f"p0_scalar = {est.diagnostics.get('p0_scalar', float('nan'))!r}",
        f"tail_iterates = {est.diagnostics.get('tail_iterates', 1)}",
        f"treatment_covariates = {names_t}",
        f"outcome_covariates = {names_y}",
        f"influence_mean = {float(est.influence.mean())!r}",
        f"influence_sd = {float(est.influence.std(ddof=1)) if est.n > 1 else 0.0!r}",
        f"influence_min = {float(q[0])!r}",
        f"influence_q25 = {float(q[1])!r}",
        f"influence_median = {float(q[2])!r}",
        f"influence_q75 = {float(q[3])!r}",
        f"influence_max = {float(q[4])!r}",
    ]
    return "\n".join(lines) + "\n"


def _sorted_indices(indices):
    return sorted(int(i) for i in indices)


def parse_estimate_report(text: str) -> dict:
    """Parse the report back into a dict (floats, ints, index tuples)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _REPORT_VERSION:
        raise DataError("not a recognized estimate report")
    out: dict = {}
    for ln in lines[1:]:
        key, _, val = ln.partition(" = ")
        val = val.strip()
        if key in ("treatment_covariates", "outcome_covariates"):
            if val:
                out[key] = tuple(int(tok[1:]) - 1 for tok in val.split(","))
            else:
                out[key] = ()
        elif key in ("n", "tail_iterates"):
            out[key] = int(val)
        else:
            out[key] = float(val)
    return out
