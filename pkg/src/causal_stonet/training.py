"""Adaptive stochastic-gradient HMC training loop.

Each iteration draws a mini-batch, imputes the batch's latent variables with
a few SGHMC sweeps (backward through the layers, clamped treatment slots
never move), then applies a Robbins-Monro update to the parameters using the
summed per-layer gradients plus the prior gradient scaled by the batch
fraction.  Training runs in three phases: pretrain (constant step sizes, no
pruning), train (decaying step sizes, pruning events), refine (smaller
decaying step sizes, updates projected onto the sparsity mask).  Multiple
independent runs can be trained and the best kept by BIC.

Missing covariates are treated as extra latent variables: a "layer 0" block
updates them with the gradient of the covariate model's log-density plus the
first layer's log-density.  Unlike the per-visit hidden-layer state, the
imputed covariate values and their momenta persist across epochs; with the
hidden layers re-initialized from the forward pass at every visit there is
no forward value to restart the covariates from, and a cold restart would
discard all accumulated evidence.

Determinism: all randomness derives from ``(seed, run, epoch, sample)``
counters, so batch order and any thread-level parallelism (used only across
independent runs) cannot change results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import ConfigurationError, DataError, NumericError
from .network import (
    LatentState,
    NetworkConfig,
    NetworkParameters,
    ParamGradients,
    SparsityMask,
    _activate_hidden,
    _activate_hidden_deriv,
    _effective,
    _log1pexp,
    complete_data_log_likelihood,
    dnn_forward,
    grad_params,
)
from .prior import PriorHyperparameters, build_mask, grad_log_prior, log_prior, sparsify_threshold

__all__ = [
    "TrainingSchedule",
    "CovariateModel",
    "FittedModel",
    "TailSnapshot",
    "lr_schedule",
    "backward_impute",
    "sa_update",
    "train",
    "bic_score",
    "posterior_average",
]

# entropy stream tags
_STREAM_INIT = 3
_STREAM_SHUFFLE = 2
_STREAM_NOISE = 1


def lr_schedule(
    k: int, base: float, form: str = "a8", exponent: float = 1.2, offset: float = 1.0
) -> float:
    """Decaying step size at (stage-local) epoch ``k``.

    ``a8``     : ``base / (1 + base * k**exponent)``
    ``lemma1`` : ``base / (offset + k**exponent)``

    Both are strictly decreasing in ``k``; the ``a8`` form returns ``base``
    at ``k = 0``.
    """
    if base <= 0.0:
        raise ConfigurationError("step-size base must be positive")
    if not 0.0 < exponent <= 2.0:
        raise ConfigurationError("decay exponent must lie in (0, 2]")
    if k < 0:
        raise ConfigurationError("epoch index must be nonnegative")
    if form == "a8":
        return base / (1.0 + base * float(k) ** exponent)
    if form == "lemma1":
        denom = offset + float(k) ** exponent
        if denom <= 0.0:
            raise ConfigurationError("lemma1 schedule needs offset + k**exponent > 0")
        return base / denom
    raise ConfigurationError(f"unknown schedule form {form!r}")


@dataclass(frozen=True)
class TrainingSchedule:
    """Epoch counts, step sizes and bookkeeping knobs for one training run.

    ``impute_lr`` has one entry per hidden layer; ``param_lr`` one entry per
    non-input layer.  ``param_lr_refine`` defaults to ``param_lr / 10``.
    ``prune_epochs`` are 1-based epochs inside the train phase; all but the
    last event just zero sub-threshold entries (a soft re-initialization),
    the last one freezes the mask used by the refine phase.  ``None`` means
    a single prune at the end of the train phase, ``()`` disables pruning.
    """

    epochs_pretrain: int
    epochs_train: int
    epochs_refine: int
    batch_size: int
    impute_lr: tuple[float, ...]
    param_lr: tuple[float, ...]
    param_lr_refine: Optional[tuple[float, ...]] = None
    miss_lr: Optional[float] = None
    t_mc: int = 1
    eta: float = 0.1
    impute_decay: float = 1.2
    param_decay: float = 1.2
    schedule_form: str = "a8"
    lemma1_offset: float = 1.0
    seed: int = 0
    num_runs: int = 1
    prune_epochs: Optional[tuple[int, ...]] = None
    grad_clip: Optional[float] = None
    tail_length: int = 30
    store_latent_tail: bool = False
    include_bias_prior: bool = True

    def __post_init__(self):
        object.__setattr__(self, "impute_lr", tuple(float(v) for v in self.impute_lr))
        object.__setattr__(self, "param_lr", tuple(float(v) for v in self.param_lr))
        if self.param_lr_refine is not None:
            object.__setattr__(
                self, "param_lr_refine", tuple(float(v) for v in self.param_lr_refine)
            )
        if self.prune_epochs is not None:
            object.__setattr__(self, "prune_epochs", tuple(int(e) for e in self.prune_epochs))
        if min(self.epochs_pretrain, self.epochs_train, self.epochs_refine) < 0:
            raise ConfigurationError("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.t_mc < 1:
            raise ConfigurationError("t_mc must be at least 1")
        if self.eta <= 0.0:
            raise ConfigurationError("friction eta must be positive")
        for name in ("impute_lr", "param_lr", "param_lr_refine"):
            vals = getattr(self, name)
            if vals is not None and any(v <= 0.0 for v in vals):
                raise ConfigurationError(f"{name} entries must be positive")
        if self.miss_lr is not None and self.miss_lr <= 0.0:
            raise ConfigurationError("miss_lr must be positive")
        for name in ("impute_decay", "param_decay"):
            v = getattr(self, name)
            if not 0.0 < v <= 2.0:
                raise ConfigurationError(f"{name} must lie in (0, 2]")
        if self.schedule_form not in ("a8", "lemma1"):
            raise ConfigurationError(f"unknown schedule form {self.schedule_form!r}")
        if self.num_runs < 1:
            raise ConfigurationError("num_runs must be at least 1")
        if self.tail_length < 0:
            raise ConfigurationError("tail_length must be nonnegative")
        if self.prune_epochs is not None and any(e < 1 for e in self.prune_epochs):
            raise ConfigurationError("prune epochs are 1-based and must be >= 1")

    def refine_lr(self) -> tuple[float, ...]:
        if self.param_lr_refine is not None:
            return self.param_lr_refine
        return tuple(0.1 * g for g in self.param_lr)


class CovariateModel:
    """Gaussian model of the covariates used for missing-value imputation.

    Parameterized by a mean vector and a precision (concentration) matrix;
    the precision must be symmetric positive definite.
    """

    def __init__(self, mean: np.ndarray, precision: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.precision = np.asarray(precision, dtype=np.float64)
        p = self.mean.shape[0]
        if self.precision.shape != (p, p):
            raise ConfigurationError("precision matrix shape does not match the mean")
        if not np.allclose(self.precision, self.precision.T, atol=1e-10):
            raise ConfigurationError("precision matrix must be symmetric")
        try:
            np.linalg.cholesky(self.precision)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError("precision matrix must be positive definite") from exc
        sign, logdet = np.linalg.slogdet(self.precision)
        self._log_norm = 0.5 * (logdet - p * np.log(2.0 * np.pi))

    @property
    def p(self) -> int:
        return self.mean.shape[0]

    def log_density(self, x: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(x) - self.mean
        quad = np.einsum("ij,jk,ik->i", d, self.precision, d)
        return self._log_norm - 0.5 * quad

    def grad_log_density(self, x: np.ndarray) -> np.ndarray:
        return -(np.atleast_2d(x) - self.mean) @ self.precision

    def conditional_mean(self, x: np.ndarray, observed: np.ndarray) -> np.ndarray:
        """Fill unobserved entries with their conditional expectation."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
        observed = np.atleast_2d(observed)
        patterns, inverse = np.unique(observed, axis=0, return_inverse=True)
        for pi, pattern in enumerate(patterns):
            if pattern.all():
                continue
            rows = np.nonzero(inverse == pi)[0]
            mis = np.nonzero(~pattern)[0]
            obs = np.nonzero(pattern)[0]
            c_mm = self.precision[np.ix_(mis, mis)]
            if obs.size == 0:
                x[np.ix_(rows, mis)] = self.mean[mis]
                continue
            c_mo = self.precision[np.ix_(mis, obs)]
            resid = x[np.ix_(rows, obs)] - self.mean[obs]
            adjust = np.linalg.solve(c_mm, c_mo @ resid.T).T
            x[np.ix_(rows, mis)] = self.mean[mis] - adjust
        return x

    @classmethod
    def fit_diagonal(cls, x: np.ndarray, observed: Optional[np.ndarray] = None) -> "CovariateModel":
        """Independent-coordinate Gaussian from observed entries."""
        x = np.asarray(x, dtype=np.float64)
        observed = np.ones(x.shape, dtype=bool) if observed is None else observed
        counts = observed.sum(axis=0)
        if (counts < 2).any():
            raise DataError("each covariate needs at least two observed values")
        masked = np.where(observed, x, 0.0)
        mean = masked.sum(axis=0) / counts
        var = (np.where(observed, (x - mean) ** 2, 0.0)).sum(axis=0) / (counts - 1)
        var = np.maximum(var, 1e-12)
        return cls(mean, np.diag(1.0 / var))

    @classmethod
    def fit_neighborhood(
        cls,
        x: np.ndarray,
        observed: Optional[np.ndarray] = None,
        bandwidth: int = 2,
        neighbors: Optional[Sequence[Sequence[int]]] = None,
    ) -> "CovariateModel":
        """Gaussian graphical model on a known neighborhood structure.

        Each node is regressed on its neighbors over the rows where all of
        them are observed; precision entries follow from the regression
        coefficients and residual variances, symmetrized and floored to stay
        positive definite.  Default neighborhood: band of width ``bandwidth``.
        """
        x = np.asarray(x, dtype=np.float64)
        p = x.shape[1]
        observed = np.ones(x.shape, dtype=bool) if observed is None else observed
        if neighbors is None:
            neighbors = [
                [k for k in range(max(0, j - bandwidth), min(p, j + bandwidth + 1)) if k != j]
                for j in range(p)
            ]
        counts = observed.sum(axis=0)
        masked = np.where(observed, x, 0.0)
        mean = masked.sum(axis=0) / np.maximum(counts, 1)
        prec = np.zeros((p, p))
        for j in range(p):
            nb = list(neighbors[j])
            rows = observed[:, j] & observed[:, nb].all(axis=1)
            if rows.sum() < len(nb) + 2:
                raise DataError(f"too few complete rows to fit the neighborhood of x{j + 1}")
            design = x[np.ix_(np.nonzero(rows)[0], nb)] - mean[nb]
            target = x[rows, j] - mean[j]
            beta, *_ = np.linalg.lstsq(design, target, rcond=None)
            resid = target - design @ beta
            res_var = max(float(resid @ resid) / max(rows.sum() - len(nb), 1), 1e-12)
            prec[j, j] += 1.0 / res_var
            for bk, k in zip(beta, nb):
                prec[j, k] += -bk / res_var
        prec = 0.5 * (prec + prec.T)
        # floor the spectrum so the fitted matrix is usable as a precision
        eigmin = float(np.linalg.eigvalsh(prec)[0])
        if eigmin < 1e-8:
            prec = prec + (1e-8 - eigmin) * np.eye(p)
        return cls(mean, prec)


def _output_delta(config: NetworkConfig, mean_out: np.ndarray, y_arr: np.ndarray) -> np.ndarray:
    var = config.noise_variances[-1]
    y2 = y_arr.reshape(mean_out.shape[0], -1)
    if config.output_kind == "binary-logistic":
        return (y2 - expit(mean_out)) / var
    return (y2 - mean_out) / var


def backward_impute(
    config: NetworkConfig,
    params: NetworkParameters,
    x: np.ndarray,
    a: np.ndarray,
    y: np.ndarray,
    *,
    impute_lr: Sequence[float],
    eta: float,
    t_mc: int = 1,
    mask: Optional[SparsityMask] = None,
    rng: Optional[np.random.Generator] = None,
    noise_hidden: Optional[Sequence[np.ndarray]] = None,
    noise_x: Optional[np.ndarray] = None,
    init: Optional[LatentState] = None,
    covariate_model: Optional[CovariateModel] = None,
    x_update_mask: Optional[np.ndarray] = None,
    miss_lr: Optional[float] = None,
    v_x: Optional[np.ndarray] = None,
    sample_ids: Optional[np.ndarray] = None,
    collect: bool = False,
):
    """Impute a batch's latent variables with ``t_mc`` SGHMC sweeps.

    Latents start at the zero-noise forward values and hidden momenta at 0
    (pass ``init`` to override).  Each sweep updates layers h..1 with

        ``v <- (1 - eps*eta) v + eps * grad + sqrt(2*eps*eta) * N(0, I)``
        ``Y <- Y + eps * v``

    where ``grad`` combines the layer's own log-density gradient and the
    next layer's, and the clamped treatment slot never moves.  When
    ``x_update_mask`` marks imputable covariate entries, an extra block
    updates them from the covariate model's gradient plus the first layer's;
    observed entries are never modified.  Noise can be supplied explicitly
    (``noise_hidden[i]`` shaped ``(t_mc, n, d_i)``; ``noise_x`` shaped
    ``(t_mc, n, p)``) for externally managed streams, otherwise ``rng`` is
    used.  Returns the final state (with ``v_x`` for persistence); with
    ``collect=True`` also a list of per-sweep snapshots.
    """
    h = config.n_hidden
    eps = [float(e) for e in impute_lr]
    if len(eps) != h:
        raise ConfigurationError(f"impute_lr needs {h} entries, one per hidden layer")
    if noise_hidden is None and rng is None and h > 0:
        raise ConfigurationError("supply either rng or explicit noise arrays")

    if init is None:
        state = LatentState.from_forward(config, params, x, a, mask, x_update_mask)
    else:
        state = init.copy()
    a_arr = np.atleast_1d(np.asarray(a, dtype=np.float64))
    y_arr = np.atleast_1d(np.asarray(y, dtype=np.float64))
    n = state.x.shape[0]

    weights, biases = _effective(params, mask)
    velocities = [np.zeros_like(hv) for hv in state.hidden]
    do_x = x_update_mask is not None
    if do_x:
        if miss_lr is None:
            raise ConfigurationError("miss_lr is required when imputing covariates")
        upd = np.asarray(x_update_mask, dtype=np.float64)
        vx = np.zeros_like(state.x) if v_x is None else v_x.copy()
    trajectory: list[LatentState] = []

    def draw(i: int, sweep: int) -> np.ndarray:
        if noise_hidden is not None:
            return noise_hidden[i - 1][sweep]
        return rng.standard_normal(state.hidden[i - 1].shape)

    t_layer, t_pos = config.treatment_layer, config.treatment_position
    sweep_inputs: list[Optional[np.ndarray]] = [None] * h
    for sweep in range(t_mc):
        final_sweep = sweep == t_mc - 1
        for i in range(h, 0, -1):
            cur = state.hidden[i - 1]
            var_i = config.noise_variances[i - 1]
            z_prev = state.x if i == 1 else _activate_hidden(config, i - 1, state.hidden[i - 2])
            if final_sweep:
                sweep_inputs[i - 1] = z_prev.copy() if i == 1 else z_prev
            mean_i = z_prev @ weights[i - 1].T + biases[i - 1]
            g = (mean_i - cur) / var_i
            if t_layer == i:
                g[:, t_pos] = 0.0

            z_i = _activate_hidden(config, i, cur)
            mean_next = z_i @ weights[i].T + biases[i]
            if i == h:
                delta_next = _output_delta(config, mean_next, y_arr)
            else:
                delta_next = (state.hidden[i] - mean_next) / config.noise_variances[i]
                if t_layer == i + 1:
                    delta_next[:, t_pos] = (a_arr - expit(mean_next[:, t_pos])) / (
                        config.treatment_temperature
                    )
            g += (delta_next @ weights[i]) * _activate_hidden_deriv(config, i, cur)

            e = eps[i - 1]
            v = velocities[i - 1]
            v *= 1.0 - e * eta
            v += e * g + np.sqrt(2.0 * e * eta) * draw(i, sweep)
            if t_layer == i:
                v[:, t_pos] = 0.0
            state.hidden[i - 1] = cur + e * v

        if do_x:
            var_1 = config.noise_variances[0]
            resid = state.hidden[0] - (state.x @ weights[0].T + biases[0])
            gx = (resid / var_1) @ weights[0]
            if covariate_model is not None:
                gx = gx + covariate_model.grad_log_density(state.x)
            gx *= upd
            nz = noise_x[sweep] if noise_x is not None else rng.standard_normal(state.x.shape)
            e = float(miss_lr)
            vx *= 1.0 - e * eta
            vx += e * gx + np.sqrt(2.0 * e * eta) * nz * upd
            state.x = state.x + e * vx
        if collect:
            trajectory.append(state.copy())

    for i, hv in enumerate(state.hidden):
        bad = ~np.isfinite(hv).all(axis=1)
        if bad.any():
            which = int(np.nonzero(bad)[0][0])
            label = int(sample_ids[which]) if sample_ids is not None else which
            raise NumericError(f"non-finite latent for sample {label} in layer {i + 1}")
    if do_x:
        bad = ~np.isfinite(state.x).all(axis=1)
        if bad.any():
            which = int(np.nonzero(bad)[0][0])
            label = int(sample_ids[which]) if sample_ids is not None else which
            raise NumericError(f"non-finite imputed covariates for sample {label}")
        state.v_x = vx
    state.momenta = velocities
    if h > 0:
        state.sweep_inputs = sweep_inputs
    if collect:
        return state, trajectory
    return state


def _param_gradients_conditioned(
    config: NetworkConfig,
    params: NetworkParameters,
    a: np.ndarray,
    y: np.ndarray,
    latents: LatentState,
    mask: Optional[SparsityMask],
):
    """Per-layer parameter gradients conditioned on the sampling inputs.

    Each hidden layer's density is evaluated against the input values its
    final imputation sweep conditioned on (``latents.sweep_inputs``); the
    output layer conditions on the final imputed values.  Evaluating against
    post-update neighbors instead would inject a weight-proportional
    feedback term into interior layers, which have no data anchor of their
    own, and the training loop then drifts into saturation.
    """
    weights, biases = _effective(params, mask)
    a_arr = np.atleast_1d(np.asarray(a, dtype=np.float64))
    y_arr = np.atleast_1d(np.asarray(y, dtype=np.float64))
    h = config.n_hidden
    z = list(latents.sweep_inputs) + [_activate_hidden(config, h, latents.hidden[h - 1])]
    gw, gb = [], []
    for i in range(1, config.n_layers + 1):
        mean = z[i - 1] @ weights[i - 1].T + biases[i - 1]
        if i == config.n_layers:
            delta = _output_delta(config, mean, y_arr)
        else:
            delta = (latents.hidden[i - 1] - mean) / config.noise_variances[i - 1]
            if config.treatment_layer == i:
                pos = config.treatment_position
                delta[:, pos] = (a_arr - expit(mean[:, pos])) / config.treatment_temperature
        dw = delta.T @ z[i - 1]
        db = delta.sum(axis=0)
        if mask is not None:
            dw = dw * mask.weights[i - 1]
            db = db * mask.biases[i - 1]
        gw.append(dw)
        gb.append(db)
    return ParamGradients(weights=gw, biases=gb)


def sa_update(
    config: NetworkConfig,
    params: NetworkParameters,
    hyper: PriorHyperparameters,
    x: np.ndarray,
    a: np.ndarray,
    y: np.ndarray,
    latents: LatentState,
    gamma: Sequence[float],
    n_total: int,
    mask: Optional[SparsityMask] = None,
    include_bias_prior: bool = True,
    grad_clip: Optional[float] = None,
) -> NetworkParameters:
    """One stochastic-approximation step on the parameters.

    ``theta_i += gamma_i * (sum_batch grad_i log-lik + (B/n) grad_i log-prior)``

    When the latent state carries its sampling inputs (set by
    :func:`backward_impute`), each hidden layer's gradient conditions on
    those values; otherwise all layers are evaluated at the given state.
    With a mask, the update is projected: masked entries remain exactly 0.
    """
    gamma = [float(g) for g in gamma]
    if len(gamma) != config.n_layers:
        raise ConfigurationError(f"gamma needs {config.n_layers} entries, one per layer")
    batch = np.atleast_2d(x).shape[0]
    if latents.sweep_inputs is not None:
        data_grad = _param_gradients_conditioned(config, params, a, y, latents, mask)
    else:
        data_grad = grad_params(config, params, x, a, y, latents, mask)
    prior_grad = grad_log_prior(params, hyper, include_bias_prior)
    scale = batch / float(n_total)

    new_w, new_b = [], []
    for i in range(config.n_layers):
        gw = data_grad.weights[i] + scale * prior_grad.weights[i]
        gb = data_grad.biases[i] + scale * prior_grad.biases[i]
        if grad_clip is not None:
            norm = np.sqrt(float((gw**2).sum() + (gb**2).sum()))
            if norm > grad_clip:
                shrink = grad_clip / norm
                gw = gw * shrink
                gb = gb * shrink
        w = params.weights[i] + gamma[i] * gw
        b = params.biases[i] + gamma[i] * gb
        if mask is not None:
            w = w * mask.weights[i]
            b = b * mask.biases[i]
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise NumericError(f"non-finite parameter after update in layer {i + 1}")
        new_w.append(w)
        new_b.append(b)
    return NetworkParameters(new_w, new_b)


@dataclass
class TailSnapshot:
    """End-of-epoch state kept for trajectory averaging."""

    epoch: int
    params: NetworkParameters
    x_missing: Optional[np.ndarray] = None
    latents: Optional[list[np.ndarray]] = None


@dataclass
class FittedModel:
    """Everything the estimators need from a finished training run."""

    config: NetworkConfig
    hyper: PriorHyperparameters
    schedule: TrainingSchedule
    params: NetworkParameters
    mask: SparsityMask
    diagnostics: dict
    tail: list[TailSnapshot]
    bic: float
    n_train: int
    run_index: int = 0
    missing_rows: Optional[np.ndarray] = None
    missing_cols: Optional[np.ndarray] = None
    final_x: Optional[np.ndarray] = None

    @property
    def has_imputation(self) -> bool:
        return self.missing_rows is not None and self.missing_rows.size > 0

    def completed_x(self, dataset: Dataset, snapshot: Optional[TailSnapshot] = None) -> np.ndarray:
        """Training covariates with missing entries filled in.

        ``dataset`` must be the training set in its original row order; pass
        a tail snapshot to use that iterate's imputations instead of the
        final ones.
        """
        if not dataset.has_missing:
            return dataset.x
        if not self.has_imputation:
            raise DataError("model holds no imputations for a dataset with missing values")
        if self.missing_rows.size and int(self.missing_rows.max()) >= dataset.n:
            raise DataError("dataset size does not match the training data")
        if snapshot is None and self.final_x is None:
            if not self.tail:
                raise DataError("no imputed values available (no final state, empty tail)")
            snapshot = self.tail[-1]
        x = dataset.x.copy()
        if snapshot is None:
            x[self.missing_rows, self.missing_cols] = self.final_x[
                self.missing_rows, self.missing_cols
            ]
        else:
            x[self.missing_rows, self.missing_cols] = snapshot.x_missing
        return x


def _epoch_step_sizes(schedule: TrainingSchedule, stage: str, k: int):
    """(impute, miss, param) step sizes for stage-local epoch ``k`` (1-based)."""
    form, off = schedule.schedule_form, schedule.lemma1_offset

    def dec(base, exponent, kk):
        return lr_schedule(kk, base, form, exponent, off)

    if stage == "pretrain":
        eps = schedule.impute_lr
        miss = schedule.miss_lr
        gam = schedule.param_lr
    else:
        eps = tuple(dec(b, schedule.impute_decay, k) for b in schedule.impute_lr)
        miss = None if schedule.miss_lr is None else dec(schedule.miss_lr, schedule.impute_decay, k)
        bases = schedule.param_lr if stage == "train" else schedule.refine_lr()
        gam = tuple(dec(b, schedule.param_decay, k) for b in bases)
    return eps, miss, gam


def _epoch_noise(config, schedule, run, epoch, n, need_x):
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence((schedule.seed, run, epoch, _STREAM_NOISE)))
    )
    hidden = [
        rng.standard_normal((n, schedule.t_mc, config.layer_widths[i + 1]))
        for i in range(config.n_hidden)
    ]
    nx = rng.standard_normal((n, schedule.t_mc, config.p)) if need_x else None
    return hidden, nx


@dataclass
class _RunResult:
    params: NetworkParameters
    mask: SparsityMask
    diagnostics: dict
    tail: list[TailSnapshot]
    bic: float
    final_x: Optional[np.ndarray]


def _prune_plan(schedule: TrainingSchedule):
    if schedule.prune_epochs is None:
        return (schedule.epochs_train,) if schedule.epochs_train >= 1 else ()
    if any(e > schedule.epochs_train for e in schedule.prune_epochs):
        raise ConfigurationError("prune epochs must fall inside the train phase")
    return tuple(sorted(schedule.prune_epochs))


def _train_single_run(
    dataset: Dataset,
    config: NetworkConfig,
    hyper: PriorHyperparameters,
    schedule: TrainingSchedule,
    covariate_model: Optional[CovariateModel],
    run: int,
) -> _RunResult:
    n = dataset.n
    init_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence((schedule.seed, run, 0, _STREAM_INIT)))
    )
    params = NetworkParameters.random(config, init_rng)
    mask_obj: Optional[SparsityMask] = None

    missing = dataset.has_missing
    if missing:
        x_state = covariate_model.conditional_mean(dataset.x, dataset.observed)
        upd_mask = ~dataset.observed
        v_x = np.zeros_like(x_state)
    else:
        x_state = dataset.x.copy()
        upd_mask = None
        v_x = None

    latent_store = [np.zeros((n, config.layer_widths[i + 1])) for i in range(config.n_hidden)]
    prunes = _prune_plan(schedule)
    final_prune = prunes[-1] if prunes else None
    total_epochs = schedule.epochs_pretrain + schedule.epochs_train + schedule.epochs_refine
    tail_start = total_epochs - min(schedule.tail_length, total_epochs)

    diag_stage: list[str] = []
    diag_ll: list[float] = []
    diag_lp: list[float] = []
    tail: list[TailSnapshot] = []
    miss_rows, miss_cols = (np.nonzero(~dataset.observed)) if missing else (None, None)

    stages = (
        ("pretrain", schedule.epochs_pretrain),
        ("train", schedule.epochs_train),
        ("refine", schedule.epochs_refine),
    )
    epoch_global = 0
    for stage, n_epochs in stages:
        for k in range(1, n_epochs + 1):
            epoch_global += 1
            eps, miss_lr, gam = _epoch_step_sizes(schedule, stage, k)
            shuffle_rng = np.random.Generator(
                np.random.Philox(
                    np.random.SeedSequence((schedule.seed, run, epoch_global, _STREAM_SHUFFLE))
                )
            )
            perm = shuffle_rng.permutation(n)
            noise_hidden, noise_x = _epoch_noise(
                config, schedule, run, epoch_global, n, need_x=missing
            )
            ll_sum = 0.0
            for start in range(0, n, schedule.batch_size):
                ids = perm[start : start + schedule.batch_size]
                xb = x_state[ids]
                ab = dataset.a[ids]
                yb = dataset.y[ids]
                nh = [arr[ids].transpose(1, 0, 2) for arr in noise_hidden]
                nx = noise_x[ids].transpose(1, 0, 2) if missing else None
                state = backward_impute(
                    config,
                    params,
                    xb,
                    ab,
                    yb,
                    impute_lr=eps,
                    eta=schedule.eta,
                    t_mc=schedule.t_mc,
                    mask=mask_obj,
                    noise_hidden=nh,
                    noise_x=nx,
                    covariate_model=covariate_model if missing else None,
                    x_update_mask=upd_mask[ids] if missing else None,
                    miss_lr=miss_lr,
                    v_x=v_x[ids] if missing else None,
                    sample_ids=ids,
                )
                ll_sum += float(
                    complete_data_log_likelihood(config, params, state.x, ab, yb, state, mask_obj).sum()
                )
                params = sa_update(
                    config,
                    params,
                    hyper,
                    state.x,
                    ab,
                    yb,
                    state,
                    gam,
                    n,
                    mask=mask_obj,
                    include_bias_prior=schedule.include_bias_prior,
                    grad_clip=schedule.grad_clip,
                )
                for i in range(config.n_hidden):
                    latent_store[i][ids] = state.hidden[i]
                if missing:
                    x_state[ids] = state.x
                    v_x[ids] = state.v_x

            diag_stage.append(stage)
            diag_ll.append(ll_sum / n)
            diag_lp.append(
                ll_sum + log_prior(params, hyper, schedule.include_bias_prior)
            )

            if stage == "train" and k in prunes:
                if k == final_prune:
                    mask_obj = build_mask(params, hyper)
                    params = mask_obj.apply(params)
                else:
                    thr = sparsify_threshold(hyper)
                    params = NetworkParameters(
                        [np.where(np.abs(w) > thr, w, 0.0) for w in params.weights],
                        [np.where(np.abs(b) > thr, b, 0.0) for b in params.biases],
                    )

            if epoch_global > tail_start:
                tail.append(
                    TailSnapshot(
                        epoch=epoch_global,
                        params=params.copy(),
                        x_missing=x_state[miss_rows, miss_cols].copy() if missing else None,
                        latents=[h.copy() for h in latent_store]
                        if schedule.store_latent_tail
                        else None,
                    )
                )

    if mask_obj is None:
        mask_obj = SparsityMask.all_ones(config)
    diagnostics = {
        "stage": diag_stage,
        "log_likelihood": np.asarray(diag_ll),
        "log_posterior": np.asarray(diag_lp),
    }
    bic = _bic_value(config, params, mask_obj, x_state, dataset.a, dataset.y)
    return _RunResult(
        params=params,
        mask=mask_obj,
        diagnostics=diagnostics,
        tail=tail,
        bic=bic,
        final_x=x_state if missing else None,
    )


def train(
    dataset: Dataset,
    config: NetworkConfig,
    hyper: PriorHyperparameters,
    schedule: TrainingSchedule,
    covariate_model: Optional[CovariateModel] = None,
    threads: int = 1,
) -> FittedModel:
    """Run pretrain/train/prune/refine, possibly several times, keep best BIC.

    Runs are fully determined by ``(schedule.seed, run index)``; thread-level
    parallelism across runs cannot change the result.
    """
    if dataset.n == 0:
        raise DataError("empty dataset")
    if dataset.p != config.p:
        raise DataError(f"dataset has {dataset.p} covariates, config expects {config.p}")
    if config.output_kind == "binary-logistic" and not np.isin(dataset.y, (0.0, 1.0)).all():
        raise DataError("binary-logistic output requires outcomes in {0, 1}")
    if config.has_treatment is False:
        raise ConfigurationError("training a causal model requires a treatment unit")
    if dataset.has_missing and covariate_model is None:
        raise DataError("dataset has missing covariates; a covariate model is required")
    if dataset.has_missing and schedule.miss_lr is None:
        raise ConfigurationError("dataset has missing covariates; schedule.miss_lr is required")

    runs = list(range(schedule.num_runs))
    if threads > 1 and len(runs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(
                    lambda r: _train_single_run(dataset, config, hyper, schedule, covariate_model, r),
                    runs,
                )
            )
    else:
        results = [
            _train_single_run(dataset, config, hyper, schedule, covariate_model, r) for r in runs
        ]

    best = int(np.argmin([r.bic for r in results]))
    chosen = results[best]
    miss_rows, miss_cols = (
        dataset.missing_index() if dataset.has_missing else (None, None)
    )
    return FittedModel(
        config=config,
        hyper=hyper,
        schedule=schedule,
        params=chosen.params,
        mask=chosen.mask,
        diagnostics=chosen.diagnostics,
        tail=chosen.tail,
        bic=chosen.bic,
        n_train=dataset.n,
        run_index=best,
        missing_rows=miss_rows,
        missing_cols=miss_cols,
        final_x=chosen.final_x,
    )


def _bic_value(config, params, mask, x, a, y) -> float:
    fwd = dnn_forward(config, params, x, a, mask)
    out = np.atleast_1d(fwd.output)
    y_arr = np.asarray(y, dtype=np.float64)
    if config.output_kind == "binary-logistic":
        # plain (untempered) Bernoulli mass of the predicted class probability
        ll = float((y_arr * out - _log1pexp(out)).sum())
    else:
        var = config.noise_variances[-1]
        resid = (y_arr.reshape(out.shape) - out) if out.ndim > 1 else (y_arr - out)
        ll = float(
            (-0.5 * (np.log(2.0 * np.pi * var) + resid**2 / var)).sum()
        )
    n = np.atleast_2d(x).shape[0]
    return -2.0 * ll + mask.count_active() * np.log(n)


def bic_score(fitted: FittedModel, dataset: Dataset, x_completed: Optional[np.ndarray] = None) -> float:
    """``-2 log-lik(deterministic network, masked params) + |mask| log n``.

    The likelihood is the plain forward-network one: Gaussian with the
    output-layer variance for continuous outcomes, Bernoulli with the
    predicted class probability for binary ones.  For datasets with missing
    covariates pass completed values (or let the model's own imputations be
    used when the dataset is the training set).
    """
    if x_completed is None:
        x_completed = fitted.completed_x(dataset) if dataset.has_missing else dataset.x
    return _bic_value(fitted.config, fitted.params, fitted.mask, x_completed, dataset.a, dataset.y)


def posterior_average(fitted: FittedModel, phi: Callable[[NetworkParameters, TailSnapshot], float]) -> float:
    """Average ``phi(params, snapshot)`` over the stored trajectory tail."""
    if not fitted.tail:
        raise DataError("fitted model holds no trajectory tail")
    return float(np.mean([phi(s.params, s) for s in fitted.tail]))
