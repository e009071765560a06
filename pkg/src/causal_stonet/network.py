"""Stochastic feedforward network with an embedded visible treatment unit.

The model is a stack of affine layers with an elementwise activation.  Each
hidden layer's pre-activation vector is treated as a latent Gaussian variable
with a per-layer noise variance, so the network factorizes into a chain of
simple regressions.  Optionally, one hidden coordinate is replaced by a
visible binary treatment: its value is always clamped to the observed
treatment, and its incoming weights parameterize a logistic propensity model.

Conventions used throughout:

* ``weights[i]`` has shape ``(d_{i+1}, d_i)`` and ``biases[i]`` shape
  ``(d_{i+1},)``, mapping layer ``i`` to layer ``i+1`` (layer 0 is the input).
* Latent values are stored pre-activation.  The activation is applied when a
  layer feeds forward, except at the treatment slot, whose clamped value
  passes through unchanged.
* All Gaussian log-densities include their normalizing constants.  Binary
  log-masses are divided by a temperature: the output-layer noise variance
  for a logistic output, and ``treatment_temperature`` for the treatment
  slot.  The sigmoid link itself is never rescaled, so predicted
  probabilities are temperature-free.
* Everything is float64.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, NumericError, ShapeError

__all__ = [
    "NetworkConfig",
    "NetworkParameters",
    "SparsityMask",
    "LatentState",
    "ForwardResult",
    "dnn_forward",
    "layer_log_density",
    "complete_data_log_likelihood",
    "grad_latents",
    "grad_params",
    "LatentGradients",
    "ParamGradients",
]


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_deriv(z):
    # subgradient at 0 is defined as 0
    return (z > 0.0).astype(np.float64)


def _sigmoid_deriv(z):
    s = expit(z)
    return s * (1.0 - s)


def _identity(z):
    return z


def _ones_like(z):
    return np.ones_like(z)


_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "sigmoid": (expit, _sigmoid_deriv),
    "relu": (_relu, _relu_deriv),
    "identity": (_identity, _ones_like),
}

_OUTPUT_KINDS = ("continuous-gaussian", "binary-logistic")


def _log1pexp(z):
    """log(1 + exp(z)), overflow-safe."""
    return np.logaddexp(0.0, z)


@dataclass(frozen=True)
class NetworkConfig:
    """Topology and noise structure of the network.

    Parameters
    ----------
    layer_widths : sequence of int
        ``(p, d_1, ..., d_h, d_out)``; ``p`` is the input dimension.
    noise_variances : sequence of float
        Per-layer Gaussian variances, one per non-input layer.  The last
        entry doubles as the output temperature for ``binary-logistic``.
    treatment_layer : int or None
        1-based hidden layer hosting the visible treatment unit, or None
        for a plain stochastic network without a treatment.
    treatment_position : int
        Index of the hidden coordinate replaced by the treatment unit.
    activation : str
        One of ``tanh``, ``sigmoid``, ``relu``, ``identity``.
    output_kind : str
        ``continuous-gaussian`` or ``binary-logistic``.
    treatment_temperature : float
        Divisor applied to the treatment unit's Bernoulli log-mass.  The
        natural candidates are 1 (a plain Bernoulli, the default) or the
        treatment layer's noise variance; this is left configurable because
        either convention is defensible.
    """

    layer_widths: tuple[int, ...]
    noise_variances: tuple[float, ...]
    treatment_layer: Optional[int] = None
    treatment_position: int = 0
    activation: str = "tanh"
    output_kind: str = "continuous-gaussian"
    treatment_temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "noise_variances", tuple(float(v) for v in self.noise_variances))
        if len(self.layer_widths) < 2:
            raise ConfigurationError("need at least input and output widths")
        if any(w < 1 for w in self.layer_widths):
            raise ConfigurationError("all layer widths must be >= 1")
        if len(self.noise_variances) != self.n_layers:
            raise ConfigurationError(
                f"expected {self.n_layers} noise variances, got {len(self.noise_variances)}"
            )
        if any(v <= 0.0 for v in self.noise_variances):
            raise ConfigurationError("noise variances must be positive")
        if any(b < a for a, b in zip(self.noise_variances, self.noise_variances[1:])):
            warnings.warn(
                "noise variances decrease across layers; the usual convention "
                "is nondecreasing toward the output",
                stacklevel=2,
            )
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.output_kind not in _OUTPUT_KINDS:
            raise ConfigurationError(f"unknown output kind {self.output_kind!r}")
        if self.treatment_layer is not None:
            if not 1 <= self.treatment_layer <= self.n_hidden:
                raise ConfigurationError("treatment_layer must be a hidden layer index in 1..h")
            if not 0 <= self.treatment_position < self.layer_widths[self.treatment_layer]:
                raise ConfigurationError("treatment_position out of range for its layer")
        if self.treatment_temperature <= 0.0:
            raise ConfigurationError("treatment_temperature must be positive")

    @property
    def p(self) -> int:
        return self.layer_widths[0]

    @property
    def n_hidden(self) -> int:
        return len(self.layer_widths) - 2

    @property
    def n_layers(self) -> int:
        """Number of non-input layers (hidden layers plus output)."""
        return len(self.layer_widths) - 1

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def has_treatment(self) -> bool:
        return self.treatment_layer is not None

    def activation_fn(self):
        return _ACTIVATIONS[self.activation][0]

    def activation_deriv(self):
        return _ACTIVATIONS[self.activation][1]


def _check_layer_arrays(config: NetworkConfig, weights, biases, what: str):
    if len(weights) != config.n_layers or len(biases) != config.n_layers:
        raise ShapeError(f"{what}: expected {config.n_layers} layers")
    for i in range(config.n_layers):
        d_out, d_in = config.layer_widths[i + 1], config.layer_widths[i]
        if weights[i].shape != (d_out, d_in):
            raise ShapeError(
                f"{what}: weights[{i}] has shape {weights[i].shape}, expected {(d_out, d_in)}"
            )
        if biases[i].shape != (d_out,):
            raise ShapeError(
                f"{what}: biases[{i}] has shape {biases[i].shape}, expected {(d_out,)}"
            )


@dataclass
class NetworkParameters:
    """All layer weights and biases.

    The row ``weights[t-1][treatment_position]`` together with the matching
    bias entry parameterizes the propensity logit when a treatment unit is
    configured.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros(cls, config: NetworkConfig) -> "NetworkParameters":
        w = [
            np.zeros((config.layer_widths[i + 1], config.layer_widths[i]))
            for i in range(config.n_layers)
        ]
        b = [np.zeros(config.layer_widths[i + 1]) for i in range(config.n_layers)]
        return cls(w, b)

    @classmethod
    def random(
        cls,
        config: NetworkConfig,
        rng: np.random.Generator,
        scale: Optional[float] = None,
    ) -> "NetworkParameters":
        """Gaussian init with per-layer std ``scale`` or ``1/sqrt(fan_in)``."""
        w, b = [], []
        for i in range(config.n_layers):
            d_out, d_in = config.layer_widths[i + 1], config.layer_widths[i]
            s = scale if scale is not None else 1.0 / np.sqrt(d_in)
            w.append(rng.normal(0.0, s, size=(d_out, d_in)))
            b.append(rng.normal(0.0, s, size=d_out))
        return cls(w, b)

    def validate(self, config: NetworkConfig):
        _check_layer_arrays(config, self.weights, self.biases, "parameters")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"non-finite parameter in layer {i + 1}")

    def copy(self) -> "NetworkParameters":
        return NetworkParameters([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def n_parameters(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


@dataclass
class SparsityMask:
    """Binary keep/drop indicator with the same shapes as the parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def all_ones(cls, config: NetworkConfig) -> "SparsityMask":
        w = [
            np.ones((config.layer_widths[i + 1], config.layer_widths[i]), dtype=bool)
            for i in range(config.n_layers)
        ]
        b = [np.ones(config.layer_widths[i + 1], dtype=bool) for i in range(config.n_layers)]
        return cls(w, b)

    def validate(self, config: NetworkConfig):
        _check_layer_arrays(config, self.weights, self.biases, "mask")

    def count_active(self) -> int:
        return int(sum(w.sum() for w in self.weights) + sum(b.sum() for b in self.biases))

    def apply(self, params: NetworkParameters) -> NetworkParameters:
        """Return a copy of ``params`` with masked-out entries set to 0."""
        return NetworkParameters(
            [w * m for w, m in zip(params.weights, self.weights)],
            [b * m for b, m in zip(params.biases, self.biases)],
        )

    def copy(self) -> "SparsityMask":
        return SparsityMask([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def _effective(params: NetworkParameters, mask: Optional[SparsityMask]):
    """Weights/biases with the mask applied (no copy when mask is None)."""
    if mask is None:
        return params.weights, params.biases
    return (
        [w * m for w, m in zip(params.weights, mask.weights)],
        [b * m for b, m in zip(params.biases, mask.biases)],
    )


def _as_batch(x: np.ndarray, a, y=None):
    """Promote single-sample inputs to batch form; report whether we did."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    a_arr = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if y is None:
        return x, a_arr, None, single
    y_arr = np.atleast_1d(np.asarray(y, dtype=np.float64))
    return x, a_arr, y_arr, single


def _activate_hidden(config: NetworkConfig, layer: int, values: np.ndarray) -> np.ndarray:
    """Activated feed-forward values of hidden layer ``layer`` (1-based).

    The treatment slot, when present in this layer, passes through unchanged:
    its stored value is the clamped treatment, not a pre-activation.
    """
    act = config.activation_fn()
    out = act(values)
    if config.treatment_layer == layer:
        out[..., config.treatment_position] = values[..., config.treatment_position]
    return out


def _activate_hidden_deriv(config: NetworkConfig, layer: int, values: np.ndarray) -> np.ndarray:
    deriv = config.activation_deriv()(values)
    if config.treatment_layer == layer:
        deriv[..., config.treatment_position] = 1.0
    return deriv


@dataclass
class ForwardResult:
    """Zero-noise forward pass.

    ``hidden[i]`` holds layer ``i+1`` pre-activations with the treatment slot
    overwritten by the clamped treatment value.  ``propensity_logit`` is the
    treatment slot's affine pre-activation (None without a treatment unit).
    ``output`` is the final affine value: the regression prediction for a
    Gaussian output, the logit for a logistic output.
    """

    hidden: list[np.ndarray]
    propensity_logit: Optional[np.ndarray]
    output: np.ndarray


def dnn_forward(
    config: NetworkConfig,
    params: NetworkParameters,
    x: np.ndarray,
    a,
    mask: Optional[SparsityMask] = None,
) -> ForwardResult:
    """Deterministic forward pass; consumes no randomness.

    Computes each layer's pre-activation with zero noise.  At the treatment
    layer the slot's pre-activation is recorded as the propensity logit and
    its value is replaced by ``a`` before feeding forward.
    """
    x, a_arr, _, single = _as_batch(x, a)
    if x.shape[1] != config.p:
        raise ShapeError(f"input has {x.shape[1]} columns, expected {config.p}")
    params.validate(config)
    if mask is not None:
        mask.validate(config)
    weights, biases = _effective(params, mask)

    z = x
    hidden: list[np.ndarray] = []
    logit = None
    for i in range(1, config.n_hidden + 1):
        pre = z @ weights[i - 1].T + biases[i - 1]
        if not np.isfinite(pre).all():
            raise NumericError(f"non-finite pre-activation in layer {i}")
        if config.treatment_layer == i:
            logit = pre[:, config.treatment_position].copy()
            pre[:, config.treatment_position] = a_arr
        hidden.append(pre)
        z = _activate_hidden(config, i, pre)
    out = z @ weights[-1].T + biases[-1]
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite pre-activation in layer {config.n_layers}")
    if config.output_dim == 1:
        out = out[:, 0]
    if single:
        hidden = [h[0] for h in hidden]
        logit = None if logit is None else float(logit[0])
        out = float(out[0]) if config.output_dim == 1 else out[0]
    return ForwardResult(hidden=hidden, propensity_logit=logit, output=out)


@dataclass
class LatentState:
    """Per-sample latent values.

    ``hidden[i]`` has shape ``(n, d_{i+1})`` and stores the imputed value of
    hidden layer ``i+1``; the treatment slot always equals the observed
    treatment.  ``x`` holds the covariates with any missing entries filled by
    their current imputations; ``x_update_mask`` marks the imputable entries.
    ``momenta``/``v_x`` carry sampler momenta when a caller wants them to
    persist between calls.
    """

    hidden: list[np.ndarray]
    x: np.ndarray
    x_update_mask: Optional[np.ndarray] = None
    momenta: Optional[list[np.ndarray]] = None
    v_x: Optional[np.ndarray] = None
    # activated inputs each layer's final sampling sweep conditioned on
    # (layer 1's raw covariates, then phi(Y_1)..phi(Y_{h-1})); populated by
    # the imputation routine so parameter updates can condition on the same
    # values the sampler used
    sweep_inputs: Optional[list[np.ndarray]] = None

    @classmethod
    def from_forward(
        cls,
        config: NetworkConfig,
        params: NetworkParameters,
        x: np.ndarray,
        a,
        mask: Optional[SparsityMask] = None,
        x_update_mask: Optional[np.ndarray] = None,
    ) -> "LatentState":
        """Initialize latents at the zero-noise forward values."""
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
        fwd = dnn_forward(config, params, xb, a, mask)
        return cls(hidden=fwd.hidden, x=xb, x_update_mask=x_update_mask)

    def copy(self) -> "LatentState":
        return LatentState(
            hidden=[h.copy() for h in self.hidden],
            x=self.x.copy(),
            x_update_mask=None if self.x_update_mask is None else self.x_update_mask.copy(),
            momenta=None if self.momenta is None else [v.copy() for v in self.momenta],
            v_x=None if self.v_x is None else self.v_x.copy(),
            sweep_inputs=None
            if self.sweep_inputs is None
            else [z.copy() for z in self.sweep_inputs],
        )


def _layer_inputs(config: NetworkConfig, latents: LatentState):
    """Activated input to each layer: [x, phi(Y_1), ..., phi(Y_h)]."""
    z = [latents.x]
    for i in range(1, config.n_hidden + 1):
        z.append(_activate_hidden(config, i, latents.hidden[i - 1]))
    return z


def _gauss_logpdf_sum(resid: np.ndarray, var: float, skip_col: Optional[int] = None):
    """Row-wise sum of Normal(0, var) log-densities, optionally skipping a column."""
    sq = resid**2
    d = resid.shape[1]
    if skip_col is not None:
        sq = np.delete(sq, skip_col, axis=1)
        d -= 1
    return -0.5 * (d * np.log(2.0 * np.pi * var) + sq.sum(axis=1) / var)


def _bernoulli_logmass(logit: np.ndarray, value: np.ndarray, temperature: float):
    return (value * logit - _log1pexp(logit)) / temperature


def layer_log_density(
    config: NetworkConfig,
    params: NetworkParameters,
    layer: int,
    y_prev: np.ndarray,
    y_cur: np.ndarray,
    noise_variance: Optional[float] = None,
    mask: Optional[SparsityMask] = None,
) -> np.ndarray:
    """Log-density of one layer's conditional, per sample.

    ``y_prev`` holds the previous layer's latent values (raw covariates for
    layer 1); the activation is applied internally.  For the treatment layer,
    ``y_cur``'s slot column must hold the observed treatment and contributes
    a Bernoulli log-mass with the slot's affine value as logit.  For a
    ``binary-logistic`` output, the log-mass is divided by the output
    temperature.  Gaussian terms include their normalizing constants.
    """
    if not 1 <= layer <= config.n_layers:
        raise ConfigurationError(f"layer index {layer} out of range")
    var = config.noise_variances[layer - 1] if noise_variance is None else float(noise_variance)
    if var <= 0.0:
        raise ConfigurationError("noise variance must be positive")
    y_prev = np.atleast_2d(np.asarray(y_prev, dtype=np.float64))
    y_cur_arr = np.asarray(y_cur, dtype=np.float64)
    squeeze = y_cur_arr.ndim <= 1 and y_prev.shape[0] == 1
    if layer == config.n_layers and config.output_dim == 1:
        y_cur_arr = np.atleast_1d(y_cur_arr).reshape(-1, 1)
    else:
        y_cur_arr = np.atleast_2d(y_cur_arr)

    weights, biases = _effective(params, mask)
    z_prev = y_prev if layer == 1 else _activate_hidden(config, layer - 1, y_prev)
    mean = z_prev @ weights[layer - 1].T + biases[layer - 1]

    if layer == config.n_layers and config.output_kind == "binary-logistic":
        out = _bernoulli_logmass(mean[:, 0], y_cur_arr[:, 0], var)
        return float(out[0]) if squeeze else out

    if config.treatment_layer == layer:
        pos = config.treatment_position
        a_col = y_cur_arr[:, pos]
        if not np.isin(a_col, (0.0, 1.0)).all():
            raise ConfigurationError("treatment slot values must be 0 or 1")
        out = _gauss_logpdf_sum(y_cur_arr - mean, var, skip_col=pos)
        out = out + _bernoulli_logmass(mean[:, pos], a_col, config.treatment_temperature)
    else:
        out = _gauss_logpdf_sum(y_cur_arr - mean, var)
    return float(out[0]) if squeeze else out


def complete_data_log_likelihood(
    config: NetworkConfig,
    params: NetworkParameters,
    x: np.ndarray,
    a,
    y,
    latents: LatentState,
    mask: Optional[SparsityMask] = None,
) -> np.ndarray:
    """Joint log-density of outcome, latents and treatment given covariates.

    Sum of the per-layer conditionals, including every Gaussian normalizing
    constant (the fixed convention, so values are comparable across
    configurations).  Returns one value per sample; scalar for 1-D input.
    """
    x, a_arr, y_arr, single = _as_batch(x, a, y)
    prev = x
    total = np.zeros(x.shape[0])
    for i in range(1, config.n_hidden + 1):
        cur = np.atleast_2d(latents.hidden[i - 1])
        total = total + layer_log_density(config, params, i, prev, cur, mask=mask)
        prev = cur
    total = total + layer_log_density(config, params, config.n_layers, prev, y_arr, mask=mask)
    return float(total[0]) if single else total


@dataclass
class LatentGradients:
    """Gradient of the complete-data log-likelihood in the latent directions."""

    hidden: list[np.ndarray]
    x: Optional[np.ndarray] = None


@dataclass
class ParamGradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def _layer_deltas(
    config: NetworkConfig,
    weights,
    biases,
    z: list[np.ndarray],
    latents: LatentState,
    a_arr: np.ndarray,
    y_arr: np.ndarray,
):
    """d(log-likelihood)/d(affine value) for every layer, per sample.

    For Gaussian coordinates this is residual/variance; for the treatment
    slot and a logistic output it is the Bernoulli score divided by the
    temperature.
    """
    deltas = []
    for i in range(1, config.n_layers + 1):
        mean = z[i - 1] @ weights[i - 1].T + biases[i - 1]
        var = config.noise_variances[i - 1]
        if i == config.n_layers:
            y2 = y_arr.reshape(mean.shape[0], -1)
            if config.output_kind == "binary-logistic":
                delta = (y2 - expit(mean)) / var
            else:
                delta = (y2 - mean) / var
        else:
            cur = np.atleast_2d(latents.hidden[i - 1])
            delta = (cur - mean) / var
            if config.treatment_layer == i:
                pos = config.treatment_position
                logit = mean[:, pos]
                delta[:, pos] = (a_arr - expit(logit)) / config.treatment_temperature
        deltas.append(delta)
    return deltas


def grad_latents(
    config: NetworkConfig,
    params: NetworkParameters,
    x: np.ndarray,
    a,
    y,
    latents: LatentState,
    mask: Optional[SparsityMask] = None,
) -> LatentGradients:
    """Analytic gradient of the complete-data log-likelihood w.r.t. latents.

    Each hidden layer receives its own-density term plus the next layer's
    back-propagated term; the clamped treatment slot's entry is forced to 0.
    The ``x`` gradient covers only the network term (the covariate prior for
    missing entries is added by the imputation routine).
    """
    x, a_arr, y_arr, _ = _as_batch(x, a, y)
    weights, biases = _effective(params, mask)
    z = _layer_inputs(config, LatentState(hidden=[np.atleast_2d(h) for h in latents.hidden], x=x))
    deltas = _layer_deltas(config, weights, biases, z, latents, a_arr, y_arr)

    grads = []
    for i in range(1, config.n_hidden + 1):
        own = -deltas[i - 1].copy()
        if config.treatment_layer == i:
            own[:, config.treatment_position] = 0.0
        back = (deltas[i] @ weights[i]) * _activate_hidden_deriv(
            config, i, np.atleast_2d(latents.hidden[i - 1])
        )
        g = own + back
        if config.treatment_layer == i:
            g[:, config.treatment_position] = 0.0
        grads.append(g)
    gx = deltas[0] @ weights[0] if latents.x_update_mask is not None else None
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite latent gradient in layer {i + 1}")
    return LatentGradients(hidden=grads, x=gx)


def grad_params(
    config: NetworkConfig,
    params: NetworkParameters,
    x: np.ndarray,
    a,
    y,
    latents: LatentState,
    mask: Optional[SparsityMask] = None,
) -> ParamGradients:
    """Gradient of the complete-data log-likelihood w.r.t. weights and biases.

    Summed over the samples in the batch.  Each layer's gradient depends only
    on the adjacent latent values; masked-out entries receive exactly 0.
    """
    x, a_arr, y_arr, _ = _as_batch(x, a, y)
    weights, biases = _effective(params, mask)
    z = _layer_inputs(config, LatentState(hidden=[np.atleast_2d(h) for h in latents.hidden], x=x))
    deltas = _layer_deltas(config, weights, biases, z, latents, a_arr, y_arr)

    gw, gb = [], []
    for i in range(config.n_layers):
        dw = deltas[i].T @ z[i]
        db = deltas[i].sum(axis=0)
        if mask is not None:
            dw = dw * mask.weights[i]
            db = db * mask.biases[i]
        if not (np.isfinite(dw).all() and np.isfinite(db).all()):
            raise NumericError(f"non-finite parameter gradient in layer {i + 1}")
        gw.append(dw)
        gb.append(db)
    return ParamGradients(weights=gw, biases=gb)
