"""Two-component mixture-Gaussian (spike-and-slab) prior.

Every scalar parameter gets an independent prior
``lambda_n * N(0, sigma1_sq) + (1 - lambda_n) * N(0, sigma0_sq)`` with a
narrow spike (``sigma0_sq``) absorbing prunable entries and a wide slab
(``sigma1_sq``) carrying the surviving ones.  All responsibility math runs
in log space: the shipped defaults (``lambda_n`` around 1e-6 with a tiny
spike variance) underflow naive densities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError
from .network import NetworkParameters, ParamGradients, SparsityMask

__all__ = [
    "PriorHyperparameters",
    "log_prior",
    "grad_log_prior",
    "sparsify_threshold",
    "build_mask",
    "slab_responsibility",
]


@dataclass(frozen=True)
class PriorHyperparameters:
    """Mixture proportion and the two component variances."""

    lambda_n: float
    sigma0_sq: float
    sigma1_sq: float

    def __post_init__(self):
        if not 0.0 < self.lambda_n < 1.0:
            raise ConfigurationError("lambda_n must lie strictly in (0, 1)")
        if self.sigma0_sq <= 0.0 or self.sigma1_sq <= 0.0:
            raise ConfigurationError("component variances must be positive")
        if self.sigma0_sq >= self.sigma1_sq:
            raise ConfigurationError("spike variance must be smaller than slab variance")


def _component_logpdfs(theta: np.ndarray, hyper: PriorHyperparameters):
    """Log of (weighted slab density, weighted spike density)."""
    slab = (
        np.log(hyper.lambda_n)
        - 0.5 * np.log(2.0 * np.pi * hyper.sigma1_sq)
        - theta**2 / (2.0 * hyper.sigma1_sq)
    )
    spike = (
        np.log1p(-hyper.lambda_n)
        - 0.5 * np.log(2.0 * np.pi * hyper.sigma0_sq)
        - theta**2 / (2.0 * hyper.sigma0_sq)
    )
    return slab, spike


def slab_responsibility(theta, hyper: PriorHyperparameters) -> np.ndarray:
    """Posterior probability that an entry came from the slab component."""
    theta = np.asarray(theta, dtype=np.float64)
    slab, spike = _component_logpdfs(theta, hyper)
    return expit(slab - spike)


def _iter_arrays(params: NetworkParameters, include_biases: bool):
    yield from params.weights
    if include_biases:
        yield from params.biases


def log_prior(
    params: NetworkParameters, hyper: PriorHyperparameters, include_biases: bool = True
) -> float:
    """Mixture log-density summed over every parameter entry.

    Biases are penalized identically to weights by default; set
    ``include_biases=False`` to exempt them.
    """
    total = 0.0
    for arr in _iter_arrays(params, include_biases):
        slab, spike = _component_logpdfs(arr, hyper)
        total += float(np.logaddexp(slab, spike).sum())
    return total


def grad_log_prior(
    params: NetworkParameters, hyper: PriorHyperparameters, include_biases: bool = True
) -> ParamGradients:
    """Per-entry gradient ``-theta * (r/sigma1_sq + (1-r)/sigma0_sq)``.

    ``r`` is the slab responsibility, evaluated in log space.  The returned
    object matches the parameter shapes; exempted biases get zero gradient.
    """

    def one(arr):
        r = slab_responsibility(arr, hyper)
        return -arr * (r / hyper.sigma1_sq + (1.0 - r) / hyper.sigma0_sq)

    gw = [one(w) for w in params.weights]
    if include_biases:
        gb = [one(b) for b in params.biases]
    else:
        gb = [np.zeros_like(b) for b in params.biases]
    return ParamGradients(weights=gw, biases=gb)


def sparsify_threshold(hyper: PriorHyperparameters) -> float:
    """Magnitude where the weighted spike and slab densities cross.

    Entries above the threshold are slab-dominated (responsibility > 1/2)
    and survive pruning.  Requires ``(1-lambda) * sigma1 > lambda * sigma0``
    for the crossing to exist.
    """
    s0 = np.sqrt(hyper.sigma0_sq)
    s1 = np.sqrt(hyper.sigma1_sq)
    ratio = (1.0 - hyper.lambda_n) / hyper.lambda_n * (s1 / s0)
    if ratio <= 1.0:
        raise ConfigurationError(
            "no real sparsification threshold: need (1-lambda)*sigma1 > lambda*sigma0"
        )
    scale = np.sqrt(2.0) * s0 * s1 / np.sqrt(hyper.sigma1_sq - hyper.sigma0_sq)
    return float(scale * np.sqrt(np.log(ratio)))


def build_mask(params: NetworkParameters, hyper: PriorHyperparameters) -> SparsityMask:
    """Keep entries with magnitude strictly above the threshold.

    A value exactly at the threshold is dropped (strict inequality), matching
    the responsibility-crossover rule ``r > 1/2``.
    """
    t = sparsify_threshold(hyper)
    return SparsityMask(
        weights=[np.abs(w) > t for w in params.weights],
        biases=[np.abs(b) > t for b in params.biases],
    )
