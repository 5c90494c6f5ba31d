"""Gaussian-uniform mixture: densities, likelihood, responsibilities, sampling.

The observation model is a two-component mixture: with probability theta the
reading comes from the signal distribution Normal(mu, sigma^2); with
probability 1 - theta it is an outlier drawn uniformly from a 100 degC band
centred on mu. The uniform component's density is treated as the constant
1/100 everywhere when evaluating likelihoods (so a reading far outside the
band never yields a -inf log-likelihood); sampling still uses the bounded
support [mu - 50, mu + 50].

All density math here is float64 regardless of what the network computes in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, UsageError

SIGMA_FLOOR = 0.01  # degC; smallest admissible signal standard deviation
OUTLIER_HALF_WIDTH = 50.0  # degC; half-width of the uniform outlier band
OUTLIER_LOG_DENSITY = -math.log(2.0 * OUTLIER_HALF_WIDTH)  # log(1/100)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MixtureParams:
    """Per-observation mixture parameters (mu, sigma in degC, theta in [0,1])."""

    mu: float
    sigma: float
    theta: float

    def validate(self) -> None:
        if not math.isfinite(self.mu):
            raise ParameterError(f"mu must be finite, got {self.mu}")
        if not (self.sigma >= SIGMA_FLOOR):
            raise ParameterError(
                f"sigma must be >= {SIGMA_FLOOR}, got {self.sigma}"
            )
        if not (0.0 <= self.theta <= 1.0):
            raise ParameterError(f"theta must lie in [0, 1], got {self.theta}")


@dataclass(frozen=True)
class LatentAssignment:
    """Component indicator for one draw: 1 = signal, 0 = outlier."""

    z: int

    def __post_init__(self) -> None:
        if self.z not in (0, 1):
            raise ParameterError(f"z must be 0 or 1, got {self.z}")


@dataclass(frozen=True)
class OutlierComponent:
    """Fixed uniform outlier component (band half-width and its density)."""

    half_width: float = OUTLIER_HALF_WIDTH
    density_value: float = 1.0 / (2.0 * OUTLIER_HALF_WIDTH)

    def __post_init__(self) -> None:
        if not math.isclose(self.density_value, 1.0 / (2.0 * self.half_width)):
            raise ParameterError("density_value must equal 1/(2*half_width)")


def signal_log_density(y: float, p: MixtureParams) -> float:
    """Log of the Gaussian signal density at y."""
    p.validate()
    z = (y - p.mu) / p.sigma
    return -_LOG_SQRT_2PI - math.log(p.sigma) - 0.5 * z * z


def mixture_log_density(y: float, p: MixtureParams) -> float:
    """log(theta * N(y; mu, sigma^2) + (1 - theta) / 100), via log-sum-exp."""
    p.validate()
    return float(_mixture_log_density_arrays(
        np.float64(y), np.float64(p.mu), np.float64(p.sigma), np.float64(p.theta)
    ))


def outlier_responsibility(y: float, p: MixtureParams) -> float:
    """Posterior probability that y was generated by the uniform component."""
    p.validate()
    return float(responsibilities(
        np.float64(y), np.float64(p.mu), np.float64(p.sigma), np.float64(p.theta)
    ))


def sample_mixture(
    p: MixtureParams, rng: np.random.Generator
) -> tuple[float, LatentAssignment]:
    """One draw from the mixture plus its latent component assignment.

    z ~ Bernoulli(theta); y | z=1 ~ Normal(mu, sigma^2);
    y | z=0 ~ Uniform(mu - 50, mu + 50).
    """
    p.validate()
    z = 1 if rng.random() < p.theta else 0
    if z == 1:
        y = p.mu + p.sigma * rng.standard_normal()
    else:
        y = p.mu + OUTLIER_HALF_WIDTH * rng.uniform(-1.0, 1.0)
    return float(y), LatentAssignment(z)


def batch_nll(ys, ps) -> float:
    """Negative log-likelihood of a batch: -sum_i log p(y_i | p_i)."""
    if len(ys) != len(ps):
        raise UsageError(f"length mismatch: {len(ys)} observations, {len(ps)} params")
    if len(ys) == 0:
        raise UsageError("batch_nll requires a non-empty batch")
    return -sum(mixture_log_density(y, p) for y, p in zip(ys, ps))


# --- vectorized core (shared by the scalar API and the training loop) ---


def _validate_arrays(sigma: np.ndarray, theta: np.ndarray) -> None:
    if np.any(sigma < SIGMA_FLOOR):
        raise ParameterError("sigma below floor in batch")
    if np.any((theta < 0.0) | (theta > 1.0)):
        raise ParameterError("theta outside [0, 1] in batch")


def _signal_log_density_arrays(y, mu, sigma):
    z = (y - mu) / sigma
    return -_LOG_SQRT_2PI - np.log(sigma) - 0.5 * z * z


def _mixture_log_density_arrays(y, mu, sigma, theta):
    log_sig = _signal_log_density_arrays(y, mu, sigma)
    with np.errstate(divide="ignore"):  # log(0) -> -inf is the intended branch
        a = np.log(theta) + log_sig
        b = np.log1p(-theta) + OUTLIER_LOG_DENSITY
    return np.logaddexp(a, b)


def responsibilities(y, mu, sigma, theta):
    """Vectorized outlier responsibility (1-theta)*p_out / mixture density."""
    log_sig = _signal_log_density_arrays(y, mu, sigma)
    with np.errstate(divide="ignore"):
        a = np.log(theta) + log_sig
        b = np.log1p(-theta) + OUTLIER_LOG_DENSITY
    return np.exp(b - np.logaddexp(a, b))


def nll_and_grads(y, mu, sigma, theta):
    """Total NLL of a batch plus its gradients w.r.t. mu, sigma and theta.

    Inputs are equal-length float arrays; gradients are per-observation.
    Used as the loss head of the training loop; everything is float64 and
    stable for sigma at the floor and |y - mu| up to the outlier band width.
    """
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if not (y.shape == mu.shape == sigma.shape == theta.shape):
        raise UsageError("y, mu, sigma, theta must have identical shapes")
    _validate_arrays(sigma, theta)

    log_sig = _signal_log_density_arrays(y, mu, sigma)
    with np.errstate(divide="ignore"):
        a = np.log(theta) + log_sig
        b = np.log1p(-theta) + OUTLIER_LOG_DENSITY
    log_mix = np.logaddexp(a, b)

    # w_sig = theta * p_signal / p_mixture, the signal responsibility
    w_sig = np.exp(a - log_mix)
    resid = (y - mu) / sigma

    d_mu = -w_sig * resid / sigma
    d_sigma = -w_sig * (resid * resid - 1.0) / sigma
    # d/dtheta of -log(theta p_sig + (1-theta) p_out) = -(p_sig - p_out)/mix
    d_theta = -(np.exp(log_sig - log_mix) - np.exp(OUTLIER_LOG_DENSITY - log_mix))

    return float(-np.sum(log_mix)), d_mu, d_sigma, d_theta


def gaussian_nll_and_grads(y, mu, sigma):
    """Pure-Gaussian counterpart of nll_and_grads (no outlier component).

    The baseline model for ablation runs: same network, likelihood reduced
    to Normal(mu, sigma^2) alone.
    """
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if not (y.shape == mu.shape == sigma.shape):
        raise UsageError("y, mu, sigma must have identical shapes")
    if np.any(sigma < SIGMA_FLOOR):
        raise ParameterError("sigma below floor in batch")
    resid = (y - mu) / sigma
    nll = float(np.sum(_LOG_SQRT_2PI + np.log(sigma) + 0.5 * resid * resid))
    d_mu = -resid / sigma
    d_sigma = -(resid * resid - 1.0) / sigma
    return nll, d_mu, d_sigma
