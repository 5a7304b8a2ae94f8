"""Bivariate Gaussian machinery for per-timestep location distributions.

A convolutional converter maps future displacement trajectories
[N, T', 2] to unconstrained statistics [N, T', 5].  The constraint map
turns raw statistics into valid Gaussian parameters:

    mu1, mu2  identity
    sigma1,2  softplus(raw) + SIGMA_FLOOR
    rho       RHO_CAP * tanh(raw)

Diffusion always operates on the unconstrained raw values; the constraint
map is applied whenever a state is read as a distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

SIGMA_FLOOR = 1e-4
RHO_CAP = 0.99
STAT_CHANNELS = 5
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Gaussian5:
    """Sufficient statistics of one bivariate Gaussian (displacement meters)."""

    mu1: float
    mu2: float
    sigma1: float
    sigma2: float
    rho: float

    def validate(self):
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise ValueError("sigma must be strictly positive")
        if abs(self.rho) > RHO_CAP:
            raise ValueError(f"|rho| must be <= {RHO_CAP}")
        for v in (self.mu1, self.mu2, self.sigma1, self.sigma2, self.rho):
            if not math.isfinite(v):
                raise ValueError("non-finite Gaussian parameter")
        return self

    def covariance(self) -> np.ndarray:
        c = self.rho * self.sigma1 * self.sigma2
        return np.array([[self.sigma1 ** 2, c], [c, self.sigma2 ** 2]])


def constrain_array(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw [..., 5] -> (means [..., 2], sigmas [..., 2], rho [..., 1])."""
    mu = raw[..., 0:2]
    sig = np.logaddexp(0.0, raw[..., 2:4]) + SIGMA_FLOOR
    rho = RHO_CAP * np.tanh(raw[..., 4:5])
    return mu, sig, rho


def constrain_tensors(raw: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable constraint map on a raw-statistics tensor [..., 5]."""
    mu = raw[(Ellipsis, slice(0, 2))]
    sig = nm.add(nm.softplus(raw[(Ellipsis, slice(2, 4))]), SIGMA_FLOOR)
    rho = nm.mul(nm.tanh(raw[(Ellipsis, slice(4, 5))]), RHO_CAP)
    return mu, sig, rho


class StatsField:
    """Per-pedestrian, per-timestep raw statistics with constrained views."""

    def __init__(self, raw):
        self.raw = np.asarray(raw.data if isinstance(raw, Tensor) else raw, dtype=np.float64)
        if self.raw.ndim != 3 or self.raw.shape[-1] != STAT_CHANNELS:
            raise ValueError(f"raw stats must be [N, T', 5], got {self.raw.shape}")
        self._mu, self._sig, self._rho = constrain_array(self.raw)

    @property
    def n_peds(self):
        return self.raw.shape[0]

    @property
    def horizon(self):
        return self.raw.shape[1]

    @property
    def means(self) -> np.ndarray:
        return self._mu

    @property
    def sigmas(self) -> np.ndarray:
        return self._sig

    @property
    def rhos(self) -> np.ndarray:
        return self._rho[..., 0]

    def gaussian(self, n: int, t: int) -> Gaussian5:
        return Gaussian5(self._mu[n, t, 0], self._mu[n, t, 1],
                         self._sig[n, t, 0], self._sig[n, t, 1],
                         self._rho[n, t, 0]).validate()


@dataclass
class ConverterConfig:
    channels: int = 32
    kernel: int = 5   # odd; the center tap is masked out
    t_future: int = 12


def _center_mask(kernel: int) -> np.ndarray:
    mask = np.ones(kernel)
    mask[kernel // 2] = 0.0
    return mask


def init_converter_params(cfg: ConverterConfig, rng: np.random.Generator,
                          prefix: str = "conv") -> dict[str, Tensor]:
    c, k = cfg.channels, cfg.kernel
    def w(shape, fan_in):
        return nm.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))
    return {
        f"{prefix}.w1": w((c, 2, k), 2 * k),
        f"{prefix}.b1": nm.parameter(np.zeros(c)),
        f"{prefix}.w2": w((STAT_CHANNELS, c, 1), c),
        f"{prefix}.b2": nm.parameter(np.zeros(STAT_CHANNELS)),
    }


def convert_trajectory(future, params: dict[str, Tensor],
                       prefix: str = "conv") -> Tensor:
    """Map future displacements [N, T', 2] to raw statistics [N, T', 5].

    Deterministic given parameters.  The first convolution's center tap is
    masked out, so each timestep's statistics are predicted from its
    temporal neighborhood but never from the value itself; without the
    mask the layer can learn a pass-through and the likelihood term then
    collapses every sigma to the floor, which destroys the location
    distributions that the samplers rely on.  The second layer is
    pointwise (2 -> C -> 5 channels overall).
    """
    x = future if isinstance(future, Tensor) else nm.constant(future)
    k = params[f"{prefix}.w1"].shape[2]
    w1 = nm.mul(params[f"{prefix}.w1"], nm.constant(_center_mask(k)))
    h = nm.transpose(x, (0, 2, 1))                       # [N, 2, T']
    h = nm.conv1d(h, w1, padding="same")
    h = nm.transpose(h, (0, 2, 1))                       # [N, T', C]
    h = nm.tanh(nm.add(h, params[f"{prefix}.b1"]))
    h = nm.transpose(h, (0, 2, 1))
    h = nm.conv1d(h, params[f"{prefix}.w2"], padding="same")
    h = nm.transpose(h, (0, 2, 1))                       # [N, T', 5]
    return nm.add(h, params[f"{prefix}.b2"])


# ---------------------------------------------------------------------------
# Density and sampling


def log_pdf(y, g: Gaussian5) -> float:
    """Closed-form log density of the bivariate normal at location ``y``."""
    g.validate()
    dx = (y[0] - g.mu1) / g.sigma1
    dy = (y[1] - g.mu2) / g.sigma2
    omr2 = 1.0 - g.rho * g.rho
    quad = dx * dx - 2.0 * g.rho * dx * dy + dy * dy
    return -(LOG_2PI + math.log(g.sigma1) + math.log(g.sigma2)
             + 0.5 * math.log(omr2)) - quad / (2.0 * omr2)


def log_pdf_terms(y, mu: Tensor, sigma: Tensor, rho: Tensor) -> Tensor:
    """Differentiable per-location log densities.

    ``y`` [..., 2] (constant), ``mu`` [..., 2], ``sigma`` [..., 2] positive,
    ``rho`` [..., 1] with |rho| < 1.  Returns [..., 1].
    """
    y = y if isinstance(y, Tensor) else nm.constant(y)
    d = nm.add(y, nm.mul(mu, -1.0))
    u = nm.mul(d, nm.reciprocal_positive(sigma))         # standardized residuals
    u1 = u[(Ellipsis, slice(0, 1))]
    u2 = u[(Ellipsis, slice(1, 2))]
    omr2 = nm.add(1.0, nm.mul(nm.mul(rho, rho), -1.0))   # 1 - rho^2 > 0 by cap
    quad = nm.add(nm.add(nm.mul(u1, u1), nm.mul(u2, u2)),
                  nm.mul(nm.mul(nm.mul(u1, u2), rho), -2.0))
    log_sig = nm.sum_(nm.log(sigma), axis=-1, keepdims=True)
    log_norm = nm.add(nm.add(log_sig, nm.mul(nm.log(omr2), 0.5)), LOG_2PI)
    penalty = nm.mul(nm.mul(quad, nm.reciprocal_positive(omr2)), 0.5)
    return nm.mul(nm.add(log_norm, penalty), -1.0)


def sample_location(g: Gaussian5, rng: np.random.Generator) -> tuple[float, float]:
    """Draw one location via the 2x2 Cholesky factor of the covariance."""
    g.validate()
    u, v = rng.standard_normal(2)
    x = g.mu1 + g.sigma1 * u
    y = g.mu2 + g.sigma2 * (g.rho * u + math.sqrt(1.0 - g.rho ** 2) * v)
    return x, y


def sample_field(field: StatsField, rng: np.random.Generator) -> np.ndarray:
    """One displacement trajectory per pedestrian, drawn independently per
    timestep (same Cholesky construction as ``sample_location``)."""
    mu, sig, rho = field.means, field.sigmas, field.rhos
    u = rng.standard_normal(mu.shape[:2])
    v = rng.standard_normal(mu.shape[:2])
    out = np.empty_like(mu)
    out[..., 0] = mu[..., 0] + sig[..., 0] * u
    out[..., 1] = mu[..., 1] + sig[..., 1] * (rho * u + np.sqrt(1.0 - rho ** 2) * v)
    return out


def mean_log_score(field: StatsField) -> float:
    """Log density of the field's own means: a GT-free confidence score.

    The quadratic term vanishes at the mean, leaving the (negative) log
    normalization summed over pedestrians and timesteps.
    """
    omr2 = 1.0 - field.rhos ** 2
    return float(-(LOG_2PI + np.log(field.sigmas[..., 0]) + np.log(field.sigmas[..., 1])
                   + 0.5 * np.log(omr2)).sum())


# ---------------------------------------------------------------------------
# Channel normalization (diffusion wants roughly unit-scale inputs)


@dataclass
class NormStats:
    mean: np.ndarray    # [5]
    scale: np.ndarray   # [5], strictly positive

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(STAT_CHANNELS)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(STAT_CHANNELS)
        if np.any(self.scale <= 0):
            raise ValueError("normalization scales must be strictly positive")

    @classmethod
    def identity(cls):
        return cls(np.zeros(STAT_CHANNELS), np.ones(STAT_CHANNELS))

    @classmethod
    def from_raw(cls, raw: np.ndarray):
        # the scale floor keeps near-constant channels from being amplified
        # into huge normalized values
        flat = np.asarray(raw, dtype=np.float64).reshape(-1, STAT_CHANNELS)
        std = flat.std(axis=0)
        return cls(flat.mean(axis=0), np.maximum(std, 1e-3))


def normalize_stats(raw: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(raw) - stats.mean) / stats.scale


def denormalize_stats(normed: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(normed) * stats.scale + stats.mean


def normalize_tensor(raw: Tensor, stats: NormStats) -> Tensor:
    neg_mean = nm.constant(-stats.mean)
    inv_scale = nm.constant(1.0 / stats.scale)
    return nm.mul(nm.add(raw, neg_mean), inv_scale)
