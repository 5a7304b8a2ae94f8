"""Distributional diffusion: schedule, forward marginal, denoiser, reverse chain.

States are arrays [N, T', 5] of normalized raw statistics.  The forward
marginal perturbs clean statistics with Gaussian noise scaled by a strictly
decreasing cumulative-alpha schedule; generation runs the learned reverse
transitions down an execution sub-sequence ``tau`` of the K Markovian
steps, optionally injecting per-step noise ``gamma`` (0 gives a fully
deterministic chain; the ddpm-matching value reproduces the stochastic
Markovian sampler).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import NumericsError, Tensor
from .distribution import STAT_CHANNELS, NormStats, StatsField, denormalize_stats

GAMMA_MODES = ("deterministic", "ddpm-matching")


@dataclass
class Schedule:
    """Diffusion constants.

    ``alpha`` has length K+1 with alpha[0] = 1 (cumulative product of the
    per-step survival rates), ``gamma`` holds the adjacent-step
    stochasticity values, ``tau`` the S execution steps ending at K.
    """

    K: int
    alpha: np.ndarray
    gamma: np.ndarray
    tau: np.ndarray
    beta_start: float
    beta_end: float
    gamma_mode: str = "deterministic"

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.tau = np.asarray(self.tau, dtype=np.int64)
        self.validate()

    @property
    def steps(self) -> int:
        return len(self.tau)

    def validate(self):
        if self.gamma_mode not in GAMMA_MODES:
            raise NumericsError(f"unknown gamma mode {self.gamma_mode!r}")
        if len(self.alpha) != self.K + 1 or self.alpha[0] != 1.0:
            raise NumericsError("alpha must have length K+1 with alpha[0] = 1")
        if np.any(np.diff(self.alpha) >= 0) or np.any(self.alpha <= 0):
            raise NumericsError("alpha must be strictly decreasing within (0, 1]")
        if self.alpha[self.K] >= 0.05:
            # short test chains legitimately end above the target; warn only
            warnings.warn(f"alpha[K] = {self.alpha[self.K]:.4f}; the final state "
                          "is far from standard noise", RuntimeWarning, stacklevel=2)
        if len(self.gamma) != self.K or np.any(self.gamma < 0):
            raise NumericsError("gamma must be length K and non-negative")
        if np.any(self.gamma[1:] ** 2 > (1.0 - self.alpha[:-1])[1:] + 1e-12):
            raise NumericsError("gamma_k^2 must not exceed 1 - alpha[k-1]")
        if self.gamma[0] != 0.0:
            raise NumericsError("gamma at the final denoise step must be 0")
        if (len(self.tau) == 0 or self.tau[-1] != self.K or self.tau[0] < 1
                or np.any(np.diff(self.tau) <= 0)):
            raise NumericsError("tau must strictly increase within 1..K and end at K")

    def with_steps(self, s: int) -> "Schedule":
        """Same constants, re-strided execution sub-sequence of length s."""
        return Schedule(self.K, self.alpha, self.gamma, _even_tau(self.K, s),
                        self.beta_start, self.beta_end, self.gamma_mode)

    def arrays(self, prefix: str = "schedule") -> dict[str, np.ndarray]:
        return {f"{prefix}.alpha": self.alpha, f"{prefix}.gamma": self.gamma,
                f"{prefix}.tau": self.tau}


def _even_tau(k_total: int, s: int) -> np.ndarray:
    if not 1 <= s <= k_total:
        raise NumericsError(f"need 1 <= S <= K, got S={s}, K={k_total}")
    return np.array(sorted({round(j * k_total / s) for j in range(1, s + 1)}),
                    dtype=np.int64)


def build_schedule(k_total: int, beta_start: float = 1e-4, beta_end: float = 0.05,
                   steps: int | None = None,
                   gamma_mode: str = "deterministic") -> Schedule:
    """Linear-beta schedule with an evenly spaced execution sub-sequence.

    ``gamma_mode='deterministic'`` zeroes the reverse-transition noise;
    ``'ddpm-matching'`` stores the variance-preserving values that make the
    adjacent-step reverse chain match the Markovian sampler.
    """
    if not (0.0 < beta_start < beta_end < 1.0):
        raise NumericsError("need 0 < beta_start < beta_end < 1")
    betas = np.linspace(beta_start, beta_end, k_total)
    alpha = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    if gamma_mode == "deterministic":
        gamma = np.zeros(k_total)
    else:
        prev, cur = alpha[:-1], alpha[1:]
        gamma = np.sqrt((1.0 - prev) / (1.0 - cur) * (1.0 - cur / prev))
    tau = _even_tau(k_total, k_total if steps is None else steps)
    return Schedule(k_total, alpha, gamma, tau, beta_start, beta_end, gamma_mode)


@dataclass
class NoisySample:
    value: np.ndarray | Tensor
    step: int

    def __post_init__(self):
        if not 0 <= self.step:
            raise NumericsError(f"step {self.step} out of range")


def forward_marginal(y0, k: int, epsilon, schedule: Schedule) -> NoisySample:
    """Closed-form noisy state sqrt(a_k) y0 + sqrt(1 - a_k) eps at step k.

    Works on plain arrays or on tensors (the coefficients are schedule
    constants either way).
    """
    if k < 0 or k > schedule.K:
        raise NumericsError(f"step {k} outside schedule 0..{schedule.K}")
    a = float(schedule.alpha[k])
    c0, c1 = math.sqrt(a), math.sqrt(1.0 - a)
    if isinstance(y0, Tensor) or isinstance(epsilon, Tensor):
        y0 = y0 if isinstance(y0, Tensor) else nm.constant(y0)
        epsilon = epsilon if isinstance(epsilon, Tensor) else nm.constant(epsilon)
        if y0.shape != epsilon.shape:
            raise NumericsError(f"noise shape {epsilon.shape} != state shape {y0.shape}")
        value = nm.add(nm.mul(y0, c0), nm.mul(epsilon, c1))
    else:
        y0 = np.asarray(y0, dtype=np.float64)
        epsilon = np.asarray(epsilon, dtype=np.float64)
        if y0.shape != epsilon.shape:
            raise NumericsError(f"noise shape {epsilon.shape} != state shape {y0.shape}")
        value = c0 * y0 + c1 * epsilon
    return NoisySample(value, k)


# ---------------------------------------------------------------------------
# Denoiser


@dataclass
class DenoiserConfig:
    t_future: int = 12
    guidance_dim: int = 64
    width: int = 128
    blocks: int = 3
    step_dim: int = 32

    @property
    def state_dim(self) -> int:
        return self.t_future * STAT_CHANNELS

    @property
    def in_dim(self) -> int:
        return self.state_dim + self.step_dim + self.guidance_dim


def init_denoiser_params(cfg: DenoiserConfig, rng: np.random.Generator,
                         prefix: str = "den") -> dict[str, Tensor]:
    def w(shape, fan_in):
        return nm.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))
    params = {
        f"{prefix}.in.w": w((cfg.in_dim, cfg.width), cfg.in_dim),
        f"{prefix}.in.b": nm.parameter(np.zeros(cfg.width)),
        f"{prefix}.out.w": w((cfg.width, cfg.state_dim), cfg.width),
        f"{prefix}.out.b": nm.parameter(np.zeros(cfg.state_dim)),
        # linear shortcut input -> output: the noise estimate is dominated
        # by a linear function of the state at high noise levels, which the
        # bounded tanh stack is slow to express on its own
        f"{prefix}.skip.w": nm.parameter(np.zeros((cfg.in_dim, cfg.state_dim))),
    }
    for i in range(cfg.blocks):
        params[f"{prefix}.blk{i}.w1"] = w((cfg.width, cfg.width), cfg.width)
        params[f"{prefix}.blk{i}.b1"] = nm.parameter(np.zeros(cfg.width))
        params[f"{prefix}.blk{i}.w2"] = w((cfg.width, cfg.width), cfg.width)
        params[f"{prefix}.blk{i}.b2"] = nm.parameter(np.zeros(cfg.width))
    return params


def step_embedding(ks, dim: int) -> np.ndarray:
    """Sinusoidal embedding of diffusion step indices; [len(ks), dim]."""
    ks = np.atleast_1d(np.asarray(ks, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = ks[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def denoiser_apply(state, ks, guidance, params: dict[str, Tensor],
                   cfg: DenoiserConfig, schedule: Schedule,
                   prefix: str = "den") -> Tensor:
    """Predict the noise component of ``state`` conditioned on step and guidance.

    ``state`` is [N, T', 5] (array, tensor or NoisySample), ``ks`` one step
    index or one per pedestrian row, ``guidance`` [N, guidance_dim].  Rows
    are independent: per pedestrian the state is flattened, concatenated
    with its step embedding and guidance vector, and pushed through a
    residual stack with a linear input-to-output shortcut.

    Internally the network estimates the clean state; the noise estimate is
    then read off the forward-marginal relation,

        eps_hat = (y_k - sqrt(a_k) clean_hat) / sqrt(1 - a_k),

    which keeps the network's output at unit scale instead of asking it to
    reproduce the badly conditioned per-step gain itself.
    """
    if isinstance(state, NoisySample):
        if np.isscalar(ks) and state.step != ks:
            raise NumericsError("NoisySample step disagrees with ks")
        state = state.value
    x = state if isinstance(state, Tensor) else nm.constant(state)
    g = guidance if isinstance(guidance, Tensor) else nm.constant(guidance)
    n = x.shape[0]
    if g.shape[0] != n:
        raise NumericsError(f"guidance rows {g.shape[0]} != state rows {n}")
    if x.shape[1] != cfg.t_future or x.shape[2] != STAT_CHANNELS:
        raise NumericsError(f"state shape {x.shape} does not match config")
    ks_arr = np.full(n, ks, dtype=np.int64) if np.isscalar(ks) else np.asarray(ks)
    if np.any(ks_arr < 1) or np.any(ks_arr > schedule.K):
        raise NumericsError("denoiser steps must lie in 1..K")
    emb = nm.constant(step_embedding(ks_arr, cfg.step_dim))
    flat = nm.reshape(x, (n, cfg.state_dim))
    x_in = nm.concat([flat, emb, g], axis=1)
    h = nm.tanh(nm.add(nm.matmul(x_in, params[f"{prefix}.in.w"]),
                       params[f"{prefix}.in.b"]))
    for i in range(cfg.blocks):
        r = nm.tanh(nm.add(nm.matmul(h, params[f"{prefix}.blk{i}.w1"]),
                           params[f"{prefix}.blk{i}.b1"]))
        r = nm.add(nm.matmul(r, params[f"{prefix}.blk{i}.w2"]),
                   params[f"{prefix}.blk{i}.b2"])
        h = nm.add(h, r)
    clean = nm.add(nm.add(nm.matmul(h, params[f"{prefix}.out.w"]),
                          nm.matmul(x_in, params[f"{prefix}.skip.w"])),
                   params[f"{prefix}.out.b"])
    a = schedule.alpha[ks_arr]
    gain = nm.constant(np.broadcast_to(
        (1.0 / np.sqrt(1.0 - a))[:, None], (n, cfg.state_dim)).copy())
    pull = nm.constant(np.broadcast_to(
        (-np.sqrt(a) / np.sqrt(1.0 - a))[:, None], (n, cfg.state_dim)).copy())
    eps_hat = nm.add(nm.mul(flat, gain), nm.mul(clean, pull))
    return nm.reshape(eps_hat, (n, cfg.t_future, STAT_CHANNELS))


# ---------------------------------------------------------------------------
# Reverse transitions


def effective_gamma(schedule: Schedule, k_from: int, k_to: int) -> float:
    """Stochasticity for the (k_from -> k_to) jump under the schedule's mode."""
    if schedule.gamma_mode == "deterministic":
        return 0.0
    a_from, a_to = schedule.alpha[k_from], schedule.alpha[k_to]
    return math.sqrt((1.0 - a_to) / (1.0 - a_from) * (1.0 - a_from / a_to))


def posterior_mean(y_k: np.ndarray, y0_hat: np.ndarray, a_from: float,
                   a_to: float, gamma: float) -> np.ndarray:
    """Mean of the reverse transition given a clean-state reconstruction:

    sqrt(a_to) y0_hat
        + sqrt(1 - a_to - gamma^2) (y_k - sqrt(a_from) y0_hat) / sqrt(1 - a_from)

    Degenerate cases: equal alphas with gamma 0 return y_k unchanged, and
    a_to = 1 returns y0_hat exactly.
    """
    if gamma * gamma > 1.0 - a_to + 1e-9:
        raise NumericsError(f"gamma^2 = {gamma * gamma:.5f} exceeds 1 - alpha[k_to]")
    direction = (np.asarray(y_k) - math.sqrt(a_from) * np.asarray(y0_hat))
    direction = direction / math.sqrt(1.0 - a_from)
    return (math.sqrt(a_to) * np.asarray(y0_hat)
            + math.sqrt(max(1.0 - a_to - gamma * gamma, 0.0)) * direction)


def posterior_step(y_k: np.ndarray, y0_hat: np.ndarray, k_from: int, k_to: int,
                   schedule: Schedule, rng: np.random.Generator | None = None,
                   gamma: float | None = None) -> np.ndarray:
    """One reverse transition conditioned on the clean-state reconstruction.

    The output is ``posterior_mean`` plus gamma-scaled standard normal noise
    when gamma > 0.  ``gamma`` defaults to the schedule's mode-derived value
    for this jump.
    """
    if not 0 <= k_to < k_from <= schedule.K:
        raise NumericsError(f"invalid transition {k_from} -> {k_to}")
    y_k = np.asarray(y_k, dtype=np.float64)
    y0_hat = np.asarray(y0_hat, dtype=np.float64)
    if y_k.shape != y0_hat.shape:
        raise NumericsError("state and reconstruction shapes differ")
    a_from, a_to = float(schedule.alpha[k_from]), float(schedule.alpha[k_to])
    if gamma is None:
        gamma = effective_gamma(schedule, k_from, k_to)
    out = posterior_mean(y_k, y0_hat, a_from, a_to, gamma)
    if gamma > 0.0:
        if rng is None:
            raise NumericsError("stochastic transition needs an rng")
        out = out + gamma * rng.standard_normal(out.shape)
    return out


def reconstruct_clean(y_k: np.ndarray, eps_hat: np.ndarray, k: int,
                      schedule: Schedule) -> np.ndarray:
    """Invert the forward marginal given a noise estimate at step k."""
    a = float(schedule.alpha[k])
    return (np.asarray(y_k) - math.sqrt(1.0 - a) * np.asarray(eps_hat)) / math.sqrt(a)


def reverse_generate(guidance, schedule: Schedule, params: dict[str, Tensor],
                     cfg: DenoiserConfig, norm: NormStats,
                     rng: np.random.Generator, n_runs: int = 1,
                     chain_rng: np.random.Generator | None = None) -> list[StatsField]:
    """Run the reverse chain down ``tau`` and return one field per run.

    ``rng`` drives the initial noise draws, so with gamma = 0 the output is
    a deterministic function of (rng state, guidance, parameters).  When
    the schedule is stochastic the in-chain noise comes from ``chain_rng``,
    which defaults to a fresh entropy-seeded generator: stochastic-chain
    runs are not reproducible unless a chain rng is pinned.
    """
    if n_runs < 1:
        raise NumericsError("n_runs must be >= 1")
    emb = guidance.embedding if hasattr(guidance, "embedding") else guidance
    emb_data = emb.data if isinstance(emb, Tensor) else np.asarray(emb)
    n = emb_data.shape[0]
    stochastic = schedule.gamma_mode != "deterministic"
    if stochastic and chain_rng is None:
        chain_rng = np.random.default_rng()
    tau = schedule.tau
    targets = np.concatenate([tau[:-1][::-1], [0]])
    fields = []
    for _ in range(n_runs):
        y = rng.standard_normal((n, cfg.t_future, STAT_CHANNELS))
        for k_from, k_to in zip(tau[::-1], targets):
            try:
                eps_hat = denoiser_apply(y, int(k_from), emb_data, params, cfg,
                                         schedule).data
                y0_hat = reconstruct_clean(y, eps_hat, int(k_from), schedule)
                y = posterior_step(y, y0_hat, int(k_from), int(k_to), schedule,
                                   rng=chain_rng)
            except NumericsError as exc:
                raise NumericsError(f"reverse chain failed at step {int(k_from)}: {exc}") from exc
            if not np.all(np.isfinite(y)):
                raise NumericsError(f"non-finite state after step {int(k_from)}")
        fields.append(StatsField(denormalize_stats(y, norm)))
    return fields
