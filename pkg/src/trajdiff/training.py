"""Joint optimization of the encoders, converter and denoiser.

The objective is a weighted sum of three terms:

* noise-matching: squared error between the denoiser's prediction and the
  noise actually mixed into the normalized statistics (one uniformly drawn
  execution step per window),
* likelihood: negative log density of the ground-truth future
  displacements under the converter's per-timestep Gaussians,
* consistency: squared error between the first predicted mean and the
  first ground-truth future displacement.

Training is deterministic for a fixed seed: every stochastic choice is
drawn from a generator derived from (seed, purpose, step), so a run can be
resumed from a checkpoint bit-exactly.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .distribution import normalize_tensor, NormStats
from .model import Model, ModelConfig
from .numerics import NumericsError, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lambda_diffusion: float = 1.0
    lambda_likelihood: float = 1.0
    lambda_consistency: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    grad_clip: float = 5.0
    checkpoint_every: int = 500
    # Step at which channel normalization freezes.  The converter's output
    # distribution drifts sharply while its regression converges; freezing
    # too early leaves the noise-matching loss on wildly mis-scaled inputs.
    # Until this step the statistics are recomputed over the training set
    # every step; None picks min(500, total/4).
    norm_freeze_step: int | None = None
    # Extra denoiser-only updates per joint step, reusing the joint pass's
    # guidance and statistics with fresh step/noise draws.  The denoiser is
    # by far the slowest learner of the four modules and these updates cost
    # a few matmuls each, no encoder work.
    denoiser_boost: int = 3

    def validate(self):
        lams = (self.lambda_diffusion, self.lambda_likelihood, self.lambda_consistency)
        if any(l < 0 for l in lams) or not any(l > 0 for l in lams):
            raise ValueError("loss weights must be non-negative and not all zero")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        return self


# ---------------------------------------------------------------------------
# Loss components


def loss_diffusion(y0_norm: Tensor, guidance_emb: Tensor, ks: np.ndarray,
                   eps: np.ndarray, schedule, params, denoiser_cfg,
                   denoiser=None) -> Tensor:
    """Per-element mean squared error between predicted and drawn noise.

    ``ks`` holds one schedule step per pedestrian row (rows from the same
    window share their step); ``eps`` is the standard normal draw.  The
    noisy state is sqrt(a_k) y0 + sqrt(1 - a_k) eps with per-row
    coefficients.  ``denoiser`` may be swapped out for a stub in tests.
    """
    from .diffusion import denoiser_apply
    a = schedule.alpha[np.asarray(ks, dtype=np.int64)]
    c0 = np.sqrt(a)[:, None, None]
    c1 = np.sqrt(1.0 - a)[:, None, None]
    shape = y0_norm.shape
    eps_t = nm.constant(eps)
    noisy = nm.add(nm.mul(y0_norm, nm.constant(np.broadcast_to(c0, shape).copy())),
                   nm.mul(eps_t, nm.constant(np.broadcast_to(c1, shape).copy())))
    apply_fn = denoiser or denoiser_apply
    pred = apply_fn(noisy, ks, guidance_emb, params, denoiser_cfg, schedule)
    diff = nm.add(pred, nm.mul(eps_t, -1.0))
    return nm.mean(nm.mul(diff, diff))


def loss_likelihood(future, raw_stats: Tensor, n_windows: int = 1) -> Tensor:
    """Negative Gaussian log likelihood of the true future displacements,
    summed over pedestrians and timesteps, averaged over batch windows."""
    from .distribution import constrain_tensors, log_pdf_terms
    mu, sig, rho = constrain_tensors(raw_stats)
    terms = log_pdf_terms(future, mu, sig, rho)
    return nm.mul(nm.sum_(terms), -1.0 / n_windows)


def loss_consistency(future, raw_stats: Tensor) -> Tensor:
    """Squared error between the first predicted mean and the first true
    displacement, averaged over pedestrians."""
    fut = future if isinstance(future, Tensor) else nm.constant(future)
    mu_first = raw_stats[(slice(None), slice(0, 1), slice(0, 2))]
    gt_first = fut[(slice(None), slice(0, 1), slice(None))]
    d = nm.add(gt_first, nm.mul(mu_first, -1.0))
    return nm.mean(nm.sum_(nm.mul(d, d), axis=2))


def draw_step_noise(window_sizes, schedule, rng, t_future: int, channels: int = 5):
    """One uniform tau step per window plus the matching noise tensor."""
    ks = []
    for n in window_sizes:
        k = int(schedule.tau[rng.integers(0, len(schedule.tau))])
        ks.extend([k] * n)
    total = int(sum(window_sizes))
    eps = rng.standard_normal((total, t_future, channels))
    return np.asarray(ks, dtype=np.int64), eps


# ---------------------------------------------------------------------------
# Optimizer


class AdamState:
    """First-order adaptive-moment optimizer state, checkpointable."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.t], dtype=np.int64)}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    @classmethod
    def from_arrays(cls, params, arrays):
        state = cls(params)
        state.t = int(arrays["adam.t"][0])
        for k in state.m:
            state.m[k] = arrays[f"adam.m.{k}"].copy()
            state.v[k] = arrays[f"adam.v.{k}"].copy()
        return state


def adam_update(params: dict[str, Tensor], grads: dict[str, Tensor],
                state: AdamState, lr: float, clip: float) -> dict[str, Tensor]:
    gnorm = math.sqrt(sum(float((g.data.astype(np.float64) ** 2).sum())
                          for g in grads.values()))
    scale = 1.0 if gnorm <= clip or gnorm == 0.0 else clip / gnorm
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    new_params = {}
    for k, p in params.items():
        g = grads[k].data * scale
        state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * (g * g)
        step = lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + ADAM_EPS)
        new_params[k] = nm.parameter(p.data - step)
    return new_params


# ---------------------------------------------------------------------------
# Steps and epochs


def batch_losses(batch, model: Model, rng: np.random.Generator,
                 weights=(1.0, 1.0, 1.0)):
    """Forward pass over a batch of windows; returns (total, parts, cache)."""
    ctx = model.encode(batch)
    fut = nm.constant(np.concatenate([w.future for w in batch], axis=0))
    raw = model.convert(fut)
    l_llh = loss_likelihood(fut, raw, n_windows=len(batch))
    l_con = loss_consistency(fut, raw)
    y0n = normalize_tensor(raw, model.norm)
    ks, eps = draw_step_noise([w.n_peds for w in batch], model.schedule, rng,
                              model.config.t_future)
    l_diff = loss_diffusion(y0n, ctx.embedding, ks, eps, model.schedule,
                            model.params, model.config.denoiser_config())
    w1, w2, w3 = weights
    total = nm.add(nm.add(nm.mul(l_diff, w1), nm.mul(l_llh, w2)), nm.mul(l_con, w3))
    parts = {"diffusion": l_diff.item(), "likelihood": l_llh.item(),
             "consistency": l_con.item()}
    cache = {"guidance": ctx.embedding.data.copy(), "y0n": y0n.data.copy(),
             "sizes": [w.n_peds for w in batch]}
    return total, parts, cache


def _boost_denoiser(cache, model: Model, cfg: TrainConfig, opt: AdamState,
                    rng: np.random.Generator) -> None:
    """Denoiser-only refresh updates on the cached batch features.

    The denoiser has the weakest per-step learning signal of the four
    modules (the conditional part of the noise target is heavily
    down-weighted at noisy steps), so it gets extra draws on features the
    joint pass already computed.
    """
    den = {k: p for k, p in model.params.items() if k.startswith("den.")}
    for _ in range(cfg.denoiser_boost):
        ks, eps = draw_step_noise(cache["sizes"], model.schedule, rng,
                                  model.config.t_future)
        with nm.ComputationRecord():
            loss = loss_diffusion(nm.constant(cache["y0n"]),
                                  nm.constant(cache["guidance"]), ks, eps,
                                  model.schedule, den,
                                  model.config.denoiser_config())
        grads = nm.backward(loss, den)
        den = adam_update(den, grads, opt, cfg.learning_rate, cfg.grad_clip)
    model.params.update(den)


def train_step(batch, model: Model, cfg: TrainConfig, opt: AdamState,
               rng: np.random.Generator) -> dict:
    """One joint optimization step plus the denoiser refreshes; mutates
    model.params and the Adam state."""
    weights = (cfg.lambda_diffusion, cfg.lambda_likelihood, cfg.lambda_consistency)
    try:
        with nm.ComputationRecord():
            total, parts, cache = batch_losses(batch, model, rng, weights)
        grads = nm.backward(total, model.params)
        model.params = adam_update(model.params, grads, opt, cfg.learning_rate,
                                   cfg.grad_clip)
        if cfg.denoiser_boost > 0 and cfg.lambda_diffusion > 0:
            _boost_denoiser(cache, model, cfg, opt, rng)
    except NumericsError as exc:
        raise NumericsError(f"training aborted at optimizer step {opt.t + 1}: {exc}") from exc
    parts["total"] = total.item()
    return parts


def freeze_normalization(model: Model, windows, chunk: int = 64) -> NormStats:
    """Channel statistics of the converter's raw output over the training
    set with the current parameters.  ``fit`` recomputes these every step
    while the converter is still moving, then keeps the last value."""
    raws = []
    for i in range(0, len(windows), chunk):
        fut = np.concatenate([w.future for w in windows[i:i + chunk]], axis=0)
        raws.append(model.convert(fut).data)
    return NormStats.from_raw(np.concatenate(raws, axis=0))


LOG_COLUMNS = ("step", "total", "diffusion", "likelihood", "consistency", "wall_ms")


def fit(windows, train_cfg: TrainConfig, model_cfg: ModelConfig | None = None,
        out_dir: str = "runs", resume_from=None, log_name: str = "training_log.csv"):
    """Epoch loop with shuffled batches, periodic checkpoints and a CSV log.

    Returns (final checkpoint path, log rows).  ``resume_from`` restarts
    from a mid-training checkpoint and matches the straight-through run
    exactly under the same seed policy.
    """
    train_cfg.validate()
    if not windows:
        raise ValueError("training dataset is empty")
    os.makedirs(out_dir, exist_ok=True)

    if resume_from is not None:
        mdl, meta, rest = Model.load(resume_from)
        opt = AdamState.from_arrays(mdl.params, rest)
        start_step = int(meta["train_step"])
    else:
        mdl = Model.initialize(model_cfg or ModelConfig(), train_cfg.seed)
        mdl.norm = freeze_normalization(mdl, windows)
        opt = AdamState(mdl.params)
        start_step = 0

    spe = max(1, math.ceil(len(windows) / train_cfg.batch_size))
    total_steps = spe * train_cfg.epochs
    freeze_at = train_cfg.norm_freeze_step
    if freeze_at is None:
        freeze_at = min(500, max(1, total_steps // 4))
    log_path = os.path.join(out_dir, log_name)
    log_rows = []
    order = None

    mode = "a" if resume_from is not None and os.path.exists(log_path) else "w"
    with open(log_path, mode, encoding="utf-8") as log:
        if mode == "w":
            log.write(f"# seed: {train_cfg.seed}\n")
            log.write(f"# config: batch={train_cfg.batch_size} "
                      f"lr={train_cfg.learning_rate} "
                      f"lambdas=({train_cfg.lambda_diffusion},"
                      f"{train_cfg.lambda_likelihood},"
                      f"{train_cfg.lambda_consistency}) "
                      f"boost={train_cfg.denoiser_boost} "
                      f"params={mdl.n_parameters()}\n")
            log.write(",".join(LOG_COLUMNS) + "\n")
        for step in range(start_step, total_steps):
            epoch, pos = divmod(step, spe)
            if pos == 0 or order is None:
                order = np.random.default_rng([train_cfg.seed, 7, epoch]).permutation(
                    len(windows))
            idx = order[pos * train_cfg.batch_size:(pos + 1) * train_cfg.batch_size]
            batch = [windows[i] for i in idx]
            if step < freeze_at:
                mdl.norm = freeze_normalization(mdl, windows)
            rng = np.random.default_rng([train_cfg.seed, 11, step])
            t0 = time.perf_counter()
            parts = train_step(batch, mdl, train_cfg, opt, rng)
            ms = (time.perf_counter() - t0) * 1000.0
            row = (step + 1, parts["total"], parts["diffusion"],
                   parts["likelihood"], parts["consistency"], ms)
            log_rows.append(row)
            log.write("{},{:.6f},{:.6f},{:.6f},{:.6f},{:.3f}\n".format(*row))
            done = step + 1
            if done % train_cfg.checkpoint_every == 0 and done < total_steps:
                mdl.save(os.path.join(out_dir, f"ckpt_{done:06d}.tjdf"),
                         extra_meta={"train_step": done},
                         extra_arrays=opt.arrays())

    final_path = os.path.join(out_dir, "model.tjdf")
    mdl.save(final_path, extra_meta={"train_step": total_steps},
             extra_arrays=opt.arrays())
    return final_path, log_rows
