"""Per-pedestrian conditioning vectors from history and neighbors.

Two encoders with identical structure but separate parameters:

* the history encoder reads a pedestrian's own observed displacements,
* the neighbor encoder reads the masked mean of its neighbors'
  displacements per timestep (a zero sequence when it has none).

Each runs T parallel causal 1-D convolutions, keeps every feature map's
value at the final observed timestep, treats those T values as a token
sequence, mixes them with one single-head self-attention block and
projects the flattened result to the context width.  The two context
vectors concatenated form the guidance embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor


@dataclass
class GuidanceConfig:
    t_obs: int = 8
    channels: int = 32
    kernel: int = 3
    d_phi: int = 32
    d_psi: int = 32

    @property
    def d_guidance(self) -> int:
        return self.d_phi + self.d_psi


@dataclass
class GuidanceContext:
    embedding: Tensor   # [N, d_phi + d_psi]
    history: Tensor     # [N, d_phi]
    neighbors: Tensor   # [N, d_psi]


def init_encoder_params(cfg: GuidanceConfig, rng: np.random.Generator,
                        prefix: str, out_dim: int) -> dict[str, Tensor]:
    c, k, t = cfg.channels, cfg.kernel, cfg.t_obs
    def w(shape, fan_in):
        return nm.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))
    params = {}
    for j in range(t):
        params[f"{prefix}.conv{j}.w"] = w((c, 2, k), 2 * k)
        params[f"{prefix}.conv{j}.b"] = nm.parameter(np.zeros(c))
    for name in ("wq", "wk", "wv"):
        params[f"{prefix}.attn.{name}"] = w((c, c), c)
    params[f"{prefix}.proj.w"] = w((t * c, out_dim), t * c)
    params[f"{prefix}.proj.b"] = nm.parameter(np.zeros(out_dim))
    return params


def _encode_sequence(x: Tensor, params: dict[str, Tensor], prefix: str,
                     cfg: GuidanceConfig) -> Tensor:
    """Shared conv / last-step / attention / projection pipeline."""
    n, t = x.shape[0], cfg.t_obs
    xc = nm.transpose(x, (0, 2, 1))                      # [N, 2, T]
    tokens = []
    for j in range(t):
        h = nm.conv1d(xc, params[f"{prefix}.conv{j}.w"], padding="left")
        h = nm.transpose(h, (0, 2, 1))                   # [N, T, C]
        h = nm.tanh(nm.add(h, params[f"{prefix}.conv{j}.b"]))
        tokens.append(h[(slice(None), slice(t - 1, t), slice(None))])
    seq = nm.concat(tokens, axis=1)                      # [N, T, C]
    q = nm.matmul(seq, params[f"{prefix}.attn.wq"])
    k = nm.matmul(seq, params[f"{prefix}.attn.wk"])
    v = nm.matmul(seq, params[f"{prefix}.attn.wv"])
    att = nm.scaled_dot_attention(q, k, v)               # [N, T, C]
    flat = nm.reshape(att, (n, t * cfg.channels))
    return nm.add(nm.matmul(flat, params[f"{prefix}.proj.w"]),
                  params[f"{prefix}.proj.b"])


def encode_history(observed, params: dict[str, Tensor], cfg: GuidanceConfig,
                   prefix: str = "hist") -> Tensor:
    """Observed displacements [N, T, 2] -> history context [N, d_phi]."""
    x = observed if isinstance(observed, Tensor) else nm.constant(observed)
    if x.ndim != 3 or x.shape[1] != cfg.t_obs or x.shape[2] != 2:
        raise nm.NumericsError(f"expected [N, {cfg.t_obs}, 2] history, got {x.shape}")
    return _encode_sequence(x, params, prefix, cfg)


def aggregate_neighbors(observed: np.ndarray, neighbor_mask: np.ndarray) -> np.ndarray:
    """Masked mean of neighbor displacements per pedestrian and timestep.

    Pedestrians without neighbors get the all-zero sequence.  Parameter
    free, so it runs in plain numpy ahead of the encoder.
    """
    mask = np.asarray(neighbor_mask, dtype=np.float64)
    if mask.shape[0] != mask.shape[1] or np.any(np.diag(mask) != 0):
        raise ValueError("neighbor mask must be square with a false diagonal")
    counts = mask.sum(axis=1, keepdims=True)             # [N, 1]
    summed = np.einsum("ij,jtc->itc", mask, np.asarray(observed, dtype=np.float64))
    return summed / np.maximum(counts[:, :, None], 1.0)


def encode_neighbors(observed, neighbor_mask, params: dict[str, Tensor],
                     cfg: GuidanceConfig, prefix: str = "nbr") -> Tensor:
    """Aggregated neighbor features [N, T, 2] -> neighbor context [N, d_psi]."""
    agg = aggregate_neighbors(np.asarray(observed.data if isinstance(observed, Tensor)
                                         else observed), neighbor_mask)
    return _encode_sequence(nm.constant(agg), params, prefix, cfg)


def build_guidance(history: Tensor, neighbors: Tensor) -> GuidanceContext:
    """Concatenate the two context vectors along the feature axis."""
    if history.shape[0] != neighbors.shape[0]:
        raise nm.NumericsError(
            f"pedestrian counts differ: {history.shape[0]} vs {neighbors.shape[0]}")
    return GuidanceContext(nm.concat([history, neighbors], axis=1), history, neighbors)


def init_guidance_params(cfg: GuidanceConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = init_encoder_params(cfg, rng, "hist", cfg.d_phi)
    params.update(init_encoder_params(cfg, rng, "nbr", cfg.d_psi))
    return params


def encode_windows(windows, params: dict[str, Tensor], cfg: GuidanceConfig) -> GuidanceContext:
    """Encode several windows in one batched pass.

    Pedestrian rows are concatenated across windows (neighbor aggregation
    happens per window, everything learned is per pedestrian).  Row order
    follows the window order.
    """
    obs = np.concatenate([np.asarray(w.observed) for w in windows], axis=0)
    agg = np.concatenate(
        [aggregate_neighbors(w.observed, w.neighbor_mask) for w in windows], axis=0)
    hist = encode_history(obs, params, cfg)
    nbr = _encode_sequence(nm.constant(agg), params, "nbr", cfg)
    return build_guidance(hist, nbr)
