"""Bundle of everything a trained predictor needs: parameters for the two
guidance encoders, the distribution converter and the denoiser, plus the
diffusion schedule and the frozen channel normalization.

Checkpoints serialize the whole bundle through the binary container, so a
loaded model never recomputes schedule constants from configuration.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint, diffusion, distribution, guidance
from . import numerics as nm
from .numerics import Tensor


@dataclass
class ModelConfig:
    t_obs: int = 8
    t_future: int = 12
    conv_channels: int = 32
    kernel: int = 3
    d_phi: int = 32
    d_psi: int = 32
    denoiser_width: int = 128
    denoiser_blocks: int = 3
    step_dim: int = 32
    neighbor_radius: float = 5.0
    k_total: int = 200
    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.05
    gamma_mode: str = "deterministic"

    def guidance_config(self) -> guidance.GuidanceConfig:
        return guidance.GuidanceConfig(self.t_obs, self.conv_channels, self.kernel,
                                       self.d_phi, self.d_psi)

    def converter_config(self) -> distribution.ConverterConfig:
        return distribution.ConverterConfig(self.conv_channels, self.kernel,
                                            self.t_future)

    def denoiser_config(self) -> diffusion.DenoiserConfig:
        return diffusion.DenoiserConfig(self.t_future, self.d_phi + self.d_psi,
                                        self.denoiser_width, self.denoiser_blocks,
                                        self.step_dim)


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 schedule: diffusion.Schedule,
                 norm: distribution.NormStats | None = None):
        self.config = config
        self.params = params
        self.schedule = schedule
        self.norm = norm or distribution.NormStats.identity()

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "Model":
        rng = np.random.default_rng([seed, 0xA11CE])
        params = guidance.init_guidance_params(config.guidance_config(), rng)
        params.update(distribution.init_converter_params(config.converter_config(), rng))
        params.update(diffusion.init_denoiser_params(config.denoiser_config(), rng))
        schedule = diffusion.build_schedule(config.k_total, config.beta_start,
                                            config.beta_end, config.steps,
                                            config.gamma_mode)
        return cls(config, params, schedule)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def encode(self, windows) -> guidance.GuidanceContext:
        return guidance.encode_windows(windows, self.params, self.config.guidance_config())

    def convert(self, future) -> Tensor:
        return distribution.convert_trajectory(future, self.params)

    def generate(self, windows, rng: np.random.Generator, n_runs: int = 1,
                 steps: int | None = None,
                 chain_rng: np.random.Generator | None = None):
        """Reverse-generate statistics fields for the given windows.

        Returns a list of runs; each run is one StatsField covering the
        concatenated pedestrian rows of ``windows``.
        """
        ctx = self.encode(windows)
        sched = self.schedule if steps is None else self.schedule.with_steps(steps)
        return diffusion.reverse_generate(ctx, sched, self.params,
                                          self.config.denoiser_config(), self.norm,
                                          rng, n_runs=n_runs, chain_rng=chain_rng)

    # -- persistence --------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None,
             extra_arrays: dict[str, np.ndarray] | None = None) -> None:
        meta = {
            "kind": "model",
            "config": asdict(self.config),
            "norm_mean": self.norm.mean.tolist(),
            "norm_scale": self.norm.scale.tolist(),
        }
        if extra_meta:
            meta.update(extra_meta)
        arrays = {f"param.{name}": p.data for name, p in self.params.items()}
        arrays.update(self.schedule.arrays())
        if extra_arrays:
            arrays.update(extra_arrays)
        checkpoint.save_container(path, meta, arrays)

    @classmethod
    def load(cls, path) -> tuple["Model", dict, dict[str, np.ndarray]]:
        """Load a checkpoint; returns (model, metadata, leftover arrays)."""
        meta, arrays = checkpoint.load_container(path)
        if meta.get("kind") != "model":
            raise checkpoint.ContainerError(f"{path} is not a model checkpoint")
        config = ModelConfig(**meta["config"])
        params = {}
        rest = {}
        for name, arr in arrays.items():
            if name.startswith("param."):
                params[name[len("param."):]] = nm.parameter(arr)
            else:
                rest[name] = arr
        schedule = diffusion.Schedule(
            config.k_total, rest.pop("schedule.alpha"), rest.pop("schedule.gamma"),
            rest.pop("schedule.tau"), config.beta_start, config.beta_end,
            config.gamma_mode)
        norm = distribution.NormStats(np.array(meta["norm_mean"]),
                                      np.array(meta["norm_scale"]))
        return cls(config, params, schedule, norm), meta, rest
