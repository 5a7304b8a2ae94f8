"""Hybrid sampling strategies and Best-of-N displacement-error evaluation.

Candidate futures come from two noise sources: the initial draw of each
reverse-diffusion run, and the explicit per-timestep Gaussians of a
generated statistics field.  Three strategies cover the combinations:

    A   r1 reverse runs, pick the best field, then r2 Gaussian draws
        plus that field's mean trajectory
    B   r independent reverse runs, one Gaussian draw from each
    C   one reverse run, r Gaussian draws

Selection for A is either ``gt-ade`` (argmin mean-trajectory ADE against
the ground truth, standard Best-of-N practice) or ``self-likelihood``
(argmax of the field's own mean log score, usable without ground truth).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import distribution
from .model import Model

SELECTIONS = ("gt-ade", "self-likelihood")


@dataclass
class SamplingStrategy:
    kind: str = "A"              # A, B or C
    r1: int = 10                 # reverse runs (A)
    r2: int = 10                 # Gaussian draws from the selected field (A)
    r: int = 20                  # runs (B) or draws (C)
    pool_run_means: bool = False  # A only: also keep every run's mean trajectory
    max_candidates: int | None = None

    def validate(self):
        if self.kind not in ("A", "B", "C"):
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind == "A" and (self.r1 < 1 or self.r2 < 0):
            raise ValueError("strategy A needs r1 >= 1 and r2 >= 0")
        if self.kind in ("B", "C") and self.r < 1:
            raise ValueError("strategies B/C need r >= 1")
        return self


@dataclass
class PredictionSet:
    """Candidate absolute trajectories [N, M, T', 2] plus their provenance:
    one (diffusion_run_index, gaussian_draw_index or 'mean') pair per
    candidate."""

    candidates: np.ndarray
    provenance: list[tuple[int, object]] = field(default_factory=list)

    def __post_init__(self):
        if self.candidates.ndim != 4 or self.candidates.shape[1] < 1:
            raise ValueError(f"candidates must be [N, M>=1, T', 2], got {self.candidates.shape}")
        if not np.all(np.isfinite(self.candidates)):
            raise ValueError("non-finite candidate trajectory")

    @property
    def n_candidates(self) -> int:
        return self.candidates.shape[1]


def ade(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance over timesteps, in meters."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"trajectory shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred: np.ndarray, gt: np.ndarray) -> float:
    """Euclidean distance at the final timestep, in meters."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"trajectory shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def select_best(fields: list[distribution.StatsField], criterion: str,
                gt_abs: np.ndarray | None = None,
                origin: np.ndarray | None = None) -> int:
    """Index of the preferred field; ties go to the lowest index."""
    if not fields:
        raise ValueError("select_best needs at least one field")
    if criterion == "gt-ade":
        if gt_abs is None or origin is None:
            raise ValueError("gt-ade selection needs ground truth and origins")
        scores = []
        for f in fields:
            mean_abs = origin[:, None, :] + np.cumsum(f.means, axis=1)
            scores.append(np.linalg.norm(mean_abs - gt_abs, axis=-1).mean())
        return int(np.argmin(scores))
    if criterion == "self-likelihood":
        return int(np.argmax([distribution.mean_log_score(f) for f in fields]))
    raise ValueError(f"unknown selection criterion {criterion!r}")


def _to_absolute(displacements: np.ndarray, origin: np.ndarray) -> np.ndarray:
    return origin[:, None, :] + np.cumsum(displacements, axis=1)


def hybrid_sample(model: Model, window, strategy: SamplingStrategy,
                  rng: np.random.Generator, selection: str = "gt-ade",
                  gt_abs: np.ndarray | None = None,
                  steps: int | None = None,
                  chain_rng: np.random.Generator | None = None) -> PredictionSet:
    """Sample candidate futures for one window under a hybrid strategy.

    Gaussian draws are taken independently per timestep; displacement
    candidates are cumulatively summed from the window origin into
    absolute coordinates.
    """
    strategy.validate()
    if selection == "gt-ade" and gt_abs is None:
        raise ValueError("gt-ade selection requires ground truth")
    origin = window.origin
    cands = []       # list of [N, T', 2] absolute candidates
    provenance = []

    if strategy.kind == "A":
        fields = model.generate([window], rng, n_runs=strategy.r1, steps=steps,
                                chain_rng=chain_rng)
        best = select_best(fields, selection, gt_abs=gt_abs, origin=origin)
        if strategy.pool_run_means:
            for i, f in enumerate(fields):
                cands.append(_to_absolute(f.means, origin))
                provenance.append((i, "mean"))
        else:
            cands.append(_to_absolute(fields[best].means, origin))
            provenance.append((best, "mean"))
        for d in range(strategy.r2):
            cands.append(_to_absolute(distribution.sample_field(fields[best], rng),
                                      origin))
            provenance.append((best, d))
    elif strategy.kind == "B":
        fields = model.generate([window], rng, n_runs=strategy.r, steps=steps,
                                chain_rng=chain_rng)
        for i, f in enumerate(fields):
            cands.append(_to_absolute(distribution.sample_field(f, rng), origin))
            provenance.append((i, 0))
    else:  # C
        (f,) = model.generate([window], rng, n_runs=1, steps=steps,
                              chain_rng=chain_rng)
        for d in range(strategy.r):
            cands.append(_to_absolute(distribution.sample_field(f, rng), origin))
            provenance.append((0, d))

    stack = np.stack(cands, axis=1)   # [N, M, T', 2]
    if strategy.max_candidates is not None and stack.shape[1] > strategy.max_candidates:
        stack = stack[:, :strategy.max_candidates]
        provenance = provenance[:strategy.max_candidates]
    return PredictionSet(stack, provenance)


def best_of_n(pset: PredictionSet, gt_abs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pedestrian minimum ADE and the FDE of the same argmin candidate."""
    dists = np.linalg.norm(pset.candidates - gt_abs[:, None, :, :], axis=-1)
    ades = dists.mean(axis=-1)             # [N, M]
    pick = ades.argmin(axis=1)             # [N]
    rows = np.arange(len(pick))
    return ades[rows, pick], dists[rows, pick, -1]


@dataclass
class EvalProtocol:
    strategy: SamplingStrategy = field(default_factory=SamplingStrategy)
    selection: str = "gt-ade"
    steps: int | None = None
    seed: int = 0
    inject_oracle: bool = False   # test hook: add the ground truth as a candidate


def evaluate_windows(model: Model, windows, protocol: EvalProtocol) -> dict:
    """Best-of-N ADE/FDE over a window set, averaged over pedestrians."""
    if not windows:
        raise ValueError("empty evaluation set")
    all_ade, all_fde = [], []
    for i, w in enumerate(windows):
        rng = np.random.default_rng([protocol.seed, 23, i])
        gt_abs = w.absolute_future()
        pset = hybrid_sample(model, w, protocol.strategy, rng,
                             selection=protocol.selection, gt_abs=gt_abs,
                             steps=protocol.steps)
        if protocol.inject_oracle:
            cands = np.concatenate([pset.candidates, gt_abs[:, None]], axis=1)
            pset = PredictionSet(cands, pset.provenance + [(-1, "oracle")])
        a, f = best_of_n(pset, gt_abs)
        all_ade.extend(a.tolist())
        all_fde.extend(f.tolist())
    return {
        "ade": float(np.mean(all_ade)),
        "fde": float(np.mean(all_fde)),
        "windows": len(windows),
        "pedestrians": len(all_ade),
    }


def evaluate_scenes(model: Model, windows_by_scene: dict[str, list],
                    protocol: EvalProtocol) -> dict:
    """Per-scene report plus the unweighted AVG row."""
    scenes = {}
    for name in sorted(windows_by_scene):
        scenes[name] = evaluate_windows(model, windows_by_scene[name], protocol)
    report = {"scenes": scenes}
    if scenes:
        report["avg"] = {
            "ade": float(np.mean([s["ade"] for s in scenes.values()])),
            "fde": float(np.mean([s["fde"] for s in scenes.values()])),
        }
    return report


def constant_velocity_baseline(window) -> np.ndarray:
    """Repeat the last observed displacement: the classic extrapolation."""
    last = window.observed[:, -1, :]
    disp = np.repeat(last[:, None, :], window.future.shape[1], axis=1)
    return _to_absolute(disp, window.origin)
