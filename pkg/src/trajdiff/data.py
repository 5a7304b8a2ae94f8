"""Trajectory ingestion, windowing and synthetic scene generation.

Benchmark files are plain text, one observation per line::

    frame_id ped_id x y

with 0.4 seconds between consecutive frame steps, positions in meters and
world coordinates.  Windowing slices every scene into fixed-horizon samples
(8 observed frames, 12 future frames by default), converts positions to
per-frame displacements and anchors each pedestrian at the absolute
position of the last observed frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint

T_OBSERVED = 8
T_FUTURE = 12
MAX_PEDS_PER_WINDOW = 32
NEIGHBOR_RADIUS = 5.0


class DataError(RuntimeError):
    pass


@dataclass
class RawTrack:
    """One pedestrian's positions on the scene's frame grid."""

    scene_id: str
    ped_id: int
    frames: np.ndarray      # strictly increasing frame ids
    points: np.ndarray      # [len(frames), 2] meters

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.points = np.asarray(self.points, dtype=np.float64)
        if np.any(np.diff(self.frames) <= 0):
            raise DataError(f"track {self.ped_id} frames not strictly increasing")
        if self.points.shape != (len(self.frames), 2):
            raise DataError("track points/frames length mismatch")


@dataclass
class SceneWindow:
    """One fixed-horizon sample of N co-present pedestrians.

    ``observed``/``future`` hold per-frame displacements (meters per frame);
    the first observed displacement is zero by convention.  ``origin`` is
    the absolute position at the last observed frame, so absolute futures
    are ``origin + cumsum(future)``.
    """

    scene_id: str
    ped_ids: list[int]
    observed: np.ndarray       # [N, T, 2]
    future: np.ndarray         # [N, T', 2]
    origin: np.ndarray         # [N, 2]
    neighbor_mask: np.ndarray  # [N, N] bool, False diagonal
    start_frame: int = 0

    @property
    def n_peds(self) -> int:
        return self.observed.shape[0]

    def absolute_observed(self) -> np.ndarray:
        """Reconstruct absolute observed positions from origin + displacements."""
        n, t, _ = self.observed.shape
        out = np.empty((n, t, 2))
        out[:, -1] = self.origin
        for i in range(t - 2, -1, -1):
            out[:, i] = out[:, i + 1] - self.observed[:, i + 1]
        return out

    def absolute_future(self) -> np.ndarray:
        return self.origin[:, None, :] + np.cumsum(self.future, axis=1)


@dataclass
class DatasetSplit:
    train_scenes: list[str]
    test_scene: str


def ingest_benchmark_file(path, scene_id: str) -> list[RawTrack]:
    """Parse a benchmark text file into per-pedestrian tracks.

    Lines are whitespace separated ``frame_id ped_id x y``; blank lines and
    ``#`` comments are ignored.  Malformed lines and duplicate
    (frame, ped) pairs raise ``DataError`` naming the offending line.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    rows = {}
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 4:
            raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            frame = int(float(parts[0]))
            ped = int(float(parts[1]))
            x, y = float(parts[2]), float(parts[3])
        except ValueError:
            raise DataError(f"{path}: line {lineno}: non-numeric field") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise DataError(f"{path}: line {lineno}: non-finite position")
        if (frame, ped) in seen:
            raise DataError(f"{path}: line {lineno}: duplicate frame/ped pair ({frame}, {ped})")
        seen.add((frame, ped))
        rows.setdefault(ped, []).append((frame, x, y))

    tracks = []
    for ped in sorted(rows):
        obs = sorted(rows[ped])
        frames = np.array([o[0] for o in obs], dtype=np.int64)
        points = np.array([[o[1], o[2]] for o in obs])
        tracks.append(RawTrack(scene_id, ped, frames, points))
    return tracks


def _scene_grid(tracks: list[RawTrack]) -> np.ndarray:
    frames = np.unique(np.concatenate([t.frames for t in tracks]))
    if len(frames) > 1:
        steps = np.diff(frames)
        if np.any(steps != steps[0]):
            raise DataError(f"scene {tracks[0].scene_id}: frame grid is not uniform")
    return frames


def window_scenes(tracks: list[RawTrack], t_obs: int = T_OBSERVED,
                  t_fut: int = T_FUTURE, stride: int = 1,
                  neighbor_radius: float = NEIGHBOR_RADIUS,
                  max_peds: int = MAX_PEDS_PER_WINDOW) -> list[SceneWindow]:
    """Slide a (t_obs + t_fut)-frame window over every scene.

    A pedestrian joins a window only when present at all of its frames.
    Windows without any qualifying pedestrian are dropped.  When more than
    ``max_peds`` qualify, the pedestrians with the longest tracks win.
    """
    if stride < 1:
        raise DataError("stride must be >= 1")
    span = t_obs + t_fut
    by_scene: dict[str, list[RawTrack]] = {}
    for t in tracks:
        by_scene.setdefault(t.scene_id, []).append(t)

    windows = []
    for scene_id in sorted(by_scene):
        scene_tracks = by_scene[scene_id]
        grid = _scene_grid(scene_tracks)
        if len(grid) < span:
            continue
        pos_of = {f: i for i, f in enumerate(grid)}
        # positions of each track on the grid; None where absent
        placed = []
        for tr in scene_tracks:
            idx = np.array([pos_of[f] for f in tr.frames], dtype=np.int64)
            full = np.full((len(grid), 2), np.nan)
            full[idx] = tr.points
            placed.append((tr, full))

        for start in range(0, len(grid) - span + 1, stride):
            chosen = []
            for tr, full in placed:
                block = full[start:start + span]
                if not np.any(np.isnan(block)):
                    chosen.append((tr, block))
            if not chosen:
                continue
            if len(chosen) > max_peds:
                chosen.sort(key=lambda c: (-len(c[0].frames), c[0].ped_id))
                chosen = chosen[:max_peds]
                chosen.sort(key=lambda c: c[0].ped_id)
            abs_pos = np.stack([block for _, block in chosen])   # [N, span, 2]
            disp = np.zeros_like(abs_pos)
            disp[:, 1:] = abs_pos[:, 1:] - abs_pos[:, :-1]
            window = SceneWindow(
                scene_id=scene_id,
                ped_ids=[tr.ped_id for tr, _ in chosen],
                observed=disp[:, :t_obs].copy(),
                future=disp[:, t_obs:].copy(),
                origin=abs_pos[:, t_obs - 1].copy(),
                neighbor_mask=np.zeros((len(chosen), len(chosen)), dtype=bool),
                start_frame=int(grid[start]),
            )
            window.neighbor_mask = neighbor_sets(window, neighbor_radius)
            windows.append(window)
    return windows


def neighbor_sets(window: SceneWindow, radius: float) -> np.ndarray:
    """j neighbors i iff their minimum distance over observed frames <= radius."""
    if radius <= 0:
        raise DataError("neighbor radius must be positive")
    pos = window.absolute_observed()                     # [N, T, 2]
    diff = pos[:, None, :, :] - pos[None, :, :, :]       # [N, N, T, 2]
    dist = np.linalg.norm(diff, axis=-1).min(axis=-1)    # [N, N]
    mask = dist <= radius
    np.fill_diagonal(mask, False)
    return mask


@dataclass
class SynthConfig:
    """Noisy constant-velocity walkers with pairwise repulsion in a 20 m box."""

    n_scenes: int = 4
    peds_per_scene: int = 6
    frames: int = 40
    speed_min: float = 0.2      # meters per frame
    speed_max: float = 0.5
    turn_noise: float = 0.1     # radians per frame
    repulsion_gain: float = 0.05
    seed: int = 0
    box: float = 20.0
    repulsion_radius: float = 1.0
    scene_prefix: str = "synth"

    def __post_init__(self):
        for name in ("n_scenes", "peds_per_scene", "frames", "speed_min", "speed_max", "box"):
            if getattr(self, name) <= 0:
                raise DataError(f"synth config {name} must be positive")
        if self.turn_noise < 0 or self.repulsion_gain < 0:
            raise DataError("synth noise/repulsion must be non-negative")


def synthesize_scenes(config: SynthConfig) -> list[RawTrack]:
    """Deterministic synthetic tracks in benchmark form (frame step 10)."""
    tracks = []
    for s in range(config.n_scenes):
        rng = np.random.default_rng([config.seed, s])
        n = config.peds_per_scene
        pos = rng.uniform(0.0, config.box, size=(n, 2))
        heading = rng.uniform(-np.pi, np.pi, size=n)
        speed = config.speed_min + rng.uniform(0.0, 1.0, size=n) * (
            config.speed_max - config.speed_min)
        turns = rng.normal(0.0, 1.0, size=(config.frames - 1, n))
        history = np.empty((config.frames, n, 2))
        history[0] = pos
        for f in range(1, config.frames):
            heading = heading + config.turn_noise * turns[f - 1]
            step = speed[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=1)
            if config.repulsion_gain > 0:
                delta = pos[:, None, :] - pos[None, :, :]
                dist = np.linalg.norm(delta, axis=-1)
                np.fill_diagonal(dist, np.inf)
                close = dist < config.repulsion_radius
                if np.any(close):
                    push = np.where(close[:, :, None],
                                    delta / np.maximum(dist, 0.05)[:, :, None] ** 2,
                                    0.0)
                    step = step + config.repulsion_gain * push.sum(axis=1)
            pos = pos + step
            # reflect off the box walls
            for axis in range(2):
                low = pos[:, axis] < 0
                pos[low, axis] = -pos[low, axis]
                high = pos[:, axis] > config.box
                pos[high, axis] = 2 * config.box - pos[high, axis]
            history[f] = pos
        scene_id = f"{config.scene_prefix}{s:02d}"
        frames = np.arange(config.frames, dtype=np.int64) * 10
        for p in range(n):
            tracks.append(RawTrack(scene_id, p, frames, history[:, p, :]))
    return tracks


def write_benchmark_file(path, tracks: list[RawTrack]) -> None:
    rows = []
    for tr in tracks:
        for f, (x, y) in zip(tr.frames, tr.points):
            rows.append((int(f), tr.ped_id, x, y))
    rows.sort()
    with open(path, "w", encoding="utf-8") as fh:
        for frame, ped, x, y in rows:
            fh.write(f"{frame} {ped} {x:.6f} {y:.6f}\n")


def make_splits(scene_names: list[str]) -> list[DatasetSplit]:
    """Leave-one-out splits: one per scene, trained on all the others."""
    if len(scene_names) < 2:
        raise DataError("need at least two scenes to split")
    if len(set(scene_names)) != len(scene_names):
        raise DataError("duplicate scene names")
    return [DatasetSplit([s for s in scene_names if s != test], test)
            for test in scene_names]


# ---------------------------------------------------------------------------
# Window caching via the container format


def save_windows(path, windows: list[SceneWindow]) -> None:
    meta = {
        "kind": "windows",
        "count": len(windows),
        "scenes": [w.scene_id for w in windows],
        "ped_ids": [w.ped_ids for w in windows],
        "start_frames": [w.start_frame for w in windows],
    }
    arrays = {}
    for i, w in enumerate(windows):
        arrays[f"w{i:05d}.observed"] = w.observed
        arrays[f"w{i:05d}.future"] = w.future
        arrays[f"w{i:05d}.origin"] = w.origin
        arrays[f"w{i:05d}.mask"] = w.neighbor_mask.astype(np.uint8)
    checkpoint.save_container(path, meta, arrays)


def load_windows(path) -> list[SceneWindow]:
    meta, arrays = checkpoint.load_container(path)
    if meta.get("kind") != "windows":
        raise DataError(f"{path} is not a window cache")
    windows = []
    for i in range(meta["count"]):
        windows.append(SceneWindow(
            scene_id=meta["scenes"][i],
            ped_ids=list(meta["ped_ids"][i]),
            observed=arrays[f"w{i:05d}.observed"],
            future=arrays[f"w{i:05d}.future"],
            origin=arrays[f"w{i:05d}.origin"],
            neighbor_mask=arrays[f"w{i:05d}.mask"].astype(bool),
            start_frame=meta["start_frames"][i],
        ))
    return windows
