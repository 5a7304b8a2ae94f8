"""Command line surface: dataset prep, training, evaluation, ablations,
prediction export and plots.

Commands: ``synth``, ``train``, ``eval``, ``ablate``, ``predict``.
Options may come from a config file (INI-style ``key = value`` sections,
see ``--config``); command line flags override file values.  Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

import numpy as np

from . import checkpoint, data, inference, svg, training
from .checkpoint import ContainerError
from .model import Model, ModelConfig
from .numerics import NumericsError

ENV_DATA_DIR = "TRAJDIFF_DATA_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", default=None,
                   help="benchmark data directory or 'synthetic'"
                        f" (default ${ENV_DATA_DIR})")


def _add_synth(p):
    g = p.add_argument_group("synthetic data (with --data synthetic)")
    g.add_argument("--scenes", type=int, default=None)
    g.add_argument("--peds", type=int, default=None)
    g.add_argument("--frames", type=int, default=None)
    g.add_argument("--speed-min", type=float, default=None)
    g.add_argument("--speed-max", type=float, default=None)
    g.add_argument("--turn-noise", type=float, default=None)
    g.add_argument("--repulsion", type=float, default=None)
    g.add_argument("--box", type=float, default=None, help="scene box size, meters")


def _add_protocol(p):
    p.add_argument("--strategy", choices=("A", "B", "C"), default=None)
    p.add_argument("--r1", type=int, default=None, help="reverse runs (strategy A)")
    p.add_argument("--r2", type=int, default=None, help="Gaussian draws (strategy A)")
    p.add_argument("--r", type=int, default=None, help="runs/draws (strategies B, C)")
    p.add_argument("--pool-means", action="store_true",
                   help="strategy A: keep every run's mean trajectory as a candidate")
    p.add_argument("--selection", choices=inference.SELECTIONS, default=None)
    p.add_argument("--steps", type=int, default=None,
                   help="execution steps S (must not exceed the checkpoint's K)")
    p.add_argument("--inject-oracle", action="store_true", help=argparse.SUPPRESS)


def build_parser() -> _Parser:
    parser = _Parser(prog="trajdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit synthetic benchmark-format scene files")
    _add_common(p)
    _add_synth(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + log")
    _add_common(p)
    _add_synth(p)
    p.add_argument("--out", default="runs")
    p.add_argument("--test-scene", default=None, help="scene held out from training")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda1", type=float, default=None, help="diffusion loss weight")
    p.add_argument("--lambda2", type=float, default=None, help="likelihood loss weight")
    p.add_argument("--lambda3", type=float, default=None, help="consistency loss weight")
    p.add_argument("--k", type=int, default=None, help="total Markovian steps K")
    p.add_argument("--steps", type=int, default=None, help="execution steps S")
    p.add_argument("--beta-start", type=float, default=None)
    p.add_argument("--beta-end", type=float, default=None)
    p.add_argument("--gamma-mode", choices=("deterministic", "ddpm-matching"),
                   default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument("--d-phi", type=int, default=None)
    p.add_argument("--d-psi", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--denoiser-boost", type=int, default=None,
                   help="extra denoiser-only updates per joint step")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--stride", type=int, default=None)

    p = sub.add_parser("eval", help="Best-of-N ADE/FDE on a held-out scene")
    _add_common(p)
    _add_synth(p)
    _add_protocol(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-scene", default=None, help="evaluate this scene only")
    p.add_argument("--out", default=None, help="metrics CSV path")
    p.add_argument("--gamma-mode", choices=("deterministic", "ddpm-matching"),
                   default=None, help="override the checkpoint's chain mode")
    p.add_argument("--stride", type=int, default=None)

    p = sub.add_parser("ablate", help="sweep steps, sampling strategies or gamma")
    _add_common(p)
    _add_synth(p)
    _add_protocol(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--axis", required=True, choices=("steps", "sampling", "gamma"))
    p.add_argument("--test-scene", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--stride", type=int, default=None)

    p = sub.add_parser("predict", help="export candidate trajectories for one file")
    _add_common(p)
    _add_protocol(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="benchmark-format text file")
    p.add_argument("--out", required=True, help="candidate CSV path")
    p.add_argument("--plot", default=None, help="also write an SVG overlay here")
    return parser


# ---------------------------------------------------------------------------
# Config file handling


KNOWN_CONFIG_KEYS = {
    "data.dir", "data.test_scene", "data.stride",
    "synth.scenes", "synth.peds", "synth.frames", "synth.speed_min",
    "synth.speed_max", "synth.turn_noise", "synth.repulsion", "synth.seed",
    "synth.box",
    "model.channels", "model.d_phi", "model.d_psi", "model.width",
    "model.blocks", "model.k", "model.steps", "model.beta_start",
    "model.beta_end", "model.gamma_mode",
    "train.lambda1", "train.lambda2", "train.lambda3", "train.lr",
    "train.batch", "train.epochs", "train.seed", "train.checkpoint_every",
    "train.denoiser_boost",
    "protocol.strategy", "protocol.r1", "protocol.r2", "protocol.r",
    "protocol.pool_means", "protocol.selection", "protocol.steps",
    "protocol.seed",
}


def load_config(path) -> dict:
    """Flatten an INI file into {'section.key': 'value'}."""
    cp = configparser.ConfigParser()
    try:
        read = cp.read(path)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config file {path}: {exc}") from None
    if not read:
        raise UsageError(f"config file {path} not found")
    flat = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            name = f"{section}.{key}"
            if name not in KNOWN_CONFIG_KEYS:
                raise UsageError(f"unknown config key {name!r} in {path}")
            flat[name] = value
    return flat


class Options:
    """Flag value if given, else config-file value, else default."""

    def __init__(self, args):
        self.args = args
        self.cfg = load_config(args.config) if getattr(args, "config", None) else {}

    def get(self, flag: str, section_key: str, default, cast=str):
        val = getattr(self.args, flag, None)
        if val is not None:
            return val
        if section_key in self.cfg:
            try:
                return cast(self.cfg[section_key])
            except ValueError:
                raise UsageError(f"bad config value for {section_key}") from None
        return default

    def get_flag(self, flag: str, section_key: str) -> bool:
        if getattr(self.args, flag, False):
            return True
        return self.cfg.get(section_key, "").lower() in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# Shared data plumbing


def _synth_config(opt: Options, seed: int) -> data.SynthConfig:
    return data.SynthConfig(
        n_scenes=opt.get("scenes", "synth.scenes", 4, int),
        peds_per_scene=opt.get("peds", "synth.peds", 6, int),
        frames=opt.get("frames", "synth.frames", 40, int),
        speed_min=opt.get("speed_min", "synth.speed_min", 0.2, float),
        speed_max=opt.get("speed_max", "synth.speed_max", 0.5, float),
        turn_noise=opt.get("turn_noise", "synth.turn_noise", 0.1, float),
        repulsion_gain=opt.get("repulsion", "synth.repulsion", 0.05, float),
        box=opt.get("box", "synth.box", 20.0, float),
        seed=seed,
    )


def _load_tracks(opt: Options, seed: int) -> list[data.RawTrack]:
    source = opt.get("data", "data.dir", os.environ.get(ENV_DATA_DIR))
    if source is None:
        raise UsageError("no data source: pass --data, set it in the config, "
                         f"or export {ENV_DATA_DIR}")
    if source == "synthetic":
        return data.synthesize_scenes(_synth_config(opt, seed))
    if not os.path.isdir(source):
        raise data.DataError(f"data directory {source} does not exist")
    tracks = []
    for name in sorted(os.listdir(source)):
        if name.endswith(".txt"):
            scene = os.path.splitext(name)[0]
            tracks.extend(data.ingest_benchmark_file(os.path.join(source, name), scene))
    if not tracks:
        raise data.DataError(f"no .txt benchmark files under {source}")
    return tracks


def _windows_by_scene(tracks, stride, model_cfg: ModelConfig) -> dict[str, list]:
    windows = data.window_scenes(tracks, model_cfg.t_obs, model_cfg.t_future,
                                 stride=stride,
                                 neighbor_radius=model_cfg.neighbor_radius)
    by_scene: dict[str, list] = {}
    for w in windows:
        by_scene.setdefault(w.scene_id, []).append(w)
    return by_scene


def _write_csv(path, meta_lines: list[str], header: str, rows: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in meta_lines:
            fh.write(f"# {line}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def _protocol(opt: Options, seed: int) -> inference.EvalProtocol:
    strategy = inference.SamplingStrategy(
        kind=opt.get("strategy", "protocol.strategy", "A"),
        r1=opt.get("r1", "protocol.r1", 10, int),
        r2=opt.get("r2", "protocol.r2", 10, int),
        r=opt.get("r", "protocol.r", 20, int),
        pool_run_means=opt.get_flag("pool_means", "protocol.pool_means"),
    ).validate()
    return inference.EvalProtocol(
        strategy=strategy,
        selection=opt.get("selection", "protocol.selection", "gt-ade"),
        steps=opt.get("steps", "protocol.steps", None, int),
        seed=seed,
        inject_oracle=bool(getattr(opt.args, "inject_oracle", False)),
    )


def _protocol_desc(protocol: inference.EvalProtocol, gamma_mode: str) -> str:
    s = protocol.strategy
    counts = f"r1={s.r1} r2={s.r2}" if s.kind == "A" else f"r={s.r}"
    return (f"strategy={s.kind} {counts} pool_means={s.pool_run_means} "
            f"selection={protocol.selection} steps={protocol.steps} "
            f"gamma={gamma_mode}")


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    opt = Options(args)
    seed = opt.get("seed", "synth.seed", 0, int)
    cfg = _synth_config(opt, seed)
    tracks = data.synthesize_scenes(cfg)
    os.makedirs(args.out, exist_ok=True)
    by_scene: dict[str, list] = {}
    for t in tracks:
        by_scene.setdefault(t.scene_id, []).append(t)
    for scene, scene_tracks in sorted(by_scene.items()):
        data.write_benchmark_file(os.path.join(args.out, f"{scene}.txt"), scene_tracks)
    print(f"wrote {len(by_scene)} scenes ({cfg.peds_per_scene} peds x "
          f"{cfg.frames} frames) to {args.out}")
    return 0


def _model_config(opt: Options) -> ModelConfig:
    return ModelConfig(
        conv_channels=opt.get("channels", "model.channels", 32, int),
        d_phi=opt.get("d_phi", "model.d_phi", 32, int),
        d_psi=opt.get("d_psi", "model.d_psi", 32, int),
        denoiser_width=opt.get("width", "model.width", 128, int),
        denoiser_blocks=opt.get("blocks", "model.blocks", 3, int),
        k_total=opt.get("k", "model.k", 200, int),
        steps=opt.get("steps", "model.steps", 100, int),
        beta_start=opt.get("beta_start", "model.beta_start", 1e-4, float),
        beta_end=opt.get("beta_end", "model.beta_end", 0.05, float),
        gamma_mode=opt.get("gamma_mode", "model.gamma_mode", "deterministic"),
    )


def cmd_train(args) -> int:
    opt = Options(args)
    seed = opt.get("seed", "train.seed", 0, int)
    model_cfg = _model_config(opt)
    train_cfg = training.TrainConfig(
        lambda_diffusion=opt.get("lambda1", "train.lambda1", 1.0, float),
        lambda_likelihood=opt.get("lambda2", "train.lambda2", 1.0, float),
        lambda_consistency=opt.get("lambda3", "train.lambda3", 1.0, float),
        learning_rate=opt.get("lr", "train.lr", 1e-3, float),
        batch_size=opt.get("batch", "train.batch", 8, int),
        epochs=opt.get("epochs", "train.epochs", 10, int),
        seed=seed,
        checkpoint_every=opt.get("checkpoint_every", "train.checkpoint_every", 500, int),
        denoiser_boost=opt.get("denoiser_boost", "train.denoiser_boost", 3, int),
    )
    try:
        train_cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tracks = _load_tracks(opt, seed)
    stride = opt.get("stride", "data.stride", model_cfg.t_future, int)
    by_scene = _windows_by_scene(tracks, stride, model_cfg)
    test_scene = opt.get("test_scene", "data.test_scene", None)
    if test_scene is not None and test_scene not in by_scene:
        raise data.DataError(f"test scene {test_scene!r} not found in data")
    windows = [w for scene, ws in sorted(by_scene.items())
               for w in ws if scene != test_scene]
    if not windows:
        raise data.DataError("no training windows after holding out the test scene")
    path, rows = training.fit(windows, train_cfg, model_cfg, out_dir=args.out,
                              resume_from=args.resume)
    last = rows[-1]
    mdl, _, _ = Model.load(path)
    print(f"trained {len(rows)} steps on {len(windows)} windows "
          f"({mdl.n_parameters()} parameters)")
    print(f"final losses: total={last[1]:.4f} diffusion={last[2]:.4f} "
          f"likelihood={last[3]:.4f} consistency={last[4]:.4f}")
    print(f"checkpoint: {path}")
    return 0


def _load_model(args, opt: Options) -> tuple[Model, str]:
    mdl, _meta, _rest = Model.load(args.checkpoint)
    gamma_mode = getattr(args, "gamma_mode", None)
    if gamma_mode is not None and gamma_mode != mdl.schedule.gamma_mode:
        from .diffusion import build_schedule
        mdl.schedule = build_schedule(mdl.config.k_total, mdl.config.beta_start,
                                      mdl.config.beta_end, len(mdl.schedule.tau),
                                      gamma_mode)
        mdl.config.gamma_mode = gamma_mode
    return mdl, checkpoint.file_hash(args.checkpoint)


def _check_steps(protocol, mdl):
    if protocol.steps is not None and not 1 <= protocol.steps <= mdl.schedule.K:
        raise UsageError(f"--steps {protocol.steps} outside 1..K={mdl.schedule.K}")


def cmd_eval(args) -> int:
    opt = Options(args)
    seed = opt.get("seed", "protocol.seed", 0, int)
    mdl, ckpt_hash = _load_model(args, opt)
    protocol = _protocol(opt, seed)
    _check_steps(protocol, mdl)
    tracks = _load_tracks(opt, seed)
    stride = opt.get("stride", "data.stride", mdl.config.t_future, int)
    by_scene = _windows_by_scene(tracks, stride, mdl.config)
    test_scene = opt.get("test_scene", "data.test_scene", None)
    if test_scene is not None:
        if test_scene not in by_scene:
            raise data.DataError(f"test scene {test_scene!r} not found in data")
        by_scene = {test_scene: by_scene[test_scene]}
    report = inference.evaluate_scenes(mdl, by_scene, protocol)

    desc = _protocol_desc(protocol, mdl.schedule.gamma_mode)
    print(f"{'scene':<12} {'ADE/FDE':>14} {'windows':>8} {'peds':>6}")
    rows = []
    for scene, r in report["scenes"].items():
        print(f"{scene:<12} {r['ade']:>7.3f}/{r['fde']:<6.3f} {r['windows']:>8} "
              f"{r['pedestrians']:>6}")
        rows.append(f"{scene},{protocol.strategy.kind},{r['ade']:.6f},{r['fde']:.6f},"
                    f"{r['windows']},{r['pedestrians']}")
    if "avg" in report:
        print(f"{'AVG':<12} {report['avg']['ade']:>7.3f}/{report['avg']['fde']:<6.3f}")
        rows.append(f"AVG,{protocol.strategy.kind},{report['avg']['ade']:.6f},"
                    f"{report['avg']['fde']:.6f},,")
    if args.out:
        _write_csv(args.out,
                   [f"checkpoint: {ckpt_hash}", f"seed: {seed}", f"protocol: {desc}"],
                   "scene,n_protocol,ade,fde,windows,pedestrians", rows)
        summary = {"checkpoint": ckpt_hash, "seed": seed, "protocol": desc,
                   "report": report}
        json_path = os.path.splitext(args.out)[0] + ".json"
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        print(f"metrics written to {args.out} (summary: {json_path})")
    return 0


def cmd_ablate(args) -> int:
    opt = Options(args)
    seed = opt.get("seed", "protocol.seed", 0, int)
    mdl, ckpt_hash = _load_model(args, opt)
    protocol = _protocol(opt, seed)
    _check_steps(protocol, mdl)
    tracks = _load_tracks(opt, seed)
    stride = opt.get("stride", "data.stride", mdl.config.t_future, int)
    by_scene = _windows_by_scene(tracks, stride, mdl.config)
    test_scene = opt.get("test_scene", "data.test_scene", None)
    if test_scene is not None:
        if test_scene not in by_scene:
            raise data.DataError(f"test scene {test_scene!r} not found in data")
        windows = by_scene[test_scene]
    else:
        windows = [w for ws in by_scene.values() for w in ws]

    from dataclasses import replace
    rows = []
    if args.axis == "steps":
        for s in (10, 25, 50, 100):
            if s > mdl.schedule.K:
                continue
            p = replace(protocol, steps=s)
            r = inference.evaluate_windows(mdl, windows, p)
            rows.append(("steps", f"S={s}", r))
    elif args.axis == "sampling":
        for kind in ("A", "B", "C"):
            strat = replace(protocol.strategy, kind=kind)
            p = replace(protocol, strategy=strat)
            r = inference.evaluate_windows(mdl, windows, p)
            rows.append(("sampling", kind, r))
    else:  # gamma
        from .diffusion import build_schedule
        for mode in ("deterministic", "ddpm-matching"):
            mdl.schedule = build_schedule(mdl.config.k_total, mdl.config.beta_start,
                                          mdl.config.beta_end, len(mdl.schedule.tau),
                                          mode)
            r = inference.evaluate_windows(mdl, windows, protocol)
            rows.append(("gamma", mode, r))

    print(f"{'axis':<10} {'setting':<16} {'ADE/FDE':>14}")
    csv_rows = []
    for axis, setting, r in rows:
        print(f"{axis:<10} {setting:<16} {r['ade']:>7.3f}/{r['fde']:<6.3f}")
        csv_rows.append(f"{axis},{setting},{r['ade']:.6f},{r['fde']:.6f},"
                        f"{r['windows']},{r['pedestrians']}")
    if args.out:
        _write_csv(args.out,
                   [f"checkpoint: {ckpt_hash}", f"seed: {seed}",
                    f"protocol: {_protocol_desc(protocol, mdl.schedule.gamma_mode)}"],
                   "axis,setting,ade,fde,windows,pedestrians", csv_rows)
        print(f"ablation written to {args.out}")
    return 0


def _prediction_window(tracks, model_cfg: ModelConfig):
    """First complete observation window of the file's frame grid.

    Pedestrians missing any of the first t_obs frames are skipped (reported
    on stderr).  Ground truth is attached when every kept pedestrian also
    has the following t_future frames.
    """
    grid = np.unique(np.concatenate([t.frames for t in tracks]))
    if len(grid) < model_cfg.t_obs:
        raise data.DataError(f"need at least {model_cfg.t_obs} frames, file has {len(grid)}")
    steps = np.diff(grid)
    if len(steps) and np.any(steps != steps[0]):
        raise data.DataError("frame grid is not uniform")
    obs_frames = set(grid[:model_cfg.t_obs].tolist())
    span = model_cfg.t_obs + model_cfg.t_future
    fut_frames = set(grid[model_cfg.t_obs:span].tolist()) if len(grid) >= span else None

    kept, skipped = [], []
    for t in tracks:
        have = set(t.frames.tolist())
        if obs_frames <= have:
            kept.append(t)
        else:
            skipped.append(t.ped_id)
    for ped in skipped:
        print(f"skipping ped {ped}: history shorter than {model_cfg.t_obs} frames",
              file=sys.stderr)
    if not kept:
        raise data.DataError("no pedestrian has a full observation history")

    with_gt = fut_frames is not None and all(fut_frames <= set(t.frames.tolist())
                                             for t in kept)
    n_frames = span if with_gt else model_cfg.t_obs
    frame_list = grid[:n_frames]
    abs_pos = np.stack([
        np.stack([t.points[np.where(t.frames == f)[0][0]] for f in frame_list])
        for t in kept])
    disp = np.zeros_like(abs_pos)
    disp[:, 1:] = abs_pos[:, 1:] - abs_pos[:, :-1]
    window = data.SceneWindow(
        scene_id=kept[0].scene_id,
        ped_ids=[t.ped_id for t in kept],
        observed=disp[:, :model_cfg.t_obs].copy(),
        future=(disp[:, model_cfg.t_obs:].copy() if with_gt
                else np.zeros((len(kept), model_cfg.t_future, 2))),
        origin=abs_pos[:, model_cfg.t_obs - 1].copy(),
        neighbor_mask=np.zeros((len(kept), len(kept)), dtype=bool),
        start_frame=int(grid[0]),
    )
    window.neighbor_mask = data.neighbor_sets(window, model_cfg.neighbor_radius)
    return window, with_gt


def cmd_predict(args) -> int:
    opt = Options(args)
    seed = opt.get("seed", "protocol.seed", 0, int)
    mdl, ckpt_hash = _load_model(args, opt)
    protocol = _protocol(opt, seed)
    _check_steps(protocol, mdl)
    scene = os.path.splitext(os.path.basename(args.input))[0]
    tracks = data.ingest_benchmark_file(args.input, scene)
    if not tracks:
        raise data.DataError(f"{args.input} contains no tracks")
    window, with_gt = _prediction_window(tracks, mdl.config)
    gt_abs = window.absolute_future() if with_gt else None

    selection = protocol.selection
    if gt_abs is None and selection == "gt-ade":
        selection = "self-likelihood"
    rng = np.random.default_rng([protocol.seed, 23, 0])
    pset = inference.hybrid_sample(mdl, window, protocol.strategy, rng,
                                   selection=selection, gt_abs=gt_abs,
                                   steps=protocol.steps)

    rows = []
    for n, ped in enumerate(window.ped_ids):
        for m in range(pset.n_candidates):
            for t in range(mdl.config.t_future):
                x, y = pset.candidates[n, m, t]
                rows.append(f"{scene},{ped},{m},{t + 1},{x:.6f},{y:.6f}")
    _write_csv(args.out,
               [f"checkpoint: {ckpt_hash}", f"seed: {seed}",
                f"protocol: {_protocol_desc(protocol, mdl.schedule.gamma_mode)}"],
               "scene,ped,candidate,t,x,y", rows)
    print(f"{pset.n_candidates} candidates x {window.n_peds} pedestrians "
          f"written to {args.out}")
    if args.plot:
        doc = svg.render_window(window.absolute_observed(), pset.candidates, gt_abs)
        with open(args.plot, "w", encoding="utf-8") as fh:
            fh.write(doc)
        print(f"plot written to {args.plot}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (data.DataError, ContainerError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, ValueError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
