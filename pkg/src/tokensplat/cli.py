"""Command-line entry point: ``tokensplat <command> --config run.ini [--seed N] [--out DIR]``.

Failures print a single ``error: <kind>: <message>`` line to stderr and exit
with a nonzero code that depends on the kind.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .autodiff import CheckpointError
from .backbone import ConfigError
from .config import RunConfig, load_config
from .evaluate import eval_nvs, eval_pose, gaussian_count_scaling, predict, write_csv
from .gaussians import PlyError, export_ply
from .geometry import Pose, parse_pose
from .renderer import RenderError, render, write_ppm, write_raw
from .synth import SynthError, SyntheticScene, load_scene, save_scene, synth_gen
from .train import TrainingError, VersionError, load_model, train

EXIT_CODES = {"config": 2, "parse": 3, "io": 4, "scene": 5, "checkpoint": 6, "version": 7, "training": 8,
              "render": 9}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _scene_dir(cfg: RunConfig, args) -> Path:
    if args.scene:
        return Path(args.scene)
    if cfg.eval.scene_dir:
        return Path(cfg.eval.scene_dir)
    return Path(args.out) / "scene"


def _checkpoint(cfg: RunConfig, args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    if cfg.eval.checkpoint:
        return Path(cfg.eval.checkpoint)
    return Path(args.out) / "final.ckpt"


def _load_scene(cfg: RunConfig, args) -> SyntheticScene:
    return load_scene(_scene_dir(cfg, args))


def _load_model(cfg: RunConfig, args):
    path = _checkpoint(cfg, args)
    if not path.exists():
        raise CliError("io", f"checkpoint not found: {path}")
    model, _ = load_model(path, cfg.model)
    return model


def cmd_synth_gen(cfg: RunConfig, args) -> str:
    scene = synth_gen(cfg.data, cfg.train.seed)
    out = save_scene(scene, Path(args.out))
    return f"scene written to {out} ({scene.num_views} context, {len(scene.target_poses)} target views)"


def cmd_train(cfg: RunConfig, args) -> str:
    scene_dir = _scene_dir(cfg, args)
    if (scene_dir / "scene.json").exists():
        scene = load_scene(scene_dir)
    else:
        scene = synth_gen(cfg.data, cfg.train.seed)
        save_scene(scene, scene_dir)
    result = train(cfg, scene, args.out)
    last = result.history[-1] if result.history else {}
    summary = {k: last[k] for k in ("l_render", "l_pose", "rpe_r") if k in last}
    return f"trained {cfg.train.steps} steps -> {Path(args.out) / 'final.ckpt'} {json.dumps(summary)}"


def cmd_eval_nvs(cfg: RunConfig, args) -> str:
    scene = _load_scene(cfg, args)
    model = _load_model(cfg, args)
    rows = eval_nvs(model, scene)
    out = Path(args.out)
    write_csv(out / "nvs.csv", rows)
    write_csv(out / "gaussian_counts.csv", gaussian_count_scaling(cfg.model))
    counts = predict(model, scene).counts
    write_csv(out / "model_counts.csv", [counts])
    return f"psnr {rows[-1]['psnr']:.3f} ssim {rows[-1]['ssim']:.4f} -> {out / 'nvs.csv'}"


def cmd_eval_pose(cfg: RunConfig, args) -> str:
    scene = _load_scene(cfg, args)
    model = _load_model(cfg, args)
    rows = eval_pose(model, scene)
    out = Path(args.out)
    write_csv(out / "pose.csv", rows)
    r = rows[-1]
    return f"ate {r['ate']:.5f} rpe_t {r['rpe_t']:.5f} rpe_r {r['rpe_r']:.4f} -> {out / 'pose.csv'}"


def _render_pose(cfg: RunConfig, args) -> Pose:
    text = args.pose if args.pose is not None else cfg.eval.pose
    pose = parse_pose(text)
    if cfg.eval.pullback:
        pose = Pose(pose.rotation, pose.translation - cfg.eval.pullback * pose.R[:, 2])
    return pose


def cmd_render(cfg: RunConfig, args) -> str:
    pose = _render_pose(cfg, args)
    scene = _load_scene(cfg, args)
    gaussians = predict(_load_model(cfg, args), scene).scene()
    img = render(gaussians, pose, scene.intrinsics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "render.ppm", img.pixels)
    write_raw(out / "render.raw", img.pixels)
    return f"rendered {img.stats.n_rendered}/{img.stats.n_input} Gaussians -> {out / 'render.ppm'}"


def cmd_export_ply(cfg: RunConfig, args) -> str:
    scene = _load_scene(cfg, args)
    gaussians = predict(_load_model(cfg, args), scene).scene()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_ply(gaussians, out / "scene.ply")
    return f"exported {len(gaussians)} Gaussians -> {out / 'scene.ply'}"


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "eval-nvs": cmd_eval_nvs,
    "eval-pose": cmd_eval_pose,
    "render": cmd_render,
    "export-ply": cmd_export_ply,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokensplat", description="Pose-free feed-forward Gaussian splatting at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--seed", type=int, default=None, help="overrides [train] seed")
        p.add_argument("--out", default="run", help="output directory")
        p.add_argument("--scene", default=None, help="scene directory (default: [eval] scene_dir or OUT/scene)")
        p.add_argument("--checkpoint", default=None, help="checkpoint (default: [eval] checkpoint or OUT/final.ckpt)")
        if name == "render":
            p.add_argument("--pose", default=None, help='camera pose "qw qx qy qz tx ty tz"')
    return parser


def _classify(exc: BaseException) -> tuple[str, str]:
    if isinstance(exc, CliError):
        return exc.kind, str(exc)
    table = [
        (ConfigError, "config"), (VersionError, "version"), (CheckpointError, "checkpoint"),
        (PlyError, "parse"), (SynthError, "scene"), (TrainingError, "training"), (RenderError, "render"),
        (ValueError, "parse"), (OSError, "io"),
    ]
    for cls, kind in table:
        if isinstance(exc, cls):
            msg = exc.strerror if isinstance(exc, OSError) and exc.strerror else str(exc)
            if isinstance(exc, OSError) and exc.filename:
                msg = f"{msg}: {exc.filename}"
            return kind, msg
    return "internal", f"{type(exc).__name__}: {exc}"


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        message = COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        kind, msg = _classify(exc)
        print(f"error: {kind}: {' '.join(str(msg).split())}", file=sys.stderr)
        return EXIT_CODES.get(kind, 1)
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
