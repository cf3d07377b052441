"""Training loop, checkpoints and the per-step JSONL log."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam, CheckpointError, load_checkpoint, save_checkpoint
from .autodiff import tensor as T
from .backbone import ModelConfig
from .config import RunConfig
from .geometry import Pose, rpe_r, rpe_t
from .losses import pose_loss, render_loss, total_loss
from .model import ModelOutput, TokenSplat
from .renderer import render_tensors
from .synth import SyntheticScene

CHECKPOINT_FORMAT = "tokensplat-model"
CHECKPOINT_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class VersionError(ValueError):
    """Checkpoint does not match the requested model configuration."""


# -- checkpoints -----------------------------------------------------------------------------


def save_model(path, model: TokenSplat, step: int = 0) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model": model.cfg.to_dict(),
        "step": step,
    }
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path, expected: ModelConfig | None = None) -> tuple[TokenSplat, dict]:
    try:
        state, meta = load_checkpoint(path)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint format {meta.get('format')!r} "
                           f"v{meta.get('format_version')}")
    cfg = ModelConfig(**meta["model"])
    if expected is not None and cfg != expected:
        diff = sorted(k for k, v in expected.to_dict().items() if meta["model"].get(k) != v)
        raise VersionError(f"{path}: checkpoint model config differs from run config in {diff}")
    model = TokenSplat(cfg)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise VersionError(f"{path}: {exc}") from None
    return model, meta


# -- one step -------------------------------------------------------------------------------


def supervision(scene: SyntheticScene, with_targets: bool) -> tuple[list[Pose], np.ndarray]:
    poses = list(scene.context_poses)
    images = [scene.context_images]
    if with_targets and len(scene.target_poses):
        poses += list(scene.target_poses)
        images.append(scene.target_images)
    return poses, np.concatenate(images)


def render_views(out: ModelOutput, poses: list[Pose], K, dtype=np.float32) -> list:
    g = out.gaussians
    frames = []
    for pose in poses:
        q = T.Tensor(np.asarray(pose.rotation, dtype=dtype))
        t = T.Tensor(np.asarray(pose.translation, dtype=dtype))
        frames.append(render_tensors(g["means"], g["opacities"], g["rotations"], g["scales"], g["sh"], q, t, K))
    return frames


def compute_loss(model: TokenSplat, scene: SyntheticScene, with_targets: bool = True):
    """Forward pass and total loss. Returns (loss tensor, report, model output)."""
    cfg = model.cfg
    n = scene.num_views
    out = model(scene.context_images, [scene.intrinsics] * n)
    poses, images = supervision(scene, with_targets)
    frames = render_views(out, poses, scene.intrinsics)
    pixels = T.stack([f.pixels for f in frames], axis=0)
    l_render = render_loss(pixels, images, cfg.lambda_lpips)
    l_pose, l_mse, l_align = pose_loss(out.pose_q, out.pose_t, scene.context_poses[1:])
    loss, report = total_loss(l_render, l_pose, cfg.lambda_c, cfg.lambda_lpips, l_mse, l_align)
    return loss, report, out


def parameter_groups(model: TokenSplat, lr: float, lr_backbone: float) -> list:
    if not lr_backbone:
        return [(lr, model.parameters())]
    backbone = [p for n, p in model.named_parameters() if n.split(".")[0] in ("encoder", "canonical", "adf", "camera")]
    ids = {id(p) for p in backbone}
    heads = [p for p in model.parameters() if id(p) not in ids]
    return [(lr_backbone, backbone), (lr, heads)]


@dataclass
class TrainResult:
    model: TokenSplat
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _pose_errors(out: ModelOutput, scene: SyntheticScene) -> tuple[float, float]:
    pred = out.poses()
    return rpe_r(pred, scene.context_poses), rpe_t(pred, scene.context_poses)


def train(cfg: RunConfig, scene: SyntheticScene, out_dir=None, model: TokenSplat | None = None) -> TrainResult:
    """Optimise the model on one scene.

    Writes ``train_log.jsonl`` and checkpoints to ``out_dir`` when given. The
    run is a pure function of (config, seed, scene).
    """
    tc = cfg.train
    model = model or TokenSplat(cfg.model, seed=tc.seed)
    opt = Adam(parameter_groups(model, tc.lr, tc.lr_backbone), betas=(tc.beta1, tc.beta2))
    out_path = Path(out_dir) if out_dir is not None else None
    result = TrainResult(model)
    log = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "config.ini").write_text(cfg.to_ini())
        log = (out_path / "train_log.jsonl").open("w")

    def checkpoint(step: int, name: str | None = None) -> None:
        if out_path is None:
            return
        path = out_path / (name or f"step_{step:06d}.ckpt")
        save_model(path, model, step)
        result.checkpoints.append(path)

    try:
        checkpoint(0)
        for step in range(1, tc.steps + 1):
            loss, report, out = compute_loss(model, scene, tc.supervise_targets)
            rot_err, trans_err = _pose_errors(out, scene)
            record = {"step": step, **report.to_dict(), "rpe_r": rot_err, "rpe_t": trans_err, **out.counts}
            if not math.isfinite(report.total):
                _abort(out_path, model, step, record)
            loss.backward()
            bad = [n for n, p in model.named_parameters() if p.grad is not None and not np.all(np.isfinite(p.grad))]
            if bad:
                record["nonfinite_grads"] = bad[:10]
                _abort(out_path, model, step, record)
            opt.step()
            opt.zero_grad()
            result.history.append(record)
            if log is not None:
                log.write(json.dumps(record, sort_keys=True) + "\n")
            if step % tc.checkpoint_every == 0:
                checkpoint(step)
        checkpoint(tc.steps, "final.ckpt")
    finally:
        if log is not None:
            log.close()
    return result


def _abort(out_path: Path | None, model: TokenSplat, step: int, record: dict) -> None:
    # parameters have not been updated with this step's gradients yet, so they are the last good state
    if out_path is not None:
        save_model(out_path / "last_good.ckpt", model, step - 1)
        bad = {n: int(np.sum(~np.isfinite(p.data))) for n, p in model.named_parameters()}
        diag = {"step": step, "record": {k: (v if not isinstance(v, float) or math.isfinite(v) else str(v))
                                         for k, v in record.items()},
                "nonfinite_parameters": {k: v for k, v in bad.items() if v}}
        (out_path / "nan_dump.json").write_text(json.dumps(diag, indent=2, sort_keys=True))
    what = "gradient" if "nonfinite_grads" in record else "loss"
    raise TrainingError(f"non-finite {what} at step {step}; last good parameters saved")
