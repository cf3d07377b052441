"""Novel-view and pose evaluation, plus the Gaussian-count scaling benchmark."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import no_grad
from .autodiff.tensor import Tensor
from .backbone import ModelConfig, patch_rays
from .fusion import GaussianHead, fuse_tokens, group_tokens
from .gaussians import GaussianScene
from .geometry import Intrinsics, Pose, ate, rpe_r, rpe_t
from .losses import psnr, ssim
from .model import ModelOutput, TokenSplat
from .renderer import render
from .synth import SyntheticScene, overlap_benchmark_positions


def predict(model: TokenSplat, scene: SyntheticScene) -> ModelOutput:
    with no_grad():
        return model(scene.context_images, [scene.intrinsics] * scene.num_views)


def _eval_views(scene: SyntheticScene) -> tuple[str, list[Pose], np.ndarray]:
    if len(scene.target_poses):
        return "target", list(scene.target_poses), scene.target_images
    return "context", list(scene.context_poses), scene.context_images


def eval_nvs_scene(gaussians: GaussianScene, scene: SyntheticScene) -> list[dict]:
    """PSNR/SSIM of ``gaussians`` rendered at the held-out views (context views if none)."""
    kind, poses, images = _eval_views(scene)
    rows = []
    for i, (pose, gt) in enumerate(zip(poses, images)):
        img = render(gaussians, pose, scene.intrinsics).pixels
        rows.append({"view": f"{kind}_{i:02d}", "psnr": psnr(img, gt), "ssim": ssim(img, gt)})
    rows.append({"view": "mean",
                 "psnr": float(np.mean([r["psnr"] for r in rows])),
                 "ssim": float(np.mean([r["ssim"] for r in rows]))})
    return rows


def eval_nvs(model: TokenSplat, scene: SyntheticScene) -> list[dict]:
    return eval_nvs_scene(predict(model, scene).scene(), scene)


def eval_pose_traj(pred: Sequence[Pose], gt: Sequence[Pose]) -> list[dict]:
    rows = []
    for i in range(1, len(gt)):
        dq = np.asarray(pred[i].translation) - np.asarray(gt[i].translation)
        rel = gt[i].inverse().compose(pred[i])
        rows.append({"view": f"context_{i:02d}", "ate": float("nan"), "rpe_t": float(np.linalg.norm(dq)),
                     "rpe_r": float(np.degrees(2 * np.arccos(min(1.0, abs(rel.rotation[0])))))})
    rows.append({"view": "all", "ate": ate(pred, gt), "rpe_t": rpe_t(pred, gt), "rpe_r": rpe_r(pred, gt)})
    return rows


def eval_pose(model: TokenSplat, scene: SyntheticScene) -> list[dict]:
    return eval_pose_traj(predict(model, scene).poses(), scene.context_poses)


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


# -- Gaussian-count scaling ----------------------------------------------------------------


def benchmark_eps(cfg: ModelConfig, K: Intrinsics, depth: float) -> float:
    """Footprint of one patch on the benchmark plane."""
    return cfg.patch_size / K.fx * depth


def gaussian_count_scaling(cfg: ModelConfig, views: Sequence[int] = (2, 4, 8), depth: float = 2.0,
                           baseline: float = 0.5, eps: float | None = None, fov_deg: float = 60.0,
                           position_noise: float = 0.5, seed: int = 0) -> list[dict]:
    """Fused vs pixel-aligned Gaussian counts on the overlap benchmark scene.

    Token positions are the ray/plane hits of each view's patch centres plus
    Gaussian noise of ``position_noise * eps`` per axis, standing in for the
    error of a learned coarse prediction (exact hits make every view land in
    the same voxels). The fused set is pushed through a Gaussian head so the
    count is what the head actually emits.
    """
    K = Intrinsics.from_fov(cfg.width, cfg.height, fov_deg)
    eps = benchmark_eps(cfg, K, depth) if eps is None else eps
    feat_rng, pos_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    head = GaussianHead(cfg, feat_rng)
    rays = patch_rays(cfg, K)
    rows = []
    for n in views:
        pos = overlap_benchmark_positions(n, rays, depth, baseline)
        pos = pos + pos_rng.normal(0.0, position_noise * eps, pos.shape)
        m = len(pos)
        groups = group_tokens(pos, eps)
        taps = [Tensor(feat_rng.standard_normal((m, cfg.embed_dim)).astype(np.float32)) for _ in range(4)]
        with no_grad():
            fused = fuse_tokens(taps, Tensor(pos.astype(np.float32)), Tensor(np.zeros(m, np.float32)), groups)
            g = head(fused)["means"].shape[0]
        rows.append({"n_views": n, "input_tokens": m, "fused_tokens": len(groups),
                     "fused_gaussians": g, "pixel_aligned_gaussians": m * cfg.k_per_token})
    return rows
