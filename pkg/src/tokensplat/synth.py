"""Synthetic multi-view scenes rendered with the splat renderer.

Everything is expressed in the reference camera's frame: view 0 has the
identity pose and the Gaussians sit in a box in front of it. The other
cameras orbit the box centre on a horizontal arc.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gaussians import GaussianScene, export_ply, import_ply, rgb_to_sh_dc, sh_coeff_count
from .geometry import Intrinsics, Pose, axis_angle_to_quat, load_trajectory, quat_mul, save_trajectory
from .renderer import read_raw, render, write_ppm, write_raw

MAX_ATTEMPTS = 8


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_views: int = 3
    num_targets: int = 2
    num_gaussians: int = 64
    height: int = 64
    width: int = 64
    fov_deg: float = 60.0
    distance: float = 2.5
    arc_deg: float = 30.0  # angular span of the context cameras; smaller = more overlap
    elevation_deg: float = 4.0  # max random elevation jitter per camera
    box_size: float = 1.5
    sh_degree: int = 1

    def __post_init__(self):
        if self.num_views < 2:
            raise SynthError(f"need at least 2 views, got {self.num_views}")
        if self.num_gaussians < 1:
            raise SynthError("need at least one Gaussian")
        if self.height < 1 or self.width < 1:
            raise SynthError("image size must be positive")
        if not 0 < self.fov_deg < 180:
            raise SynthError(f"fov must be in (0, 180), got {self.fov_deg}")
        if self.distance <= self.box_size:
            raise SynthError("cameras must sit outside the scene box")

    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.width, self.height, self.fov_deg)


@dataclass
class SyntheticScene:
    gt_scene: GaussianScene
    intrinsics: Intrinsics
    context_poses: list[Pose]
    context_images: np.ndarray  # (N, H, W, 3) float32
    target_poses: list[Pose]
    target_images: np.ndarray
    seed: int
    config: SynthConfig
    attempts: int = 1
    diagnostics: list[str] = field(default_factory=list)

    @property
    def num_views(self) -> int:
        return len(self.context_poses)


def orbit_pose(theta_deg: float, phi_deg: float, distance: float) -> Pose:
    """Camera on a sphere around (0, 0, distance), looking at it, in the reference frame."""
    qy = axis_angle_to_quat([0.0, 1.0, 0.0], np.deg2rad(theta_deg))
    qx = axis_angle_to_quat([1.0, 0.0, 0.0], np.deg2rad(phi_deg))
    rot = Pose(quat_mul(qy, qx), np.zeros(3))
    centre = np.array([0.0, 0.0, distance])
    return Pose(rot.rotation, centre + rot.R @ np.array([0.0, 0.0, -distance]))


def _sample_gaussians(cfg: SynthConfig, rng: np.random.Generator) -> GaussianScene:
    g = cfg.num_gaussians
    half = cfg.box_size / 2
    means = rng.uniform(-half, half, size=(g, 3)) + np.array([0.0, 0.0, cfg.distance])
    opac = rng.uniform(0.5, 0.95, size=g)
    rot = rng.standard_normal((g, 4))
    scales = np.exp(rng.uniform(np.log(0.04), np.log(0.12), size=(g, 3))) * cfg.box_size
    sh = np.zeros((g, sh_coeff_count(cfg.sh_degree), 3))
    sh[:, 0] = rgb_to_sh_dc(rng.uniform(0.05, 0.95, size=(g, 3)))
    if cfg.sh_degree > 0:
        sh[:, 1:] = rng.normal(0.0, 0.05, size=sh[:, 1:].shape)
    return GaussianScene.from_activated(means, opac, rot, scales, sh)


def _camera_angles(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    ctx = np.linspace(0.0, cfg.arc_deg, cfg.num_views)
    mids = (ctx[:-1] + ctx[1:]) / 2
    tgt = np.array([mids[i % len(mids)] + (i // len(mids)) * 0.25 * (ctx[1] - ctx[0])
                    for i in range(cfg.num_targets)])
    return ctx, tgt


def synth_gen(cfg: SynthConfig, seed: int) -> SyntheticScene:
    """Sample a scene and render its context and target views.

    A sample whose Gaussians are all culled in some view is redrawn from the
    next child seed; the reasons are kept in ``diagnostics``.
    """
    K = cfg.intrinsics()
    children = np.random.SeedSequence(seed).spawn(MAX_ATTEMPTS)
    diagnostics: list[str] = []
    for attempt, child in enumerate(children, start=1):
        rng = np.random.default_rng(child)
        scene = _sample_gaussians(cfg, rng)
        ctx_deg, tgt_deg = _camera_angles(cfg)
        elev = rng.uniform(-cfg.elevation_deg, cfg.elevation_deg, size=len(ctx_deg) + len(tgt_deg))
        elev[0] = 0.0
        ctx = [orbit_pose(t, e, cfg.distance) for t, e in zip(ctx_deg, elev)]
        ctx[0] = Pose.identity()
        tgt = [orbit_pose(t, e, cfg.distance) for t, e in zip(tgt_deg, elev[len(ctx_deg):])]
        imgs, ok = [], True
        for i, pose in enumerate(ctx + tgt):
            out = render(scene, pose, K)
            if out.stats.n_rendered == 0:
                diagnostics.append(f"attempt {attempt}: every Gaussian culled in view {i}")
                ok = False
                break
            imgs.append(out.pixels)
        if ok:
            n = len(ctx)
            return SyntheticScene(
                gt_scene=scene, intrinsics=K, context_poses=ctx,
                context_images=np.stack(imgs[:n]).astype(np.float32),
                target_poses=tgt,
                target_images=np.stack(imgs[n:]).astype(np.float32) if tgt else np.zeros((0, cfg.height, cfg.width, 3), np.float32),
                seed=seed, config=cfg, attempts=attempt, diagnostics=diagnostics,
            )
    raise SynthError("unrenderable configuration: " + "; ".join(diagnostics))


# -- on-disk layout -------------------------------------------------------------------------


def save_scene(scene: SyntheticScene, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    export_ply(scene.gt_scene, out / "gt_scene.ply")
    save_trajectory(out / "trajectory.txt", scene.context_poses)
    save_trajectory(out / "targets.txt", scene.target_poses)
    for kind, imgs in (("context", scene.context_images), ("target", scene.target_images)):
        for i, img in enumerate(imgs):
            write_ppm(out / f"{kind}_{i:02d}.ppm", img)
            write_raw(out / f"{kind}_{i:02d}.raw", img)
    K = scene.intrinsics
    meta = {
        "seed": scene.seed,
        "attempts": scene.attempts,
        "diagnostics": scene.diagnostics,
        "config": asdict(scene.config),
        "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.width, "height": K.height},
    }
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def load_scene(path) -> SyntheticScene:
    d = Path(path)
    meta_path = d / "scene.json"
    if not meta_path.exists():
        raise SynthError(f"no scene.json in {d}")
    meta = json.loads(meta_path.read_text())
    cfg = SynthConfig(**meta["config"])
    K = Intrinsics(**meta["intrinsics"])
    ctx = load_trajectory(d / "trajectory.txt")
    tgt = load_trajectory(d / "targets.txt") if (d / "targets.txt").read_text().strip() else []

    def images(kind, n):
        if n == 0:
            return np.zeros((0, K.height, K.width, 3), np.float32)
        return np.stack([read_raw(d / f"{kind}_{i:02d}.raw") for i in range(n)]).astype(np.float32)

    return SyntheticScene(
        gt_scene=import_ply(d / "gt_scene.ply"), intrinsics=K,
        context_poses=ctx, context_images=images("context", len(ctx)),
        target_poses=tgt, target_images=images("target", len(tgt)),
        seed=int(meta["seed"]), config=cfg, attempts=int(meta["attempts"]),
        diagnostics=list(meta["diagnostics"]),
    )


# -- overlap benchmark --------------------------------------------------------------------------


def overlap_benchmark_positions(n_views: int, patch_centres: np.ndarray, depth: float = 2.0,
                                baseline: float = 0.5) -> np.ndarray:
    """Ideal coarse positions for N largely overlapping views of a fronto-parallel plane.

    Cameras share the reference orientation and are spread over ``baseline``
    along x. ``patch_centres`` are the unit-depth camera rays of the patch
    grid, (P, 3). Returns (N*P, 3) ray/plane hits in the reference frame.
    """
    if n_views < 1:
        raise SynthError("need at least one view")
    offsets = np.linspace(0.0, baseline, n_views) if n_views > 1 else np.zeros(1)
    hits = [patch_centres * depth + np.array([dx, 0.0, 0.0]) for dx in offsets]
    return np.concatenate(hits)
