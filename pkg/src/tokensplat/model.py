"""The full feed-forward model: images -> canonical Gaussians + relative poses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adf import AdfBlock, camera_token_init
from .autodiff import tensor as T
from .autodiff.nn import LayerNorm, Module
from .autodiff.tensor import Tensor
from .backbone import CanonicalBlock, ConfigError, Encoder, ModelConfig, patch_rays
from .fusion import CameraEmbedding, CoarseHead, FusedTokens, GaussianHead, PoseHead, fuse_tokens, group_tokens
from .gaussians import GaussianScene
from .geometry import Intrinsics, Pose


@dataclass
class ModelOutput:
    gaussians: dict[str, Tensor]
    pose_q: Tensor            # (N-1, 4) unit quaternions, camera -> canonical
    pose_t: Tensor            # (N-1, 3)
    fused: FusedTokens
    coarse_positions: Tensor  # (N*P, 3)
    confidences: Tensor       # (N*P,)
    taps: list[Tensor]        # (N, T, D) tokens at each tap depth
    cam_tokens: Tensor        # (N-1, 1, D) after the last block
    counts: dict[str, int] = field(default_factory=dict)

    def scene(self) -> GaussianScene:
        g = self.gaussians
        return GaussianScene.from_activated(
            g["means"].data, g["opacities"].data, g["rotations"].data, g["scales"].data, g["sh"].data
        )

    def poses(self) -> list[Pose]:
        """Predicted trajectory with the reference view first."""
        out = [Pose.identity()]
        for q, t in zip(self.pose_q.data.astype(np.float64), self.pose_t.data.astype(np.float64)):
            out.append(Pose(q, t))
        return out


class TokenSplat(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        self.encoder = Encoder(cfg, rng)
        self.camera = CameraEmbedding(d, rng)
        self.canonical = [CanonicalBlock(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.decoder_depth)]
        self.adf = [AdfBlock(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.decoder_depth)]
        self.cam_norm = LayerNorm(d)
        self.coarse = CoarseHead(d, len(cfg.taps()), rng)
        self.head = GaussianHead(cfg, rng)
        self.pose_head = PoseHead(d, rng)

    def decode(self, tokens: Tensor) -> tuple[list[Tensor], Tensor]:
        """Run the reference and non-reference decoders in lockstep.

        Returns tokens at each tap depth and the final camera tokens.
        """
        n = tokens.shape[0]
        cams = camera_token_init(self.camera.embedding, n)
        taps = self.cfg.taps()
        by_depth = {0: tokens}
        for depth, (cblk, ablk) in enumerate(zip(self.canonical, self.adf), start=1):
            ref = cblk(tokens[0:1], tokens[1:])
            img, cams = ablk(tokens, cams, self.cfg.pnv)
            tokens = T.concat([ref, img], axis=0)
            if depth in taps:
                by_depth[depth] = tokens
        # shallow decoders repeat a depth, e.g. (0, 1, 2, 2)
        return [by_depth[d] for d in taps], cams

    def forward(self, images, intrinsics: list[Intrinsics], eps: float | None = None) -> ModelOutput:
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float32)
        n = images.shape[0]
        if n < 2:
            raise ConfigError(f"the model needs at least 2 views, got {n}")
        if images.shape[1:] != (cfg.height, cfg.width, 3):
            raise ConfigError(f"images are {images.shape[1:]}, model expects {(cfg.height, cfg.width, 3)}")
        if len(intrinsics) != n:
            raise ConfigError(f"{len(intrinsics)} intrinsics for {n} views")

        tokens = self.encoder(images, intrinsics)
        taps, cams = self.decode(tokens)

        p = cfg.num_patches
        flat_taps = [T.reshape(t[:, :p], (n * p, cfg.embed_dim)) for t in taps]
        prior = np.concatenate([patch_rays(cfg, K) for K in intrinsics]).astype(np.float32)
        positions, logits = self.coarse(flat_taps, prior)
        groups = group_tokens(positions.data, cfg.epsilon if eps is None else eps)
        fused = fuse_tokens(flat_taps, positions, logits, groups)
        gaussians = self.head(fused)
        pose_q, pose_t = self.pose_head(T.reshape(self.cam_norm(cams), (n - 1, cfg.embed_dim)))

        counts = {
            "input_tokens": n * p,
            "fused_tokens": len(fused),
            "gaussians": gaussians["means"].shape[0],
            "pixel_aligned": n * p * cfg.k_per_token,
        }
        return ModelOutput(gaussians, pose_q, pose_t, fused, positions, logits, taps, cams, counts)
