"""Coarse token positions, voxel grouping, confidence-weighted fusion and the
token-to-Gaussian and pose heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import ConvTranspose2d, Linear, Module
from .autodiff.tensor import Parameter, Tensor
from .backbone import ModelConfig

MASK_LOGIT = -1e9
QUAT_EPS = 1e-6  # added to w before normalising a predicted quaternion
LOG_SCALE_MIN = math.log(1e-6)
LOG_SCALE_MAX = math.log(1e2)


class FusionError(ValueError):
    pass


# -- coarse prediction -------------------------------------------------------------------


class CoarseHead(Module):
    """Per-token position + confidence from the concatenated decoder taps.

    The last layer starts at zero so positions begin at the supplied prior
    (unit-depth patch rays) and all confidences are equal.
    """

    def __init__(self, dim: int, n_taps: int, rng: np.random.Generator):
        self.fc1 = Linear(dim * n_taps, dim, rng)
        self.fc2 = Linear(dim, 4, rng, zero_init=True)

    def forward(self, taps: list[Tensor], prior: np.ndarray) -> tuple[Tensor, Tensor]:
        out = self.fc2(T.relu(self.fc1(T.concat(taps, axis=-1))))
        return out[..., :3] + prior.astype(out.dtype), out[..., 3]


# -- grouping and fusion ---------------------------------------------------------------------


def voxel_keys(positions: np.ndarray, eps: float) -> np.ndarray:
    if eps <= 0:
        raise FusionError(f"grouping size must be positive, got {eps}")
    return np.floor(np.asarray(positions, dtype=np.float64) / eps).astype(np.int64)


def group_tokens(positions: np.ndarray, eps: float) -> list[np.ndarray]:
    """Partition token indices by the ``eps`` voxel their position falls in.

    Groups come out ordered by voxel key, members by index, so the result
    depends only on the set of (index, position) pairs.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        return []
    keys = voxel_keys(positions, eps)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.flatnonzero(np.diff(inverse[order])) + 1
    return list(np.split(order, bounds))


def membership_mask(groups: list[np.ndarray], n: int, dtype=np.float32) -> np.ndarray:
    """(G, n) additive mask: 0 for members, a large negative logit elsewhere."""
    mask = np.full((len(groups), n), MASK_LOGIT, dtype=dtype)
    for g, members in enumerate(groups):
        mask[g, members] = 0.0
    return mask


def fusion_weights(logits: Tensor, groups: list[np.ndarray]) -> Tensor:
    """(G, n) softmax over each group's member logits; zero off-group."""
    if any(len(m) == 0 for m in groups):
        raise FusionError("cannot fuse an empty group")
    n = logits.shape[0]
    mask = membership_mask(groups, n, logits.dtype)
    return T.softmax(T.expand(logits, (len(groups), n)) + mask, axis=-1)


@dataclass
class FusedTokens:
    features: Tensor          # (G, D), the deepest tap
    positions: Tensor         # (G, 3)
    taps: list[Tensor]        # n_l tensors of (G, D)
    member_count: np.ndarray  # (G,)
    groups: list[np.ndarray]
    weights: Tensor           # (G, n)

    def __len__(self) -> int:
        return len(self.groups)


def fuse_tokens(taps: list[Tensor], positions: Tensor, logits: Tensor, groups: list[np.ndarray]) -> FusedTokens:
    """Softmax-weighted merge of every group's features, positions and taps."""
    w = fusion_weights(logits, groups)
    fused_taps = [T.matmul(w, f) for f in taps]
    return FusedTokens(
        features=fused_taps[-1],
        positions=T.matmul(w, positions),
        taps=fused_taps,
        member_count=np.array([len(m) for m in groups], dtype=np.int64),
        groups=groups,
        weights=w,
    )


def fuse_group(features: Tensor, positions: Tensor, logits: Tensor) -> tuple[Tensor, Tensor]:
    """Fuse one group of members given as (m, D) features, (m, 3) positions, (m,) logits."""
    if features.shape[0] == 0:
        raise FusionError("cannot fuse an empty group")
    fused = fuse_tokens([features], positions, logits, [np.arange(features.shape[0])])
    return fused.features[0], fused.positions[0]


# -- Gaussian head ------------------------------------------------------------------------------


def level_sizes(k: int, n_levels: int = 4) -> list[int]:
    """Spatial size of each projected level: shallow levels are upsampled most."""
    return [max(k >> i, 1) for i in range(n_levels)]


class Upsample(Module):
    """Channel-last wrapper around a stride-f transposed convolution (f >= 1)."""

    def __init__(self, dim: int, factor: int, rng: np.random.Generator):
        self.factor = factor
        self.conv = ConvTranspose2d(dim, dim, factor, factor, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(T.transpose(x, (0, 3, 1, 2)))
        return T.transpose(y, (0, 2, 3, 1))


class Residual(Module):
    """x + fc2(relu(fc1(x)))."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.fc2(T.relu(self.fc1(x)))


class Projection(Module):
    """Channel projection, upsample, two linear layers."""

    def __init__(self, dim: int, width: int, size: int, rng: np.random.Generator):
        self.channel = Linear(dim, width, rng)
        self.up = Upsample(width, size, rng)
        self.fc1 = Linear(width, width, rng)
        self.fc2 = Linear(width, width, rng)

    def forward(self, f: Tensor) -> Tensor:
        x = T.reshape(self.channel(f), (f.shape[0], 1, 1, -1))
        return self.fc2(T.relu(self.fc1(self.up(x))))


class FusionStage(Module):
    """Residual fusion: add the (transformed) deeper result, refine, upsample, project."""

    def __init__(self, width: int, factor: int, deepest: bool, rng: np.random.Generator):
        self.skip = None if deepest else Residual(width, rng)
        self.refine = Residual(width, rng)
        self.up = Upsample(width, factor, rng)
        self.out = Linear(width, width, rng)

    def forward(self, x: Tensor, deeper: Tensor | None = None) -> Tensor:
        if deeper is not None:
            x = x + self.skip(deeper)
        return self.out(self.up(self.refine(x)))


def gaussian_channels(sh_degree: int) -> int:
    # offset(3) opacity(1) rotation(4) log-scale(3) sh
    return 11 + 3 * (sh_degree + 1) ** 2


class GaussianHead(Module):
    """Each fused token -> a k x k grid of Gaussians (K = k^2)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, n_levels: int = 4):
        self.k = math.isqrt(cfg.k_per_token)
        self.sh_degree = cfg.sh_degree
        width = cfg.fuse_dim
        self.sizes = level_sizes(self.k, n_levels)
        self.proj = [Projection(cfg.embed_dim, width, s, rng) for s in self.sizes]
        # stage i upsamples from level i to the (finer) level i-1; stage 0 stays at k
        self.stages = [
            FusionStage(width, (self.sizes[i - 1] if i else self.k) // self.sizes[i], i == n_levels - 1, rng)
            for i in range(n_levels)
        ]
        self.pred = Linear(width, gaussian_channels(cfg.sh_degree), rng)
        self.pred.weight.data *= 0.1
        # footprint of one sub-Gaussian at unit depth, roughly half a sub-patch
        self.init_scale = 0.5 * cfg.patch_size / (cfg.width * self.k)
        self.offset_scale = 2.0 * self.init_scale
        bias = np.zeros(gaussian_channels(cfg.sh_degree), np.float32)
        bias[4] = 1.0  # rotation w
        bias[8:11] = math.log(self.init_scale)
        self.pred.bias.data = bias

    def features(self, taps: list[Tensor]) -> list[Tensor]:
        """Projected levels (the F-hat maps), each (G, s, s, width)."""
        return [p(f) for p, f in zip(self.proj, taps)]

    def forward(self, fused: FusedTokens) -> dict[str, Tensor]:
        levels = self.features(fused.taps)
        x = None
        for i in reversed(range(len(levels))):
            x = self.stages[i](levels[i], x)
        g = fused.positions.shape[0]
        raw = T.reshape(self.pred(T.relu(x)), (g * self.k * self.k, -1))
        return self.activate(raw, fused.positions)

    def activate(self, raw: Tensor, positions: Tensor) -> dict[str, Tensor]:
        per = self.k * self.k
        owner = np.repeat(np.arange(positions.shape[0]), per)
        offsets = raw[:, 0:3] * self.offset_scale
        rot = raw[:, 4:8]
        n_sh = (self.sh_degree + 1) ** 2
        return {
            "means": T.getitem(positions, owner) + offsets,
            "offsets": offsets,
            "opacities": T.sigmoid(raw[:, 3]),
            "rotations": unit_quaternion(rot),
            # clamping the exponent keeps the gradient finite where exp would overflow
            "scales": T.exp(T.clamp(raw[:, 8:11], LOG_SCALE_MIN, LOG_SCALE_MAX)),
            "sh": T.reshape(raw[:, 11:], (raw.shape[0], n_sh, 3)),
        }


def unit_quaternion(q: Tensor) -> Tensor:
    """Normalise (..., 4) quaternions after shifting w by a tiny constant.

    The shift keeps an all-zero output well defined (it maps to identity).
    """
    e = np.zeros(q.shape, dtype=q.dtype)
    e[..., 0] = QUAT_EPS
    q = q + e
    return q / T.expand(T.norm(q, axis=-1, keepdims=True), q.shape)


# -- pose head -----------------------------------------------------------------------------


class PoseHead(Module):
    """ReLU then a single (D, 7) linear layer: quaternion (w,x,y,z) + translation."""

    def __init__(self, dim: int, rng: np.random.Generator, init_std: float = 1e-2):
        self.fc = Linear(dim, 7, rng)
        self.fc.weight.data = (rng.standard_normal((7, dim)) * init_std).astype(np.float32)
        self.fc.bias.data = np.array([1, 0, 0, 0, 0, 0, 0], np.float32)

    def forward(self, cam: Tensor) -> tuple[Tensor, Tensor]:
        raw = self.fc(T.relu(cam))
        return pose_from_raw(raw)


def pose_from_raw(raw: Tensor) -> tuple[Tensor, Tensor]:
    """Split a (..., 7) output into a unit quaternion and a translation.

    The quaternion is shifted by a tiny w offset before normalising, so an
    all-zero output maps to the identity rotation instead of NaN.
    """
    return unit_quaternion(raw[..., 0:4]), raw[..., 4:7]


class CameraEmbedding(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.embedding = Parameter((rng.standard_normal((1, 1, dim)) * 0.02).astype(np.float32))
