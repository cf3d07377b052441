"""Patch-embedding ViT encoder, intrinsic token and the reference-view decoder.

Token tensors are batched over views: image tokens are (V, T, D), where the
intrinsic token (when enabled) is the last of the T tokens.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import LayerNorm, Linear, MLP, Module
from .autodiff.tensor import Parameter, Tensor
from .geometry import Intrinsics


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 16
    embed_dim: int = 64
    encoder_depth: int = 4
    decoder_depth: int = 4
    heads: int = 4
    height: int = 64
    width: int = 64
    pnv: int = 8
    epsilon: float = 0.05
    k_per_token: int = 4
    fuse_dim: int = 64
    sh_degree: int = 1
    mlp_ratio: int = 4
    intrinsic_token: bool = True
    lambda_lpips: float = 0.0
    lambda_c: float = 1.0

    def __post_init__(self):
        p = self.patch_size
        if p <= 0 or self.height % p or self.width % p:
            raise ConfigError(f"image {self.height}x{self.width} is not divisible by patch size {p}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.pnv < 2:
            raise ConfigError(f"pnv must be >= 2, got {self.pnv}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        k = math.isqrt(self.k_per_token)
        if self.k_per_token < 1 or k * k != self.k_per_token or k & (k - 1):
            raise ConfigError(f"k_per_token must be a square of a power of two, got {self.k_per_token}")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError(f"sh_degree must be in 0..3, got {self.sh_degree}")
        if self.encoder_depth < 0 or self.decoder_depth < 0:
            raise ConfigError("depths must be non-negative")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def num_tokens(self) -> int:
        return self.num_patches + int(self.intrinsic_token)

    def taps(self) -> tuple[int, ...]:
        """Decoder depths whose outputs feed the multi-scale heads (0 = decoder input)."""
        d = self.decoder_depth
        return (0, -(-d // 2), -(-3 * d // 4), d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# -- patches -------------------------------------------------------------------


def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """(..., H, W, 3) -> (..., H/p * W/p, 3 p^2), patches in row-major order."""
    image = np.asarray(image)
    *lead, h, w, c = image.shape
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {p}")
    x = image.reshape(*lead, h // p, p, w // p, p, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(patches: np.ndarray, p: int, h: int, w: int) -> np.ndarray:
    patches = np.asarray(patches)
    *lead, n, d = patches.shape
    c = d // (p * p)
    if n != (h // p) * (w // p) or c * p * p != d:
        raise ConfigError(f"cannot unpatchify {patches.shape} into {h}x{w} with patch {p}")
    x = patches.reshape(*lead, h // p, w // p, p, p, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, h, w, c)


def sincos_pos_embed(gh: int, gw: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal embedding, (gh*gw, dim); half the channels per axis."""
    if dim % 4:
        raise ConfigError(f"positional embedding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    ys, xs = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")

    def axis(pos):
        ang = pos.reshape(-1)[:, None] * omega[None]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    return np.concatenate([axis(ys), axis(xs)], axis=1).astype(np.float32)


def patch_rays(cfg: ModelConfig, K: Intrinsics) -> np.ndarray:
    """Camera-frame points at unit depth through each patch centre, (num_patches, 3)."""
    gh, gw = cfg.grid
    p = cfg.patch_size
    sx, sy = K.width / cfg.width, K.height / cfg.height
    v, u = np.meshgrid((np.arange(gh) + 0.5) * p * sy, (np.arange(gw) + 0.5) * p * sx, indexing="ij")
    x = (u.reshape(-1) - K.cx) / K.fx
    y = (v.reshape(-1) - K.cy) / K.fy
    return np.stack([x, y, np.ones_like(x)], axis=1)


# -- attention -----------------------------------------------------------------------


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, return_weights: bool = False):
    """softmax(q k^T / sqrt(d)) v, batched: q (B, Tq, D), k/v (B, Tk, D)."""
    d = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = T.matmul(qh, T.swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(d))
    weights = T.softmax(scores, axis=-1)
    out = merge_heads(T.matmul(weights, vh))
    return (out, weights) if return_weights else out


class Attention(Module):
    """Multi-head attention with separate query and key/value sources."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def forward(self, xq: Tensor, xkv: Tensor) -> Tensor:
        return self.wo(attend(self.wq(xq), self.wk(xkv), self.wv(xkv), self.heads))


class EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))


class Encoder(Module):
    """Weight-shared per-view ViT; views are a batch axis and never interact."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = Linear(3 * cfg.patch_size ** 2, d, rng)
        self.intrinsic_embed = Linear(4, d, rng) if cfg.intrinsic_token else None
        self.blocks = [EncoderBlock(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.encoder_depth)]
        self.norm = LayerNorm(d)
        self.pos = sincos_pos_embed(*cfg.grid, d)

    def intrinsic_token(self, k_norm) -> Tensor:
        """Token from normalised intrinsics (fx/W, fy/H, cx/W, cy/H), shape (V, 1, D)."""
        k = np.asarray(k_norm, dtype=np.float32).reshape(-1, 1, 4)
        return self.intrinsic_embed(Tensor(k))

    def forward(self, images: np.ndarray, intrinsics: list[Intrinsics]) -> Tensor:
        cfg = self.cfg
        patches = patchify(np.asarray(images, dtype=np.float32), cfg.patch_size)
        x = self.patch_embed(Tensor(patches)) + self.pos
        if self.intrinsic_embed is not None:
            x = T.concat([x, self.intrinsic_token([K.normalized() for K in intrinsics])], axis=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class CanonicalBlock(Module):
    """Reference-view decoder block: self-attention, cross-attention to the
    other views' tokens, MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.self_attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.cross_attn = Attention(dim, heads, rng)
        self.norm3 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)

    def forward(self, ref: Tensor, others: Tensor) -> Tensor:
        """``ref`` is (1, T, D); ``others`` is (V-1, T, D) from the block-input snapshot."""
        h = self.norm1(ref)
        x = ref + self.self_attn(h, h)
        v, t, d = others.shape
        pool = T.reshape(self.norm_kv(others), (1, v * t, d))
        x = x + self.cross_attn(self.norm2(x), pool)
        return x + self.mlp(self.norm3(x))


def canonical_decode(blocks: list[CanonicalBlock], ref: Tensor, others: Tensor) -> Tensor:
    """Run reference-only decoding against fixed other-view tokens."""
    if others.shape[0] < 1:
        raise ConfigError("the reference decoder needs at least one other view")
    for blk in blocks:
        ref = blk(ref, others)
    return ref


def learnable(shape, rng: np.random.Generator, std: float = 0.02) -> Parameter:
    return Parameter((rng.standard_normal(shape) * std).astype(np.float32))
