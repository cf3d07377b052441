"""Asymmetric dual-flow decoder for the non-reference views.

Image tokens of view i see camera information only through the modulation
MLPs driven by camera token i. Camera tokens read image tokens (own view in
self-attention, other views plus their camera tokens in cross-attention).
All cross-view reads use the block-input snapshot, so per-view work inside a
block is order independent.
"""

from __future__ import annotations

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import LayerNorm, Linear, MLP, Module
from .autodiff.tensor import Tensor
from .backbone import ConfigError, attend


def neighbor_views(i: int, n: int, pnv: int) -> list[int]:
    """The ``pnv - 1`` views closest to ``i`` by index, excluding ``i``.

    Ties (equal distance before and after) go to the lower index. Near the
    ends of the sequence the window slides inward, so every view gets
    ``min(pnv - 1, n - 1)`` neighbours.
    """
    others = sorted((j for j in range(n) if j != i), key=lambda j: (abs(j - i), j))
    return sorted(others[: max(pnv - 1, 0)])


def pool_index(views: list[int], tokens: int) -> np.ndarray:
    """Flat row indices of the listed views in a (V*T, D) token table."""
    return np.concatenate([np.arange(j * tokens, (j + 1) * tokens) for j in views])


def expand_rows(x: Tensor, n: int) -> Tensor:
    """(B, 1, D) -> (B, n, D)."""
    return T.expand(x, (x.shape[0], n, x.shape[2]))


def camera_token_init(embedding: Tensor, n_views: int) -> Tensor:
    """Duplicate the single learnable camera embedding for the N-1 non-reference views."""
    if n_views < 2:
        raise ConfigError(f"need at least 2 views, got {n_views}")
    return T.expand(embedding, (n_views - 1,) + tuple(embedding.shape[1:]))


class Modulation(Module):
    """Camera token -> ``parts`` vectors of width D; zero output at init."""

    def __init__(self, dim: int, parts: int, rng: np.random.Generator):
        self.parts = parts
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, parts * dim, rng, zero_init=True)

    def forward(self, cam: Tensor) -> list[Tensor]:
        out = self.fc2(T.gelu(self.fc1(cam)))
        d = out.shape[-1] // self.parts
        return [out[..., k * d:(k + 1) * d] for k in range(self.parts)]


def modulate_pre(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """x * (1 + scale) + shift, with per-view (B, 1, D) parameters."""
    n = x.shape[1]
    return x * (1.0 + expand_rows(scale, n)) + expand_rows(shift, n)


def modulate_post(x: Tensor, gate: Tensor) -> Tensor:
    return x * (1.0 + expand_rows(gate, x.shape[1]))


class AdfBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.heads = heads
        # self-attention site
        self.norm1 = LayerNorm(dim)
        self.norm1_cam = LayerNorm(dim)
        self.pre_mod = Modulation(dim, 2, rng)
        self.post_mod = Modulation(dim, 1, rng)
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.cam_q = Linear(dim, dim, rng)
        self.cam_o = Linear(dim, dim, rng)
        # cross-view site; keys/values are shared by the image and camera flows
        self.norm2 = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.norm2_cam = LayerNorm(dim)
        self.norm_kv_cam = LayerNorm(dim)
        self.xq = Linear(dim, dim, rng)
        self.xk = Linear(dim, dim, rng)
        self.xv = Linear(dim, dim, rng)
        self.xo = Linear(dim, dim, rng)
        self.cam_xq = Linear(dim, dim, rng)
        self.cam_xo = Linear(dim, dim, rng)
        # feed-forward
        self.norm3 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)
        self.norm3_cam = LayerNorm(dim)
        self.mlp_cam = MLP(dim, dim * mlp_ratio, rng)

    # -- sub-layers, exposed for the directional tests -------------------------

    def self_attention(self, img: Tensor, cam: Tensor, pre: tuple[Tensor, Tensor] | None = None
                       ) -> tuple[Tensor, Tensor]:
        """Own-view self-attention.

        ``img`` (B, T, D) and ``cam`` (B, 1, D) belong to the same views.
        Returns the image attention branch (before gating) and the updated
        camera tokens. ``pre`` overrides the (scale, shift) the camera token
        would predict, which isolates the attention from the modulation path.
        """
        scale, shift = self.pre_mod(cam) if pre is None else pre
        h = modulate_pre(self.norm1(img), scale, shift)
        k, v = self.wk(h), self.wv(h)
        branch = self.wo(attend(self.wq(h), k, v, self.heads))
        cam = cam + self.cam_o(attend(self.cam_q(self.norm1_cam(cam)), k, v, self.heads))
        return branch, cam

    def snapshot_kv(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        """Cross-view keys/values of every view as flat (V*T, D) tables."""
        v, t, d = tokens.shape
        h = self.norm_kv(tokens)
        return T.reshape(self.xk(h), (v * t, d)), T.reshape(self.xv(h), (v * t, d))

    def cross_view_attention(self, img: Tensor, k_flat: Tensor, v_flat: Tensor, pools: np.ndarray) -> Tensor:
        """Image tokens of each query view attend to their pooled neighbour views.

        ``pools`` is (B, M*T) rows into the flat tables; it never lists the
        query view's own rows.
        """
        q = self.xq(self.norm2(img))
        return self.xo(attend(q, T.getitem(k_flat, pools), T.getitem(v_flat, pools), self.heads))

    def camera_cross_attention(self, cam: Tensor, k_flat: Tensor, v_flat: Tensor, cam_snapshot: Tensor,
                               pools: np.ndarray, tokens: int) -> Tensor:
        """Camera tokens attend to other views' image keys plus their repeated camera keys.

        ``cam_snapshot`` is (V-1, 1, D) for views 1..V-1; the reference view
        has no camera token and contributes only image keys.
        """
        n_cam, _, d = cam_snapshot.shape
        hc = self.norm_kv_cam(T.reshape(cam_snapshot, (n_cam, d)))
        zero = T.zeros((1, d), dtype=k_flat.dtype)
        kc = T.concat([zero, self.xk(hc)], axis=0)
        vc = T.concat([zero, self.xv(hc)], axis=0)
        rep = np.repeat(np.arange(n_cam + 1), tokens)
        k = T.getitem(k_flat, pools) + T.getitem(kc, rep[pools])
        v = T.getitem(v_flat, pools) + T.getitem(vc, rep[pools])
        q = self.cam_xq(self.norm2_cam(cam))
        return self.cam_xo(attend(q, k, v, self.heads))

    def forward(self, tokens: Tensor, cams: Tensor, pnv: int) -> tuple[Tensor, Tensor]:
        """One block for views 1..V-1.

        ``tokens`` is the (V, T, D) block-input snapshot of all views, the
        reference at index 0. Returns updated (V-1, T, D) image tokens and
        (V-1, 1, D) camera tokens.
        """
        n, t, _ = tokens.shape
        img = tokens[1:]
        branch, cam = self.self_attention(img, cams)
        (gate,) = self.post_mod(cam)
        img = img + modulate_post(branch, gate)

        k_flat, v_flat = self.snapshot_kv(tokens)
        view_pools = np.stack([pool_index(neighbor_views(i, n, pnv), t) for i in range(1, n)])
        img = img + self.cross_view_attention(img, k_flat, v_flat, view_pools)
        cam_pools = np.stack([pool_index([j for j in range(n) if j != i], t) for i in range(1, n)])
        cam = cam + self.camera_cross_attention(cam, k_flat, v_flat, cams, cam_pools, t)

        img = img + self.mlp(self.norm3(img))
        cam = cam + self.mlp_cam(self.norm3_cam(cam))
        return img, cam
