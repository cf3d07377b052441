"""Differentiable Gaussian splat rasterizer.

Per-Gaussian work (view transform, EWA covariance projection, SH colour) is
expressed with autodiff tensor ops, so its gradients come from the tape.
Per-pixel compositing is a single custom op with a hand-written backward,
evaluated exactly for every pixel against every surviving splat.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as T
from .autodiff import Tensor
from .gaussians import SH_DC_OFFSET, Gaussian3D, GaussianScene, sh_basis, sh_degree_for
from .geometry import NEAR_PLANE, Intrinsics, Pose, _rotmat_entries

COV2D_FLOOR = 0.3  # px^2 added to the projected covariance diagonal
ALPHA_MAX = 0.99
T_MIN = 1e-4  # compositing stops once transmittance would drop below this
CULL_SIGMA = 3.0
DET_EPS = 1e-12
CHUNK_ELEMS = 1 << 20


class RenderError(ValueError):
    pass


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("TOKENSPLAT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    rgb: np.ndarray
    opacity: float


@dataclass
class RenderStats:
    n_input: int = 0
    n_culled_near: int = 0
    n_culled_outside: int = 0
    n_skipped_singular: int = 0
    n_rendered: int = 0


@dataclass
class RenderedImage:
    pixels: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    stats: RenderStats = field(default_factory=RenderStats)


@dataclass
class RenderOutput:
    """Differentiable render result: tensors still attached to the tape."""

    pixels: Tensor
    alpha: Tensor
    stats: RenderStats


# -- tensor helpers ------------------------------------------------------------------


def _normalize_rows(q: Tensor) -> Tensor:
    return q / T.expand(T.norm(q, axis=-1, keepdims=True), q.shape)


def quat_to_rotmat_t(q: Tensor) -> Tensor:
    """Rotation matrices from (..., 4) quaternions (normalised internally)."""
    qn = _normalize_rows(q)
    return T.stack(_rotmat_entries(qn), axis=-1).reshape(q.shape[:-1] + (3, 3))


def sh_to_rgb_t(sh: Tensor, dirs: Tensor) -> Tensor:
    """Clamped RGB from (G, n, 3) coefficients along unit (G, 3) directions."""
    g, n, _ = sh.shape
    basis = T.stack(sh_basis(dirs, sh_degree_for(n)), axis=-1)  # (G, n)
    weighted = T.expand(basis.reshape(g, n, 1), (g, n, 3)) * sh
    return T.clamp(weighted.sum(axis=1) + SH_DC_OFFSET, 0.0, 1.0)


# -- projection ----------------------------------------------------------------------------


@dataclass
class _Projected:
    mean2d: Tensor  # (g, 2)
    cov2d: Tensor  # (g, 2, 2) including the floor
    conic: Tensor  # (g, 3): inverse covariance entries (a, b, c)
    rgb: Tensor  # (g, 3)
    opacity: Tensor  # (g,)
    depth: np.ndarray  # (g,)
    radius: np.ndarray  # (g,)
    index: np.ndarray  # indices into the input Gaussian list
    stats: RenderStats


def project_tensors(means: Tensor, opacities: Tensor, rotations: Tensor, scales: Tensor, sh: Tensor,
                    pose_q: Tensor, pose_t: Tensor, K: Intrinsics, near: float = NEAR_PLANE) -> _Projected:
    stats = RenderStats(n_input=means.shape[0])
    R_c2w = quat_to_rotmat_t(pose_q)
    pcam_all = (means - pose_t) @ R_c2w  # rows are R^T (mu - t)
    z_all = pcam_all.data[:, 2]
    keep = np.flatnonzero(z_all > near)
    stats.n_culled_near = int(means.shape[0] - keep.size)

    def take(t: Tensor, idx):
        return t if idx.size == t.shape[0] and np.array_equal(idx, np.arange(t.shape[0])) else t[idx]

    pcam = take(pcam_all, keep)
    mu, op, rot, sc, shc = (take(t, keep) for t in (means, opacities, rotations, scales, sh))
    g = len(keep)
    x, y, z = pcam[:, 0], pcam[:, 1], pcam[:, 2]

    Rg = quat_to_rotmat_t(rot)
    M = Rg * T.expand(sc.reshape(g, 1, 3), (g, 3, 3))
    cov3 = M @ T.swapaxes(M, -1, -2)
    iz = 1.0 / z
    zero = x * 0.0
    J = T.stack([K.fx * iz, zero, -K.fx * x * iz * iz, zero, K.fy * iz, -K.fy * y * iz * iz],
                axis=-1).reshape(g, 2, 3)
    TJ = J @ T.transpose(R_c2w)
    cov2 = TJ @ cov3 @ T.swapaxes(TJ, -1, -2)
    a = cov2[:, 0, 0] + COV2D_FLOOR
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + COV2D_FLOOR
    det = a * c - b * b
    u = K.fx * x * iz + K.cx
    v = K.fy * y * iz + K.cy

    mid = 0.5 * (a.data + c.data)
    lam = mid + np.sqrt(np.maximum(mid * mid - det.data, 0.0))
    radius = CULL_SIGMA * np.sqrt(np.maximum(lam, 0.0))
    singular = ~(det.data > DET_EPS)
    outside = (u.data + radius < 0) | (u.data - radius > K.width) | (v.data + radius < 0) | (v.data - radius > K.height)
    stats.n_skipped_singular = int(np.sum(singular & ~outside))
    stats.n_culled_outside = int(np.sum(outside))
    sel = np.flatnonzero(~singular & ~outside)
    stats.n_rendered = int(sel.size)

    a, b, c, det, u, v = (take(t, sel) for t in (a, b, c, det, u, v))
    mu, op, shc = take(mu, sel), take(op, sel), take(shc, sel)
    cov2 = take(cov2, sel)
    n = len(sel)
    conic = T.stack([c / det, -b / det, a / det], axis=-1)
    mean2d = T.stack([u, v], axis=-1)
    floor = Tensor(np.broadcast_to(np.eye(2) * COV2D_FLOOR, (n, 2, 2)).astype(cov2.dtype))
    cov2d = cov2 + floor

    if n:
        rel = mu - pose_t
        dirs = rel / T.expand(T.norm(rel, axis=-1, keepdims=True), rel.shape)
        rgb = sh_to_rgb_t(shc, dirs)
    else:
        rgb = Tensor(np.zeros((0, 3), dtype=means.dtype))
    return _Projected(mean2d, cov2d, conic, rgb, op, z_all[keep][sel], radius[sel], keep[sel], stats)


# -- compositing -------------------------------------------------------------------------------


def _pixel_grid(K: Intrinsics, dtype):
    ys, xs = np.meshgrid(np.arange(K.height, dtype=dtype) + 0.5, np.arange(K.width, dtype=dtype) + 0.5,
                         indexing="ij")
    return xs.reshape(-1), ys.reshape(-1)


def _row_chunks(K: Intrinsics, n_gauss: int) -> list[tuple[int, int]]:
    rows = max(1, min(K.height, CHUNK_ELEMS // max(1, n_gauss * K.width)))
    return [(r, min(K.height, r + rows)) for r in range(0, K.height, rows)]


def _chunk_gaussians(rows, mean, radius, K, tile_cull):
    if not tile_cull:
        return np.arange(len(mean))
    r0, r1 = rows
    v = mean[:, 1]
    return np.flatnonzero((v + radius >= r0) & (v - radius <= r1))


def _forward_chunk(px, py, mean, conic, rgb, opac, bg):
    if len(mean) == 0:
        empty = np.zeros((len(px), 0), dtype=px.dtype)
        ones = np.ones(len(px), dtype=px.dtype)
        return (np.broadcast_to(bg, (len(px), 3)).copy(), 1.0 - ones,
                (empty, empty, empty, empty, empty, empty, empty.astype(bool), empty, ones))
    dx = px[:, None] - mean[None, :, 0]
    dy = py[:, None] - mean[None, :, 1]
    power = -0.5 * (conic[None, :, 0] * dx * dx + conic[None, :, 2] * dy * dy) - conic[None, :, 1] * dx * dy
    gauss = np.exp(power)
    araw = opac[None, :] * gauss
    alpha = np.minimum(araw, ALPHA_MAX)
    t_incl = np.cumprod(1.0 - alpha, axis=1)
    live = t_incl >= T_MIN
    t_excl = np.empty_like(t_incl)
    t_excl[:, 0] = 1.0
    t_excl[:, 1:] = t_incl[:, :-1]
    w = alpha * t_excl * live
    n_live = live.sum(axis=1)
    last = np.maximum(n_live - 1, 0)
    t_final = np.where(n_live > 0, t_incl[np.arange(len(px)), last], 1.0)
    color = (w[:, :, None] * rgb[None, :, :]).sum(axis=1) + t_final[:, None] * bg[None, :]
    return color, 1.0 - t_final, (dx, dy, gauss, araw, alpha, t_excl, live, w, t_final)


def _backward_chunk(px, py, mean, conic, rgb, opac, bg, g_color, g_alpha):
    _, _, (dx, dy, gauss, araw, alpha, t_excl, live, w, t_final) = _forward_chunk(px, py, mean, conic, rgb, opac, bg)
    q = g_color @ rgb.T  # (P, G): dL/dw_j per pixel
    g_rgb = w.T @ g_color
    wq = w * q
    suffix = wq.sum(axis=1, keepdims=True) - np.cumsum(wq, axis=1)
    tail = (t_final * (g_color @ bg - g_alpha))[:, None]
    g_a = (t_excl * q - (suffix + tail) / (1.0 - alpha)) * live
    g_araw = g_a * (araw < ALPHA_MAX)
    g_opac = (g_araw * gauss).sum(axis=0)
    g_pow = g_araw * araw
    g_conic = np.stack([
        (-0.5 * g_pow * dx * dx).sum(axis=0),
        (-g_pow * dx * dy).sum(axis=0),
        (-0.5 * g_pow * dy * dy).sum(axis=0),
    ], axis=1)
    ca, cb, cc = conic[None, :, 0], conic[None, :, 1], conic[None, :, 2]
    g_mean = np.stack([(g_pow * (ca * dx + cb * dy)).sum(axis=0), (g_pow * (cb * dx + cc * dy)).sum(axis=0)], axis=1)
    return g_mean, g_conic, g_rgb, g_opac


def _map_chunks(fn, chunks, threads):
    if threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=min(threads, len(chunks))) as pool:
        return list(pool.map(fn, chunks))


def composite(mean2d: Tensor, conic: Tensor, rgb: Tensor, opacity: Tensor, depth: np.ndarray, K: Intrinsics,
              background=(0.0, 0.0, 0.0), tile_cull: bool = False, threads: int | None = None) -> tuple[Tensor, Tensor]:
    """Front-to-back alpha compositing of projected splats onto every pixel.

    Both returned tensors are views of one tape node, so a single backward
    pass serves gradients arriving through either of them.
    """
    threads = worker_count() if threads is None else threads
    dtype = np.float64 if mean2d.dtype == np.float64 else np.float32
    order = np.argsort(depth, kind="stable")
    mean = mean2d.data[order].astype(dtype)
    con = conic.data[order].astype(dtype)
    col = rgb.data[order].astype(dtype)
    opa = opacity.data[order].astype(dtype)
    bg = np.asarray(background, dtype=dtype)
    px, py = _pixel_grid(K, dtype)
    radius = _radius_from_conic(con)
    chunks = _row_chunks(K, len(order))
    npix_row = K.width

    def fwd(rows):
        sl = slice(rows[0] * npix_row, rows[1] * npix_row)
        idx = _chunk_gaussians(rows, mean, radius, K, tile_cull)
        c, a, _ = _forward_chunk(px[sl], py[sl], mean[idx], con[idx], col[idx], opa[idx], bg)
        return c, a

    results = _map_chunks(fwd, chunks, threads)
    color = np.concatenate([r[0] for r in results], axis=0).reshape(K.height, K.width, 3).astype(dtype)
    alpha = np.concatenate([r[1] for r in results], axis=0).reshape(K.height, K.width).astype(dtype)

    parents = (mean2d, conic, rgb, opacity)

    def backward(g):
        gc = g[..., :3].reshape(-1, 3).astype(dtype)
        ga = g[..., 3].reshape(-1).astype(dtype)

        def bwd(rows):
            sl = slice(rows[0] * npix_row, rows[1] * npix_row)
            idx = _chunk_gaussians(rows, mean, radius, K, tile_cull)
            return idx, _backward_chunk(px[sl], py[sl], mean[idx], con[idx], col[idx], opa[idx], bg, gc[sl], ga[sl])

        g_mean = np.zeros_like(mean)
        g_con = np.zeros_like(con)
        g_col = np.zeros_like(col)
        g_opa = np.zeros_like(opa)
        # per-chunk partials merged in chunk order
        for idx, (gm, gk, gr, go) in _map_chunks(bwd, chunks, threads):
            g_mean[idx] += gm
            g_con[idx] += gk
            g_col[idx] += gr
            g_opa[idx] += go
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        return tuple(gr[inv].astype(p.dtype) for gr, p in zip((g_mean, g_con, g_col, g_opa), parents))

    out = T.custom_op(np.concatenate([color, alpha[..., None]], axis=-1), parents, backward)
    return out[..., :3], out[..., 3]


def _radius_from_conic(con: np.ndarray) -> np.ndarray:
    if len(con) == 0:
        return np.zeros(0, dtype=con.dtype)
    det = con[:, 0] * con[:, 2] - con[:, 1] ** 2
    a, b, c = con[:, 2] / det, -con[:, 1] / det, con[:, 0] / det
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    return CULL_SIGMA * np.sqrt(np.maximum(lam, 0.0))


# -- public entry points --------------------------------------------------------------


def render_tensors(means: Tensor, opacities: Tensor, rotations: Tensor, scales: Tensor, sh: Tensor,
                   pose_q: Tensor, pose_t: Tensor, K: Intrinsics, background=(0.0, 0.0, 0.0),
                   tile_cull: bool = False, threads: int | None = None) -> RenderOutput:
    """Differentiable render of activated Gaussian attributes from a camera pose.

    ``pose_q``/``pose_t`` give the camera-to-canonical rotation (quaternion,
    normalised internally) and the camera centre.
    """
    proj = project_tensors(means, opacities, rotations, scales, sh, pose_q, pose_t, K)
    pixels, alpha = composite(proj.mean2d, proj.conic, proj.rgb, proj.opacity, proj.depth, K,
                              background, tile_cull, threads)
    return RenderOutput(pixels, alpha, proj.stats)


def scene_tensors(scene: GaussianScene, requires_grad: bool = False, dtype=np.float32) -> dict[str, Tensor]:
    """Activated attributes of ``scene`` as leaf tensors."""
    arrays = {
        "means": scene.means, "opacities": scene.opacities, "rotations": scene.rotations,
        "scales": scene.scales, "sh": scene.sh,
    }
    return {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=requires_grad, dtype=dtype) for k, v in arrays.items()}


def pose_tensors(pose: Pose, requires_grad: bool = False, dtype=np.float32) -> tuple[Tensor, Tensor]:
    return (Tensor(np.asarray(pose.rotation, dtype=dtype), requires_grad=requires_grad, dtype=dtype),
            Tensor(np.asarray(pose.translation, dtype=dtype), requires_grad=requires_grad, dtype=dtype))


def render(scene: GaussianScene, pose: Pose, K: Intrinsics, background=(0.0, 0.0, 0.0),
           tile_cull: bool = False, threads: int | None = None, dtype=np.float32) -> RenderedImage:
    with T.no_grad():
        st = scene_tensors(scene, dtype=dtype)
        q, t = pose_tensors(pose, dtype=dtype)
        out = render_tensors(st["means"], st["opacities"], st["rotations"], st["scales"], st["sh"], q, t, K,
                             background, tile_cull, threads)
    return RenderedImage(out.pixels.data.copy(), out.alpha.data.copy(), out.stats)


def render_backward(scene: GaussianScene, pose: Pose, K: Intrinsics, pixel_grads, alpha_grads=None,
                    background=(0.0, 0.0, 0.0), dtype=np.float32) -> dict[str, np.ndarray]:
    """Gradients of ``sum(pixel_grads * image) + sum(alpha_grads * alpha)``.

    Keys: means, opacities, rotations, scales, sh (activated attributes) and
    pose_q, pose_t (camera rotation quaternion and centre).
    """
    pixel_grads = np.asarray(pixel_grads, dtype=dtype)
    if pixel_grads.shape != (K.height, K.width, 3):
        raise RenderError(f"pixel_grads shape {pixel_grads.shape} does not match the "
                          f"forward image {(K.height, K.width, 3)}")
    if alpha_grads is not None and np.shape(alpha_grads) != (K.height, K.width):
        raise RenderError(f"alpha_grads shape {np.shape(alpha_grads)} does not match {(K.height, K.width)}")
    st = scene_tensors(scene, requires_grad=True, dtype=dtype)
    q, t = pose_tensors(pose, requires_grad=True, dtype=dtype)
    out = render_tensors(st["means"], st["opacities"], st["rotations"], st["scales"], st["sh"], q, t, K, background)
    loss = (out.pixels * Tensor(pixel_grads, dtype=dtype)).sum()
    if alpha_grads is not None:
        loss = loss + (out.alpha * Tensor(np.asarray(alpha_grads, dtype=dtype), dtype=dtype)).sum()
    loss.backward()
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in st.items()}
    grads["pose_q"] = q.grad if q.grad is not None else np.zeros(4, dtype)
    grads["pose_t"] = t.grad if t.grad is not None else np.zeros(3, dtype)
    return grads


def project_gaussian(g: Gaussian3D, pose: Pose, K: Intrinsics) -> Splat2D | None:
    """Screen-space splat of one Gaussian, or None when it is culled."""
    scene = GaussianScene.from_activated(g.center[None], [g.opacity], g.rotation[None], g.scale[None], g.sh[None])
    with T.no_grad():
        st = scene_tensors(scene, dtype=np.float64)
        q, t = pose_tensors(pose, dtype=np.float64)
        proj = project_tensors(st["means"], st["opacities"], st["rotations"], st["scales"], st["sh"], q, t, K)
    if proj.stats.n_rendered == 0:
        return None
    return Splat2D(proj.mean2d.data[0].copy(), proj.cov2d.data[0].copy(), float(proj.depth[0]),
                   proj.rgb.data[0].copy(), float(proj.opacity.data[0]))


# -- image files -------------------------------------------------------------------------


def write_ppm(path, pixels: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos].decode("ascii"))
    if tokens[0] != "P6" or tokens[3] != "255":
        raise RenderError(f"unsupported PPM header {tokens}")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).astype(np.float32) / 255.0


def write_raw(path, pixels: np.ndarray) -> None:
    """float32 sidecar: u32 height, width, channels, then little-endian floats."""
    arr = np.asarray(pixels, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", *arr.shape))
        fh.write(arr.tobytes())


def read_raw(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    h, w, c = struct.unpack("<3I", buf[:12])
    return np.frombuffer(buf, dtype="<f4", offset=12, count=h * w * c).reshape(h, w, c).astype(np.float32)
