"""Training losses and image metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .geometry import Pose, _qconj, _qmul, hemisphere_sign

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class LossError(ValueError):
    pass


def _check_same(a_shape, b_shape, what: str) -> None:
    if tuple(a_shape) != tuple(b_shape):
        raise LossError(f"{what}: shape mismatch {tuple(a_shape)} vs {tuple(b_shape)}")


# -- render loss ------------------------------------------------------------------------------


def render_loss(pred: Tensor, gt, lambda_lpips: float = 0.0,
                perceptual: Callable[[Tensor, np.ndarray], Tensor] | None = None) -> Tensor:
    """MSE plus an optional weighted perceptual term supplied by the caller."""
    gt = np.asarray(gt, dtype=pred.dtype)
    _check_same(pred.shape, gt.shape, "render_loss")
    diff = pred - gt
    loss = T.mean(diff * diff)
    if lambda_lpips:
        if perceptual is None:
            raise LossError("lambda_lpips > 0 needs a perceptual loss callable")
        loss = loss + lambda_lpips * perceptual(pred, gt)
    return loss


# -- pose loss ---------------------------------------------------------------------------------


def _stack(xs, axis=-1):
    return T.stack(xs, axis=axis) if any(isinstance(x, Tensor) for x in xs) else np.stack(xs, axis=axis)


def dq_from_qt(q, t):
    """(real, dual) parts of the unit DQ for rotation q and translation t; tensors or arrays."""
    zero = t[..., 0] * 0.0
    tq = _stack([zero, t[..., 0], t[..., 1], t[..., 2]])
    return q, _qmul(tq, q, _stack) * 0.5


def _dq_mul(a, b):
    ar, ad = a
    br, bd = b
    return _qmul(ar, br, _stack), _qmul(ar, bd, _stack) + _qmul(ad, br, _stack)


def _dq_conj(a):
    return _qconj(a[0], _stack), _qconj(a[1], _stack)


def _identity_gap(dq) -> Tensor:
    """|p_I - dq| over the 8 components, p_I the identity DQ."""
    real, dual = dq
    one = np.zeros(real.shape, dtype=real.dtype)
    one[..., 0] = 1.0
    gap = T.concat([one - real, T.neg(dual)], axis=-1)
    return T.norm(gap, axis=-1)


def pose_loss_terms(pred_q: Tensor, pred_t: Tensor, gt: Sequence[Pose]) -> tuple[Tensor, Tensor]:
    """Per-view (MSE over the 7-vector, DQ alignment), each shaped (B,).

    Quaternions of both sides are moved to the w >= 0 hemisphere first; the
    sign is treated as a constant.
    """
    if pred_q.shape[0] != len(gt):
        raise LossError(f"{pred_q.shape[0]} predicted poses for {len(gt)} targets")
    sign = np.asarray(hemisphere_sign(pred_q.data), dtype=pred_q.dtype).reshape(-1, 1)
    q = pred_q * np.broadcast_to(sign, pred_q.shape).copy()
    gq = np.stack([g.rotation * hemisphere_sign(g.rotation) for g in gt]).astype(pred_q.dtype)
    gt_t = np.stack([g.translation for g in gt]).astype(pred_q.dtype)

    d_q = q - gq
    d_t = pred_t - gt_t
    mse = (T.tsum(d_q * d_q, axis=-1) + T.tsum(d_t * d_t, axis=-1)) * (1.0 / 7.0)

    p = dq_from_qt(q, pred_t)
    p_hat = dq_from_qt(gq, gt_t)
    align = _identity_gap(_dq_mul(p, _dq_conj(p_hat))) + _identity_gap(_dq_mul(p_hat, _dq_conj(p)))
    return mse, align


def pose_loss(pred_q: Tensor, pred_t: Tensor, gt: Sequence[Pose]) -> tuple[Tensor, Tensor, Tensor]:
    """Mean over views of MSE + alignment; also returns the two means."""
    mse, align = pose_loss_terms(pred_q, pred_t, gt)
    l_mse, l_align = T.mean(mse), T.mean(align)
    return l_mse + l_align, l_mse, l_align


def pose_loss_single(pred: Pose, gt: Pose) -> float:
    """Numpy convenience wrapper for one pose pair."""
    q = Tensor(np.asarray(pred.rotation, np.float64).reshape(1, 4), dtype=np.float64)
    t = Tensor(np.asarray(pred.translation, np.float64).reshape(1, 3), dtype=np.float64)
    total, _, _ = pose_loss(q, t, [gt])
    return float(total.item())


# -- total ----------------------------------------------------------------------------------


@dataclass
class LossReport:
    l_render: float
    l_pose: float
    l_align: float
    l_mse_pose: float
    total: float
    lambda_lpips: float
    lambda_c: float

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(l_render: Tensor, l_pose: Tensor, lambda_c: float = 1.0, lambda_lpips: float = 0.0,
               l_mse: Tensor | None = None, l_align: Tensor | None = None) -> tuple[Tensor, LossReport]:
    total = l_render + lambda_c * l_pose
    r, p = float(l_render.item()), float(l_pose.item())
    report = LossReport(
        l_render=r,
        l_pose=p,
        l_align=float(l_align.item()) if l_align is not None else float("nan"),
        l_mse_pose=float(l_mse.item()) if l_mse is not None else float("nan"),
        total=r + lambda_c * p,
        lambda_lpips=lambda_lpips,
        lambda_c=lambda_c,
    )
    return total, report


# -- metrics ---------------------------------------------------------------------------------


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a.shape, b.shape, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    n = len(g)
    win = np.lib.stride_tricks.sliding_window_view(img, n, axis=0)
    rows = np.tensordot(win, g, axes=([-1], [0]))
    win = np.lib.stride_tricks.sliding_window_view(rows, n, axis=1)
    return np.tensordot(win, g, axes=([-1], [0]))


def ssim(a, b) -> float:
    """Mean SSIM over valid windows and channels; inputs (H, W) or (H, W, C) in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a.shape, b.shape, "ssim")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise LossError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a ** 2
    s_bb = _filter_valid(b * b, g) - mu_b ** 2
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * s_ab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (s_aa + s_bb + SSIM_C2)
    return float(np.mean(num / den))
