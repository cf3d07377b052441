"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max abs deviation normalised by the largest reference magnitude.

    Per-element ratios blow up on near-zero entries, so the error is measured
    against the scale of the gradient as a whole.
    """
    scale = max(float(np.max(np.abs(numeric))) if numeric.size else 0.0, floor)
    return float(np.max(np.abs(analytic - numeric))) / scale if numeric.size else 0.0


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], weights: np.ndarray,
                 h: float = 1e-3) -> list[np.ndarray]:
    """d/dx of sum(weights * fn(*inputs)), evaluated in float64."""
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    w = np.asarray(weights, dtype=np.float64)
    grads = []
    for k, x in enumerate(xs):
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = np.sum(w * fn(*[Tensor(a, dtype=np.float64) for a in xs]).data)
            flat[i] = orig - h
            fm = np.sum(w * fn(*[Tensor(a, dtype=np.float64) for a in xs]).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], weights: np.ndarray) -> list[np.ndarray]:
    """Backward through ``fn`` on float32 copies of the inputs."""
    ts = [Tensor(np.asarray(x, dtype=np.float32), requires_grad=True) for x in inputs]
    out = fn(*ts)
    out.backward(np.asarray(weights, dtype=out.dtype))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                    h: float = 1e-3) -> float:
    """Return the worst relative error over all inputs of ``fn``."""
    rng = np.random.default_rng(seed)
    probe = fn(*[Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64) for x in inputs])
    weights = rng.standard_normal(probe.shape)
    num = numeric_grad(fn, inputs, weights, h)
    ana = analytic_grad(fn, inputs, weights)
    return max(relative_error(a.astype(np.float64), n) for a, n in zip(ana, num))
