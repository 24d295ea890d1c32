"""Reconstruction losses for batches of images, with gradients w.r.t. the reconstruction.

Batches are arrays whose first axis indexes images; every remaining axis is
treated as pixels.  SSIM uses whole-image statistics (population moments).
"""

from __future__ import annotations

import numpy as np

DYNAMIC_RANGE = 1.0
C1 = (0.01 * DYNAMIC_RANGE) ** 2
C2 = (0.03 * DYNAMIC_RANGE) ** 2


def _pair(batch_x, batch_xhat) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(batch_x, dtype=np.float64)
    y = np.asarray(batch_xhat, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim < 2:
        raise ValueError("expected a batch of images (M, ...)")
    return x.reshape(x.shape[0], -1), y.reshape(y.shape[0], -1)


def loss_l1(batch_x, batch_xhat) -> float:
    """Mean over images of the per-pixel mean absolute difference."""
    x, y = _pair(batch_x, batch_xhat)
    return float(np.mean(np.abs(x - y)))


def loss_mse(batch_x, batch_xhat) -> float:
    """(1/M) * sum_m 0.5 * ||x_m - xhat_m||^2."""
    x, y = _pair(batch_x, batch_xhat)
    return float(0.5 * np.sum((x - y) ** 2) / x.shape[0])


def _moments(x: np.ndarray, y: np.ndarray):
    mx, my = x.mean(axis=1), y.mean(axis=1)
    dx, dy = x - mx[:, None], y - my[:, None]
    vx, vy = np.mean(dx * dx, axis=1), np.mean(dy * dy, axis=1)
    cxy = np.mean(dx * dy, axis=1)
    return mx, my, dx, dy, vx, vy, cxy


def ssim_batch(batch_x, batch_y, c1: float = C1, c2: float = C2) -> np.ndarray:
    x, y = _pair(batch_x, batch_y)
    mx, my, _, _, vx, vy, cxy = _moments(x, y)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * cxy + c2) / (vx + vy + c2)
    return lum * cs


def ssim(x, y, c1: float = C1, c2: float = C2) -> float:
    """Global-statistics SSIM of two equally shaped images."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(ssim_batch(x[None], y[None], c1, c2)[0])


def loss_ssim(batch_x, batch_xhat) -> float:
    return float(1.0 - np.mean(ssim_batch(batch_x, batch_xhat)))


def loss_hybrid(batch_x, batch_xhat, lambda1: float = 0.15, lambda2: float = 0.85) -> float:
    return lambda1 * loss_l1(batch_x, batch_xhat) + lambda2 * loss_ssim(batch_x, batch_xhat)


def _ssim_grad(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-image SSIM and dSSIM/dy for flattened (M, P) batches."""
    p = x.shape[1]
    mx, my, dx, dy, vx, vy, cxy = _moments(x, y)
    a = 2 * mx * my + c1
    b = mx * mx + my * my + c1
    c = 2 * cxy + c2
    d = vx + vy + c2
    s = (a / b) * (c / d)
    dlum = (2 * mx / b - a * 2 * my / (b * b)) / p  # same for every pixel
    grad = (c / d * dlum)[:, None] + (a / b)[:, None] * (
        2 * dx / (p * d[:, None]) - (c / (d * d))[:, None] * 2 * dy / p
    )
    return s, grad


def loss_and_grad(batch_x, batch_xhat, kind: str = "hybrid", lambda1: float = 0.15, lambda2: float = 0.85):
    """Return (loss, d loss / d xhat) for ``kind`` in {'hybrid', 'l1', 'ssim', 'mse'}."""
    shape = np.shape(batch_xhat)
    x, y = _pair(batch_x, batch_xhat)
    m, p = x.shape
    if kind == "mse":
        diff = y - x
        return float(0.5 * np.sum(diff * diff) / m), (diff / m).reshape(shape)
    if kind == "l1":
        lambda1, lambda2 = 1.0, 0.0
    elif kind == "ssim":
        lambda1, lambda2 = 0.0, 1.0
    elif kind != "hybrid":
        raise ValueError(f"unknown loss {kind!r}")
    loss = 0.0
    grad = np.zeros_like(y)
    if lambda1:
        diff = y - x
        loss += lambda1 * float(np.mean(np.abs(diff)))
        grad += lambda1 * np.sign(diff) / (m * p)
    if lambda2:
        s, ds = _ssim_grad(x, y, C1, C2)
        loss += lambda2 * float(1.0 - np.mean(s))
        grad -= lambda2 * ds / m
    return loss, grad.reshape(shape)
