"""Bayesian per-annotation deviations and the instance attention loss."""

from __future__ import annotations

import math

import numpy as np

from . import ndgrad as nd
from .errors import ConfigurationError, DimensionError
from .ndgrad import Tensor


def posterior_map(points, grid_w: int, grid_h: int, stride: float, sigma: float = 8.0) -> np.ndarray:
    """Posterior of each annotation at each density cell, shape ``(N, W'*H')``.

    Cells are in token order (``i = y*W' + x``) and located at their centres in
    input pixels.  Each column sums to one when ``N >= 1``.
    """
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n == 0:
        return np.zeros((0, grid_w * grid_h))
    ys, xs = np.divmod(np.arange(grid_w * grid_h), grid_w)
    cx = (xs + 0.5) * stride
    cy = (ys + 0.5) * stride
    d2 = (cx[None, :] - pts[:, 0:1]) ** 2 + (cy[None, :] - pts[:, 1:2]) ** 2
    logits = -d2 / (2.0 * sigma * sigma)
    logits -= logits.max(axis=0, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=0, keepdims=True)


def density_tokens(density: Tensor) -> Tensor:
    """``(W', H')`` density map as a ``(W'*H', 1)`` column in token order."""
    w, h = density.shape
    return nd.reshape(nd.transpose(density), (w * h, 1))


def instance_deviations(posterior: np.ndarray, density: Tensor) -> Tensor:
    """``|1 - sum_p Prob_j(p) D_p|`` for every annotation ``j``; shape ``(N,)``."""
    if density.ndim != 2:
        raise DimensionError(f"density must be (W', H'), got {density.shape}")
    n_cells = density.shape[0] * density.shape[1]
    if posterior.ndim != 2 or posterior.shape[1] != n_cells:
        raise DimensionError(f"posterior {posterior.shape} does not match a {density.shape} grid")
    n = posterior.shape[0]
    expected = nd.matmul(Tensor._wrap(posterior), density_tokens(density))
    return nd.tabs(nd.reshape(1.0 - expected, (n,)))


def instance_mask(e, delta: float) -> np.ndarray:
    """Keep the ``max(1, floor(delta*N))`` smallest deviations; ties keep lower indices."""
    if not (0.0 < delta <= 1.0):
        raise ConfigurationError(f"delta must lie in (0, 1], got {delta}")
    values = np.asarray(e.data if isinstance(e, Tensor) else e, dtype=np.float64).reshape(-1)
    n = values.size
    mask = np.zeros(n)
    if n == 0:
        return mask
    keep = max(1, math.floor(delta * n))
    order = np.argsort(values, kind="stable")
    mask[order[:keep]] = 1.0
    return mask


def instance_attention_loss(e: Tensor, mask) -> Tensor:
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != e.shape:
        raise DimensionError(f"mask {m.shape} and deviations {e.shape} differ in length")
    return nd.tsum(nd.hadamard(e, Tensor._wrap(m)))


def total_loss(l_ia: Tensor, r_lra: Tensor | float, lam: float) -> Tensor:
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    if not isinstance(r_lra, Tensor):
        r_lra = Tensor(r_lra)
    return l_ia + nd.scale(r_lra, lam)
