"""Differentiable guided-filter upsampling of coarse depth.

The filter fits a local linear model ``D = a*G + b`` in every
(2r+1)^2 window by ridge-regularized least squares; the closed form is
``a = cov(G, D) / (var(G) + eps)`` and ``b = mean(D) - a*mean(G)``.
Coefficients are box-averaged before the final combination, so each
output pixel blends every window that contains it. Guidance ``G`` is the
scalar edge map at full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor, box_filter


@dataclass
class FilterConfig:
    radius: int = 4
    epsilon: float = 1e-3
    # "upsample_first": bilinearly upsample depth, then filter at full
    # resolution. "fast": fit a, b at coarse resolution and upsample the
    # box-averaged coefficients instead.
    mode: str = "upsample_first"

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("guided filter radius must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("guided filter epsilon must be > 0")
        if self.mode not in ("upsample_first", "fast"):
            raise ValueError(f"unknown guided filter mode {self.mode!r}")


def _box_mean(x: Tensor, radius: int, weights: Tensor | None) -> Tensor:
    if weights is None:
        return box_filter(x, radius)
    return E.div(box_filter(E.mul(x, weights), radius), box_filter(weights, radius))


def _fit_coefficients(guide: Tensor, target: Tensor, cfg: FilterConfig,
                      weights: Tensor | None):
    mean_g = _box_mean(guide, cfg.radius, weights)
    mean_t = _box_mean(target, cfg.radius, weights)
    corr = _box_mean(E.mul(guide, target), cfg.radius, weights)
    var = E.sub(_box_mean(E.square(guide), cfg.radius, weights), E.square(mean_g))
    cov = E.sub(corr, E.mul(mean_g, mean_t))
    a = E.div(cov, E.add(var, cfg.epsilon))
    b = E.sub(mean_t, E.mul(a, mean_g))
    return a, b


def guided_filter(target: Tensor, guide: Tensor, cfg: FilterConfig,
                  weights: Tensor | None = None) -> Tensor:
    """Filter ``target`` by the local linear model on ``guide`` (same size)."""
    if target.shape != guide.shape:
        raise ValueError(f"target {target.shape} and guidance {guide.shape} differ")
    a, b = _fit_coefficients(guide, target, cfg, weights)
    a_bar = _box_mean(a, cfg.radius, weights)
    b_bar = _box_mean(b, cfg.radius, weights)
    return E.add(E.mul(a_bar, guide), b_bar)


def guided_filter_upsample(depth_low: Tensor, guide: Tensor, cfg: FilterConfig,
                           edge_log_var: np.ndarray | None = None) -> Tensor:
    """Upsample ``depth_low`` to the guidance resolution and edge-filter it.

    ``edge_log_var``, when given, turns every window mean into a
    precision-weighted mean with w(x) = exp(-sigma_E(x)).
    """
    out_hw = guide.shape[:2]
    weights = None
    if edge_log_var is not None:
        weights = E.exp(E.Tensor(-np.asarray(edge_log_var), dtype=guide.dtype))
    if cfg.mode == "fast":
        # coefficients are fit at the coarse resolution, so the window
        # radius shrinks by the same scale factor
        scale = max(out_hw[0] // depth_low.shape[0], 1)
        r_low = max(cfg.radius // scale, 1)
        low_cfg = FilterConfig(radius=r_low, epsilon=cfg.epsilon, mode="fast")
        guide_low = E.bilinear_resize(guide, depth_low.shape[:2])
        w_low = None
        if weights is not None:
            w_low = E.bilinear_resize(weights, depth_low.shape[:2])
        a, b = _fit_coefficients(guide_low, depth_low, low_cfg, w_low)
        a_bar = E.bilinear_resize(_box_mean(a, r_low, w_low), out_hw)
        b_bar = E.bilinear_resize(_box_mean(b, r_low, w_low), out_hw)
        return E.add(E.mul(a_bar, guide), b_bar)
    up = E.bilinear_resize(depth_low, out_hw) if depth_low.shape[:2] != tuple(out_hw) else depth_low
    return guided_filter(up, guide, cfg, weights)


def bruteforce_guided_filter(target: np.ndarray, guide: np.ndarray,
                             radius: int, epsilon: float) -> np.ndarray:
    """Reference oracle: solve each window's 2x2 normal equations directly.

    Independent of the tape path: per-window statistics come from explicit
    double loops and ``np.linalg.solve``.
    """
    h, w = target.shape
    a = np.zeros((h, w))
    b = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            ys = slice(max(i - radius, 0), min(i + radius + 1, h))
            xs = slice(max(j - radius, 0), min(j + radius + 1, w))
            gw = guide[ys, xs].ravel()
            tw = target[ys, xs].ravel()
            lhs = np.array([
                [np.mean(gw * gw) + epsilon, np.mean(gw)],
                [np.mean(gw), 1.0],
            ])
            rhs = np.array([np.mean(gw * tw), np.mean(tw)])
            sol = np.linalg.solve(lhs, rhs)
            a[i, j], b[i, j] = sol
    a_bar = np.zeros((h, w))
    b_bar = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            ys = slice(max(i - radius, 0), min(i + radius + 1, h))
            xs = slice(max(j - radius, 0), min(j + radius + 1, w))
            a_bar[i, j] = a[ys, xs].mean()
            b_bar[i, j] = b[ys, xs].mean()
    return a_bar * guide + b_bar
