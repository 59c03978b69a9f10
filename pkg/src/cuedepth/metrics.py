"""Depth evaluation metrics plus the edge-alignment F1 score.

All metrics are plain numpy on (masked) depth maps. Predicted edges reuse
the same depth-ratio discontinuity rule that defines the ground-truth
occlusion edges, so the F1 is self-consistent with the synthetic data.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .scene import EDGE_RATIO_THRESHOLD, depth_discontinuities


@dataclass
class MetricReport:
    abs_rel: float
    rmse: float
    log_rmse: float
    silog: float
    delta1: float
    delta2: float
    delta3: float
    edge_f1: float
    valid_pixel_count: int

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _masked(pred, target, mask):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    p = pred[mask]
    t = target[mask]
    if p.size == 0:
        raise ValueError("empty valid-pixel mask")
    if (p <= 0).any() or (t <= 0).any():
        raise ValueError("depth metrics need positive depths on the mask")
    return p, t


def depth_metrics(pred, target, mask=None) -> tuple[float, float, float, float]:
    """abs_rel, rmse, log_rmse and the scale-invariant log error (lam = 1)."""
    p, t = _masked(pred, target, mask)
    abs_rel = float(np.mean(np.abs(p - t) / t))
    rmse = float(np.sqrt(np.mean((p - t) ** 2)))
    err = np.log(p) - np.log(t)
    log_rmse = float(np.sqrt(np.mean(err ** 2)))
    silog = float(np.mean(err ** 2) - np.mean(err) ** 2)
    return abs_rel, rmse, log_rmse, silog


def threshold_accuracy(pred, target, mask=None) -> tuple[float, float, float]:
    p, t = _masked(pred, target, mask)
    ratio = np.maximum(p / t, t / p)
    return tuple(float(np.mean(ratio < 1.25 ** i)) for i in (1, 2, 3))


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Chebyshev-ball dilation of a boolean map."""
    out = mask.copy()
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            shifted = np.zeros_like(mask)
            ys = slice(max(dy, 0), mask.shape[0] + min(dy, 0))
            yt = slice(max(-dy, 0), mask.shape[0] + min(-dy, 0))
            xs = slice(max(dx, 0), mask.shape[1] + min(dx, 0))
            xt = slice(max(-dx, 0), mask.shape[1] + min(-dx, 0))
            shifted[yt, xt] = mask[ys, xs]
            out |= shifted
    return out


def edge_f1(pred_depth, edges_gt, tolerance_px: int = 1,
            threshold: float = EDGE_RATIO_THRESHOLD) -> float:
    """F1 between predicted depth discontinuities and ground-truth edges.

    A pixel counts as matched when the other set has a pixel within
    ``tolerance_px`` in Chebyshev distance. With no edges on either side
    the score is 0 by convention.
    """
    pred_edges = depth_discontinuities(np.asarray(pred_depth, dtype=np.float64),
                                       threshold)
    gt = np.asarray(edges_gt) > 0.5
    n_pred = int(pred_edges.sum())
    n_gt = int(gt.sum())
    if n_pred == 0 or n_gt == 0:
        return 0.0
    gt_zone = _dilate(gt, tolerance_px)
    pred_zone = _dilate(pred_edges, tolerance_px)
    precision = float((pred_edges & gt_zone).sum()) / n_pred
    recall = float((gt & pred_zone).sum()) / n_gt
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def evaluate_frame(pred, target, edges_gt, mask=None,
                   tolerance_px: int = 1) -> MetricReport:
    abs_rel, rmse, log_rmse, silog = depth_metrics(pred, target, mask)
    d1, d2, d3 = threshold_accuracy(pred, target, mask)
    f1 = edge_f1(pred, edges_gt, tolerance_px)
    count = int(mask.sum()) if mask is not None else int(np.asarray(pred).size)
    return MetricReport(abs_rel, rmse, log_rmse, silog, d1, d2, d3, f1, count)


def aggregate_reports(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no reports to aggregate")
    vals = {f.name: float(np.mean([getattr(r, f.name) for r in reports]))
            for f in fields(MetricReport) if f.name != "valid_pixel_count"}
    total = int(np.sum([r.valid_pixel_count for r in reports]))
    return MetricReport(valid_pixel_count=total, **vals)
