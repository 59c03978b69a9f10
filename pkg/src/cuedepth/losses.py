"""Composite training objective: scale-invariant depth term plus gradient,
structural and cue-regularization terms, with an optional bin-prior KL."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import engine as E
from .engine import Tensor


@dataclass
class LossWeights:
    alpha: float = 0.5      # gradient-matching term
    beta: float = 0.1       # structural (SSIM) term
    gamma_w: float = 0.01   # cue fusion-weight penalty
    kappa: float = 0.1      # bin-prior KL
    lam: float = 0.5        # variance weight inside the scale-invariant term

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma_w", "kappa", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def _require_positive(arr: np.ndarray, mask: np.ndarray | None, what: str) -> None:
    vals = arr[mask] if mask is not None else arr
    if vals.size == 0:
        raise ValueError(f"{what}: empty valid-pixel mask")
    if (vals <= 0).any():
        raise ValueError(f"{what}: depth must be positive on the valid mask")


def _masked_log(x: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return E.log(x)
    m = mask.astype(x.dtype)
    # substitute 1.0 off-mask so log stays finite; contributions are
    # zeroed by the mask afterwards
    safe = E.add(E.mul(x, m), (1.0 - m))
    return E.log(safe)


def si_loss(pred: Tensor, target: Tensor, lam: float = 0.5,
            mask: np.ndarray | None = None) -> Tensor:
    """(1/n) sum d_i^2 - (lam/n^2) (sum d_i)^2 with d_i the log-depth error."""
    _require_positive(pred.data, mask, "si_loss prediction")
    _require_positive(target.data, mask, "si_loss target")
    delta = E.sub(_masked_log(pred, mask), _masked_log(target, mask))
    if mask is not None:
        m = mask.astype(pred.dtype)
        delta = E.mul(delta, m)
        n = float(m.sum())
    else:
        n = float(pred.data.size)
    sq = E.div(E.sum_(E.square(delta)), n)
    lin = E.square(E.div(E.sum_(delta), n))
    return E.sub(sq, E.mul(lin, lam))


def grad_loss(pred: Tensor, target: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute difference of forward-difference log-depth gradients."""
    _require_positive(pred.data, mask, "grad_loss prediction")
    _require_positive(target.data, mask, "grad_loss target")
    lp = _masked_log(pred, mask)
    lt = _masked_log(target, mask)
    dx_p = E.sub(lp[:, 1:], lp[:, :-1])
    dx_t = E.sub(lt[:, 1:], lt[:, :-1])
    dy_p = E.sub(lp[1:, :], lp[:-1, :])
    dy_t = E.sub(lt[1:, :], lt[:-1, :])
    ax = E.abs_(E.sub(dx_p, dx_t))
    ay = E.abs_(E.sub(dy_p, dy_t))
    if mask is not None:
        mx = (mask[:, 1:] & mask[:, :-1]).astype(pred.dtype)
        my = (mask[1:, :] & mask[:-1, :]).astype(pred.dtype)
        ax = E.mul(ax, mx)
        ay = E.mul(ay, my)
        n = float(mx.sum() + my.sum())
    else:
        n = float(ax.data.size + ay.data.size)
    if n == 0:
        raise ValueError("grad_loss: no valid gradient pairs")
    return E.div(E.add(E.sum_(ax), E.sum_(ay)), n)


_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_SSIM_RADIUS = 3  # 7x7 window


def ssim_loss(pred: Tensor, target: Tensor, d_min: float, d_max: float) -> Tensor:
    """(1 - SSIM)/2 on depth maps normalized to [0,1] by the depth range."""
    span = d_max - d_min
    if span <= 0:
        raise ValueError("ssim_loss: d_max must exceed d_min")
    x = E.div(E.sub(pred, d_min), span)
    y = E.div(E.sub(target, d_min), span)
    r = _SSIM_RADIUS
    mu_x = E.box_filter(x, r)
    mu_y = E.box_filter(y, r)
    var_x = E.sub(E.box_filter(E.square(x), r), E.square(mu_x))
    var_y = E.sub(E.box_filter(E.square(y), r), E.square(mu_y))
    cov = E.sub(E.box_filter(E.mul(x, y), r), E.mul(mu_x, mu_y))
    num = E.mul(E.add(E.mul(E.mul(mu_x, mu_y), 2.0), _SSIM_C1),
                E.add(E.mul(cov, 2.0), _SSIM_C2))
    den = E.mul(E.add(E.add(E.square(mu_x), E.square(mu_y)), _SSIM_C1),
                E.add(E.add(var_x, var_y), _SSIM_C2))
    ssim = E.mean_(E.div(num, den))
    return E.mul(E.sub(1.0, ssim), 0.5)


def cue_loss(weight_norms_sq: Mapping[str, Tensor],
             sigma_bars: Mapping[str, float]) -> Tensor:
    """Sum over cues of ||w_C||^2 / exp(sigma_bar_C)."""
    total = None
    for name, w_sq in weight_norms_sq.items():
        sbar = float(sigma_bars[name])
        if not np.isfinite(sbar):
            raise ValueError(f"cue_loss: non-finite sigma_bar for cue {name!r}")
        term = E.mul(w_sq, float(np.exp(-sbar)))
        total = term if total is None else E.add(total, term)
    if total is None:
        raise ValueError("cue_loss: no cues given")
    return total


def total_loss(si: Tensor, grad: Tensor, ssim: Tensor, cue: Tensor,
               kl: Tensor, weights: LossWeights) -> Tensor:
    out = E.add(si, E.mul(grad, weights.alpha))
    out = E.add(out, E.mul(ssim, weights.beta))
    out = E.add(out, E.mul(cue, weights.gamma_w))
    out = E.add(out, E.mul(kl, weights.kappa))
    if not np.isfinite(out.data):
        raise ValueError("total_loss: non-finite loss")
    return out
