"""Reliability gating of cue maps and assembly of the fused input stack.

Each cue map C comes with an exact log-variance map sigma; the gate
scales it elementwise by exp(-sigma), a one-step precision weighting.
Gated cues are concatenated with RGB into the 8-channel input tensor
consumed by the stem: RGB(3), E(1), N(3), P(1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor

CHANNEL_ORDER = ("rgb", "edges", "normals", "layout")


@dataclass
class GatedCueStack:
    x0: Tensor                   # H x W x 8
    sigma_bar: dict[str, float]  # per-cue mean log-variance


def gate_cue(cue, log_variance) -> Tensor:
    """C * exp(-sigma), broadcasting one sigma map over cue channels."""
    cue = E.as_tensor(cue)
    sig = E.as_tensor(log_variance, like=cue)
    if not np.isfinite(sig.data).all():
        raise ValueError("gate_cue: non-finite log-variance map")
    if sig.data.shape != cue.data.shape[: sig.data.ndim] or sig.data.ndim > cue.data.ndim:
        raise ValueError(
            f"gate_cue: sigma shape {sig.data.shape} incompatible with cue {cue.data.shape}")
    weight = E.exp(E.neg(sig))
    if cue.data.ndim == sig.data.ndim + 1:
        weight = E.reshape(weight, sig.data.shape + (1,))
    return E.mul(cue, weight)


def assemble_input(rgb, gated: dict[str, Tensor],
                   sigma_maps: dict[str, np.ndarray]) -> GatedCueStack:
    """Resize cues to the RGB resolution and stack channels in the fixed order."""
    rgb = E.as_tensor(rgb)
    h, w = rgb.data.shape[:2]
    parts = [rgb]
    for name in CHANNEL_ORDER[1:]:
        cue = gated[name]
        if cue.data.shape[:2] != (h, w):
            cue = E.bilinear_resize(cue, (h, w))
        if cue.data.ndim == 2:
            cue = E.reshape(cue, (h, w, 1))
        parts.append(cue)
    x0 = E.concat(parts, axis=2)
    if x0.data.shape[2] != 8:
        raise ValueError(f"expected 8 input channels, got {x0.data.shape[2]}")
    sigma_bar = {name: float(np.mean(sigma_maps[name])) for name in sigma_maps}
    return GatedCueStack(x0=x0, sigma_bar=sigma_bar)


def fuse_precision_weighted(observations: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Fuse noisy observations of one field by inverse-variance weighting.

    Each observation is (value, log_variance); the optimal combination under
    independent Gaussian noise is sum(x_i / v_i) / sum(1 / v_i).
    """
    if not observations:
        raise ValueError("no observations to fuse")
    num = 0.0
    den = 0.0
    for value, log_var in observations:
        prec = np.exp(-np.asarray(log_var, dtype=np.float64))
        num = num + np.asarray(value, dtype=np.float64) * prec
        den = den + prec
    return num / den
