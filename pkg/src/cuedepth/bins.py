"""Adaptive-bins depth head: K bin centres plus per-pixel scores.

Bin widths are predicted as fractions of the log-depth range, so a
uniform head output reproduces the static logarithmically spaced grid.
Continuous depth is the softmax expectation over centres; a KL term
against a dataset depth prior regularizes where the bins put their mass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .stack import MultiHeadAttention, _linear_params, _ln_params, gelu


@dataclass
class BinsConfig:
    n_bins: int = 64
    d_min: float = 0.5
    d_max: float = 20.0
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.d_min <= 0 or self.d_max <= self.d_min:
            raise ValueError("need 0 < d_min < d_max")


@dataclass
class BinPrediction:
    centres: Tensor   # (K,) strictly increasing, inside (d_min, d_max)
    scores: Tensor    # (H, W, K) logits
    widths: Tensor    # (K,) metres, summing to d_max - d_min


def static_log_centres(cfg: BinsConfig) -> np.ndarray:
    span = np.log(cfg.d_max) - np.log(cfg.d_min)
    k = cfg.n_bins
    return np.exp(np.log(cfg.d_min) + span * (np.arange(k) + 0.5) / k)


def centres_from_fractions(fracs: Tensor, cfg: BinsConfig) -> tuple[Tensor, Tensor]:
    """Map positive log-range fractions (summing to 1) to centres and widths.

    Upper log-edges come from a cumulative sum; each centre sits at the
    midpoint of its log bin, so uniform fractions give the static
    geometric grid.
    """
    span = float(np.log(cfg.d_max) - np.log(cfg.d_min))
    log_upper = E.add(E.mul(E.cumsum(fracs, axis=0), span), float(np.log(cfg.d_min)))
    log_centres = E.sub(log_upper, E.mul(fracs, span / 2.0))
    centres = E.exp(log_centres)
    upper = E.exp(log_upper)
    lower = E.concat([E.Tensor(np.array([cfg.d_min]), dtype=fracs.dtype), upper[:-1]], axis=0)
    widths = E.sub(upper, lower)
    if not np.all(np.diff(centres.data) > 0):
        raise ValueError("bin centres are not strictly increasing")
    return centres, widths


class BinsHead:
    """Small transformer over V3 tokens: pooled widths, per-pixel scores."""

    def __init__(self, rng: np.random.Generator, in_channels: int,
                 cfg: BinsConfig, dtype=np.float32):
        self.cfg = cfg
        e = cfg.embed_dim
        self.w_embed, self.b_embed = _linear_params(rng, in_channels, e, dtype)
        self.ln1_g, self.ln1_b = _ln_params(e, dtype)
        self.attn = MultiHeadAttention(rng, e, cfg.heads, reach=16, dtype=dtype)
        self.ln2_g, self.ln2_b = _ln_params(e, dtype)
        hidden = e * cfg.mlp_ratio
        self.w_m1, self.b_m1 = _linear_params(rng, e, hidden, dtype)
        self.w_m2, self.b_m2 = _linear_params(rng, hidden, e, dtype)
        self.w_width, self.b_width = _linear_params(rng, e, cfg.n_bins, dtype)
        self.w_score, self.b_score = _linear_params(rng, e, cfg.n_bins, dtype)

    def named(self, prefix="bins"):
        out = {f"{prefix}.w_embed": self.w_embed, f"{prefix}.b_embed": self.b_embed,
               f"{prefix}.ln1_g": self.ln1_g, f"{prefix}.ln1_b": self.ln1_b,
               f"{prefix}.ln2_g": self.ln2_g, f"{prefix}.ln2_b": self.ln2_b,
               f"{prefix}.w_m1": self.w_m1, f"{prefix}.b_m1": self.b_m1,
               f"{prefix}.w_m2": self.w_m2, f"{prefix}.b_m2": self.b_m2,
               f"{prefix}.w_width": self.w_width, f"{prefix}.b_width": self.b_width,
               f"{prefix}.w_score": self.w_score, f"{prefix}.b_score": self.b_score}
        out.update(self.attn.named(f"{prefix}.attn"))
        return out

    def __call__(self, fv3: Tensor) -> BinPrediction:
        h, w, c = fv3.data.shape
        t = E.add(E.matmul(E.reshape(fv3, (h * w, c)), self.w_embed), self.b_embed)
        a, _ = self.attn(E.layer_norm(t, self.ln1_g, self.ln1_b), (h, w))
        t = E.add(t, a)
        hid = gelu(E.add(E.matmul(E.layer_norm(t, self.ln2_g, self.ln2_b), self.w_m1), self.b_m1))
        t = E.add(t, E.add(E.matmul(hid, self.w_m2), self.b_m2))
        pooled = E.mean_(t, axis=0)
        width_logits = E.add(E.matmul(pooled, self.w_width), self.b_width)
        fracs = E.softmax(width_logits, axis=-1)
        centres, widths = centres_from_fractions(fracs, self.cfg)
        scores = E.reshape(E.add(E.matmul(t, self.w_score), self.b_score),
                           (h, w, self.cfg.n_bins))
        return BinPrediction(centres=centres, scores=scores, widths=widths)


def depth_expectation(pred: BinPrediction) -> Tensor:
    probs = E.softmax(pred.scores, axis=-1)
    return E.sum_(E.mul(probs, pred.centres), axis=-1)


def smooth_prior(hist: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    p = np.asarray(hist, dtype=np.float64)
    if p.min() < 0:
        raise ValueError("prior histogram has negative mass")
    p = p / p.sum()
    p = p * (1.0 - eps) + eps / p.size
    return p / p.sum()


def bin_prior_kl(pred: BinPrediction, prior: np.ndarray) -> Tensor:
    """KL(mean bin occupancy || prior); prior must be strictly positive."""
    prior = np.asarray(prior, dtype=np.float64)
    if (prior <= 0).any():
        raise ValueError("prior must be strictly positive (smooth it first)")
    probs = E.softmax(pred.scores, axis=-1)
    occupancy = E.mean_(E.reshape(probs, (-1, prior.size)), axis=0)
    log_prior = E.Tensor(np.log(prior), dtype=pred.scores.dtype)
    return E.sum_(E.mul(occupancy, E.sub(E.log(occupancy), log_prior)))
