"""Full pipeline: gated cues -> cortical stack -> bins -> guided upsample.

A frame dict (from ``scene.frame_arrays`` or a loaded dataset) supplies
the RGB image plus cue/log-variance maps; those are constants to the tape
(specialists are frozen), so gradients only reach the model parameters.
The memory bank is explicit state threaded through ``forward_sequence``
and reset at sequence starts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .bins import BinPrediction, BinsConfig, BinsHead, bin_prior_kl, depth_expectation
from .engine import Tensor
from .gating import assemble_input, gate_cue
from .guided import FilterConfig, guided_filter_upsample
from .losses import LossWeights, cue_loss, grad_loss, si_loss, ssim_loss, total_loss
from .memory import WriteStats
from .stack import CorticalStack, RunFlags, StackConfig

CUE_KEYS = (("edges", "cue_e", "sig_e"),
            ("normals", "cue_n", "sig_n"),
            ("layout", "cue_p", "sig_p"))


@dataclass
class ModelConfig:
    stack: StackConfig = field(default_factory=StackConfig)
    bins: BinsConfig = field(default_factory=BinsConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    filter_uncertainty_weights: bool = False
    # final safety clamp keeping depth positive for the log losses
    depth_clip: tuple = (0.05, 40.0)


@dataclass
class FrameResult:
    depth: Tensor              # full resolution prediction
    depth_low: Tensor          # pre-upsample expectation
    bins: BinPrediction
    sigma_bar: dict[str, float]
    memory_stats: list[WriteStats]


class DepthModel:
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0,
                 dtype=np.float32):
        self.cfg = cfg or ModelConfig()
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.stack = CorticalStack(rng, self.cfg.stack, dtype)
        self.bins_head = BinsHead(rng, self.cfg.stack.stem_channels,
                                  self.cfg.bins, dtype)

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.stack.named())
        out.update(self.bins_head.named("bins"))
        return out

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters().values()))

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def new_bank(self) -> Tensor:
        return self.stack.new_bank(self.dtype)

    def cue_weight_norms(self) -> dict[str, Tensor]:
        """Squared norms of the first-layer stem weights per cue channel
        group; these are the fusion weights the cue loss penalizes."""
        w1 = self.stack.stem.w1
        groups = {"edges": (3, 4), "normals": (4, 7), "layout": (7, 8)}
        return {name: E.sum_(E.square(w1[:, :, lo:hi, :]))
                for name, (lo, hi) in groups.items()}

    def forward_frame(self, frame: dict[str, np.ndarray], bank: Tensor,
                      flags: RunFlags | None = None) -> tuple[FrameResult, Tensor]:
        flags = flags or RunFlags()
        dt = self.dtype
        rgb = E.Tensor(frame["rgb"], dtype=dt)
        gated = {}
        sigma_maps = {}
        for name, cue_key, sig_key in CUE_KEYS:
            sig = np.asarray(frame[sig_key])
            gated[name] = gate_cue(E.Tensor(frame[cue_key], dtype=dt),
                                   E.Tensor(sig, dtype=dt))
            sigma_maps[name] = sig
        stack_in = assemble_input(rgb, gated, sigma_maps)
        fv3, bank, stats = self.stack.forward(stack_in.x0, stack_in.sigma_bar,
                                              bank, flags)
        pred = self.bins_head(fv3)
        depth_low = depth_expectation(pred)
        guide = E.Tensor(frame["cue_e"], dtype=dt)
        edge_log_var = frame["sig_e"] if self.cfg.filter_uncertainty_weights else None
        depth = guided_filter_upsample(depth_low, guide, self.cfg.filter,
                                       edge_log_var=edge_log_var)
        lo, hi = self.cfg.depth_clip
        depth = E.clip(depth, lo, hi)
        result = FrameResult(depth=depth, depth_low=depth_low, bins=pred,
                             sigma_bar=stack_in.sigma_bar, memory_stats=stats)
        return result, bank

    def forward_sequence(self, frames: list[dict[str, np.ndarray]],
                         flags: RunFlags | None = None
                         ) -> tuple[list[FrameResult], Tensor]:
        bank = self.new_bank()
        results = []
        for frame in frames:
            res, bank = self.forward_frame(frame, bank, flags)
            results.append(res)
        return results, bank


def composite_loss(model: DepthModel, result: FrameResult,
                   frame: dict[str, np.ndarray], weights: LossWeights,
                   prior: np.ndarray, d_min: float, d_max: float
                   ) -> tuple[Tensor, dict[str, float]]:
    target = E.Tensor(frame["depth"], dtype=model.dtype)
    si = si_loss(result.depth, target, lam=weights.lam)
    grad = grad_loss(result.depth, target)
    ssim = ssim_loss(result.depth, target, d_min, d_max)
    cue = cue_loss(model.cue_weight_norms(), result.sigma_bar)
    kl = bin_prior_kl(result.bins, prior)
    tot = total_loss(si, grad, ssim, cue, kl, weights)
    terms = {"si": float(si.data), "grad": float(grad.data),
             "ssim": float(ssim.data), "cue": float(cue.data),
             "kl": float(kl.data), "total": float(tot.data)}
    return tot, terms
