"""Ablation specifications and the model/input modifications they map to.

Train-time kinds retrain the model under the modification; inference-time
kinds reuse a baseline checkpoint and corrupt inputs or runtime state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CueNoise, VARIANCE_FLOOR, defocus_magnitude
from .stack import RunFlags

TRAIN_TIME_KINDS = ("gating_off", "memory_off", "eta_freeze", "specialist_swap")
INFERENCE_TIME_KINDS = ("slot_shuffle", "edge_mask", "noise_inject", "delay_blank")
ALL_KINDS = TRAIN_TIME_KINDS + INFERENCE_TIME_KINDS


@dataclass
class AblationSpec:
    kind: str
    fraction: float = 0.5        # slot_shuffle permuted share
    mask_fraction: float = 0.25  # edge_mask corrupted share
    sigma: float = 0.05          # noise_inject pixel noise
    sigma_boost: float = 10.0    # log-variance assigned to masked edge pixels
    blank_position: int = -1     # delay_blank insert index; -1 = mid-sequence
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown ablation kind {self.kind!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("slot shuffle fraction must be in [0, 1]")
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise ValueError("edge mask fraction must be in [0, 1]")
        if self.sigma < 0:
            raise ValueError("noise sigma must be >= 0")

    @property
    def retrains(self) -> bool:
        return self.kind in TRAIN_TIME_KINDS


def run_flags(spec: AblationSpec | None) -> RunFlags:
    flags = RunFlags()
    if spec is None:
        return flags
    if spec.kind == "memory_off":
        flags.memory_enabled = False
    elif spec.kind == "eta_freeze":
        flags.freeze_eta = True
    elif spec.kind == "slot_shuffle":
        flags.slot_shuffle_fraction = spec.fraction
        flags.slot_shuffle_seed = spec.seed
    return flags


def _blank_frame(template: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """All-zero RGB and cues with maximal uncertainty; ground truth kept for
    bookkeeping but flagged so losses and metrics skip the frame."""
    blank = {}
    for key, arr in template.items():
        if key.startswith("_"):
            continue
        if key.startswith("sig_"):
            blank[key] = np.full_like(arr, 5.0)
        elif key in ("depth", "layout"):
            blank[key] = arr.copy()
        else:
            blank[key] = np.zeros_like(arr)
    blank["_blank"] = True
    return blank


def transform_frames(frames: list[dict[str, np.ndarray]],
                     spec: AblationSpec | None,
                     d_min: float = 0.5, d_max: float = 20.0,
                     layout_noise: CueNoise | None = None
                     ) -> list[dict[str, np.ndarray]]:
    """Apply the input-side part of an ablation to one sequence."""
    if spec is None:
        return frames
    rng = np.random.default_rng(spec.seed)
    out = []
    for frame in frames:
        f = dict(frame)
        if spec.kind == "gating_off":
            for key in ("sig_e", "sig_n", "sig_p"):
                f[key] = np.zeros_like(f[key])
        elif spec.kind == "edge_mask":
            cue = f["cue_e"].copy()
            sig = f["sig_e"].copy()
            mask = rng.random(cue.shape) < spec.mask_fraction
            cue[mask] = 0.0
            sig[mask] = spec.sigma_boost
            f["cue_e"] = cue
            f["sig_e"] = sig
        elif spec.kind == "noise_inject":
            rgb = f["rgb"] + rng.normal(size=f["rgb"].shape) * spec.sigma
            f["rgb"] = np.clip(rgb, 0.0, 1.0).astype(f["rgb"].dtype)
        elif spec.kind == "specialist_swap":
            # replace the layout cue with a depth-from-blur oracle
            blur = defocus_magnitude(f["depth"], d_min, d_max)
            noise_cfg = layout_noise or CueNoise()
            s = noise_cfg.field_map(*blur.shape)
            f["cue_p"] = (blur + rng.normal(size=blur.shape) * s).astype(np.float32)
            f["sig_p"] = np.log(s * s + VARIANCE_FLOOR).astype(np.float32)
        out.append(f)
    if spec.kind == "delay_blank":
        pos = spec.blank_position
        if pos < 0:
            pos = len(out) // 2
        pos = min(max(pos, 0), len(out))
        out.insert(pos, _blank_frame(frames[min(pos, len(frames) - 1)]))
    return out
