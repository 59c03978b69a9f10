"""Run configuration: dataclass defaults, INI file loading, CLI overrides.

One file with [dataset], [model], [loss] and [train] sections; every
default is overridable from the file or with repeated
``--set section.key=value`` flags.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .bins import BinsConfig
from .guided import FilterConfig
from .losses import LossWeights
from .model import ModelConfig
from .scene import CueNoise, NoiseConfig, SceneGenConfig
from .stack import StackConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    scenes: int = 64
    val_scenes: int = 8
    frames_per_scene: int = 4
    seed: int = 0
    height: int = 64
    width: int = 64
    d_min: float = 0.5
    d_max: float = 20.0
    layout_kind: str = "layout"      # "layout" | "blur" (specialist swap)
    noise_e_kind: str = "half_x"
    noise_e_scale: float = 0.35
    noise_e_scale2: float = 0.05
    noise_n_kind: str = "half_y"
    noise_n_scale: float = 0.25
    noise_n_scale2: float = 0.05
    noise_p_kind: str = "constant"
    noise_p_scale: float = 0.08
    noise_p_scale2: float = 0.0

    def gen_config(self) -> SceneGenConfig:
        return SceneGenConfig(height=self.height, width=self.width,
                              d_min=self.d_min, d_max=self.d_max)

    def noise_config(self) -> NoiseConfig:
        return NoiseConfig(
            edges=CueNoise(self.noise_e_kind, self.noise_e_scale, self.noise_e_scale2),
            normals=CueNoise(self.noise_n_kind, self.noise_n_scale, self.noise_n_scale2),
            layout=CueNoise(self.noise_p_kind, self.noise_p_scale, self.noise_p_scale2),
        )


@dataclass
class NetConfig:
    """Flat view of the model hyperparameters (INI-friendly)."""
    stem_channels: int = 64
    v2_kernel: int = 5
    v2_heads: int = 4
    v2_iterations: int = 1
    v3_blocks: int = 2
    window: int = 7
    memory_slots: int = 32
    memory_dim: int = 128
    memory_top_k: int = 8
    mlp_ratio: int = 2
    max_rel_grid: int = 16
    sigma_gain_clip: float = 2.0
    bins: int = 64
    bins_embed: int = 64
    filter_radius: int = 4
    filter_epsilon: float = 1e-3
    filter_mode: str = "upsample_first"
    filter_uncertainty: bool = False
    model_seed: int = 0

    def model_config(self, d_min: float, d_max: float) -> ModelConfig:
        stack = StackConfig(
            stem_channels=self.stem_channels, v2_kernel=self.v2_kernel,
            v2_heads=self.v2_heads, v2_iterations=self.v2_iterations,
            v3_blocks=self.v3_blocks, window=self.window,
            memory_slots=self.memory_slots, memory_dim=self.memory_dim,
            memory_top_k=self.memory_top_k, mlp_ratio=self.mlp_ratio,
            max_rel_grid=self.max_rel_grid, sigma_gain_clip=self.sigma_gain_clip)
        bins = BinsConfig(n_bins=self.bins, d_min=d_min, d_max=d_max,
                          heads=self.v2_heads, embed_dim=self.bins_embed)
        filt = FilterConfig(radius=self.filter_radius, epsilon=self.filter_epsilon,
                            mode=self.filter_mode)
        return ModelConfig(stack=stack, bins=bins, filter=filt,
                           filter_uncertainty_weights=self.filter_uncertainty)


@dataclass
class AppConfig:
    dataset: DataConfig = field(default_factory=DataConfig)
    model: NetConfig = field(default_factory=NetConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"dataset": asdict(self.dataset), "model": asdict(self.model),
                "loss": asdict(self.loss), "train": asdict(self.train)}


_SECTIONS = ("dataset", "model", "loss", "train")


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {value!r}")
    return target_type(value)


def _apply(cfg_obj, key: str, value: str, section: str):
    match = {f.name: f for f in fields(cfg_obj)}
    if key not in match:
        raise KeyError(f"unknown config key [{section}] {key}")
    ftype = type(getattr(cfg_obj, key))
    setattr(cfg_obj, key, _coerce(value, ftype))


def load_config(path=None, overrides: list[str] | None = None) -> AppConfig:
    cfg = AppConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(Path(path))
        if not read:
            raise FileNotFoundError(f"config file {path} not found")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise KeyError(f"unknown config section [{section}]")
            target = getattr(cfg, section)
            for key, value in parser.items(section):
                _apply(target, key, value, section)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value: {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if section not in _SECTIONS:
            raise KeyError(f"unknown config section {section!r}")
        _apply(getattr(cfg, section), key.strip(), value.strip(), section)
    return cfg


def write_config(cfg: AppConfig, path) -> None:
    parser = configparser.ConfigParser()
    for section in _SECTIONS:
        parser[section] = {k: str(v) for k, v in asdict(getattr(cfg, section)).items()}
    with open(path, "w") as f:
        parser.write(f)


def config_digest(cfg: AppConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def code_version_hash() -> str:
    """Content hash over the package sources, recorded in run manifests."""
    src = Path(__file__).parent
    h = hashlib.sha256()
    for py in sorted(src.glob("*.py")):
        h.update(py.name.encode())
        h.update(py.read_bytes())
    return h.hexdigest()[:16]
