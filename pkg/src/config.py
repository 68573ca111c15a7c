"""
Pipeline configuration: typed defaults, key = value files, environment and flag overrides.
"""

import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import dotenv_values

from .mffnet import FUSION_KINDS, NetConfig
from .synthdata import SynthConfig
from .tensor import UPSAMPLE_MODES
from .training import TrainConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "SPOL_"
CLASSIFIER_KINDS = ("separate", "reuse")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class PipelineConfig:
    """Every knob of a run, including the ablation switches."""
    seed: int = 0
    out_dir: str = "runs/default"

    # dataset
    image_size: int = 64
    n_train: int = 2000
    n_test: int = 500
    shape_min: int = 18
    shape_max: int = 44
    speckles: int = 40
    clutter: float = 0.35
    dump_png: bool = False

    # network
    fusion: str = "mul"
    fuse_k: int = 3
    use_mca: bool = True
    use_aux: bool = True
    fused_channels: int = 64
    mca_latent: int = 32
    upsample: str = "bilinear"
    classifier: str = "separate"

    # pseudo labels and localization
    use_gauss: bool = True
    use_threshold: bool = True
    use_seg: bool = True
    t_gauss: float = 0.7
    t_fg: float = 0.5
    t_bg: float = 0.004
    tau: float = 0.5
    cam_tau: float = 0.2

    # optimization
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float = 2.0
    batch_size: int = 32
    cls_steps: int = 600
    seg_steps: int = 600
    hflip: bool = True
    progress: bool = True

    def validate(self) -> "PipelineConfig":
        """Raise ValueError on the first inconsistent setting."""
        if not 0.0 <= self.t_bg < self.t_fg <= 1.0:
            raise ValueError(f"thresholds must satisfy 0 <= t_bg < t_fg <= 1, got t_bg={self.t_bg} t_fg={self.t_fg}")
        for name in ("t_gauss", "tau", "cam_tau"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.fuse_k not in (1, 2, 3, 4):
            raise ValueError(f"fuse_k must be one of 1, 2, 3, 4, got {self.fuse_k}")
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"fusion must be one of {FUSION_KINDS}, got '{self.fusion}'")
        if self.upsample not in UPSAMPLE_MODES:
            raise ValueError(f"upsample must be one of {UPSAMPLE_MODES}, got '{self.upsample}'")
        if self.classifier not in CLASSIFIER_KINDS:
            raise ValueError(f"classifier must be one of {CLASSIFIER_KINDS}, got '{self.classifier}'")
        for name in ("n_train", "n_test", "batch_size", "fused_channels", "mca_latent"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("cls_steps", "seg_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.clip_norm < 0:
            raise ValueError(f"clip_norm must be >= 0, got {self.clip_norm}")
        self.synth_config().validate()
        return self

    @property
    def pseudo_mode(self) -> str:
        if not self.use_gauss:
            return "no-gauss"
        return "full" if self.use_threshold else "no-threshold"

    def synth_config(self) -> SynthConfig:
        return SynthConfig(image_size=self.image_size, shape_min=self.shape_min, shape_max=self.shape_max,
                           speckles=self.speckles, clutter=self.clutter)

    def net_config(self, seed_offset: int = 0) -> NetConfig:
        return NetConfig(image_size=self.image_size, fuse_k=self.fuse_k, fusion=self.fusion,
                         use_mca=self.use_mca, fused_channels=self.fused_channels,
                         mca_latent=self.mca_latent, upsample=self.upsample,
                         seed=self.seed + seed_offset)

    def train_config(self, steps: int, seed_offset: int = 0) -> TrainConfig:
        return TrainConfig(steps=steps, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                           weight_decay=self.weight_decay, clip_norm=self.clip_norm, hflip=self.hflip,
                           seed=self.seed + seed_offset, progress=self.progress)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_text(self) -> str:
        """Render in the key = value file syntax."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: Any, kind: type) -> Any:
    if not isinstance(raw, str):
        return kind(raw)
    text = raw.strip()
    if kind is bool:
        lowered = text.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"{name}: expected a boolean, got '{raw}'")
    try:
        return kind(text)
    except ValueError as e:
        raise ValueError(f"{name}: cannot parse '{raw}' as {kind.__name__}") from e


def _field_types() -> Dict[str, type]:
    defaults = PipelineConfig()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(PipelineConfig)}


def apply_overrides(config: PipelineConfig, overrides: Mapping[str, Any], source: str) -> PipelineConfig:
    types = _field_types()
    for key, raw in overrides.items():
        name = key.strip().lower().replace("-", "_")
        if name not in types:
            raise ValueError(f"unknown config key '{key}' in {source}")
        if raw is None:
            continue
        setattr(config, name, _coerce(name, raw, types[name]))
    return config


def _env_overrides() -> Dict[str, str]:
    types = _field_types()
    found = {}
    for name in types:
        value = os.getenv(f"{ENV_PREFIX}{name.upper()}")
        if value is not None:
            found[name] = value
    return found


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                use_env: bool = True) -> PipelineConfig:
    """
    Resolve a configuration: defaults < file < SPOL_* environment < overrides.

    Args:
        path (str): Optional key = value config file
        overrides (dict): Values from command-line flags
        use_env (bool): Read SPOL_<KEY> environment variables

    Returns:
        PipelineConfig: Validated configuration
    """
    config = PipelineConfig()
    if path:
        if not Path(path).exists():
            raise FileNotFoundError(f"config file not found: {path}")
        apply_overrides(config, dotenv_values(path), source=str(path))
        logger.info(f"Loaded config file {path}")
    if use_env:
        env = _env_overrides()
        if env:
            apply_overrides(config, env, source="environment")
            logger.info(f"Applied environment overrides: {sorted(env)}")
    if overrides:
        apply_overrides(config, overrides, source="command line")
    return config.validate()
