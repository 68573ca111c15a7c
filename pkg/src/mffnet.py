"""
Multiplicative feature fusion network for CAM generation.
Toy conv backbone, multiplication based channel attention, multi-stage fusion,
classification and auxiliary heads, and class activation map extraction.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .gppl import CamMap
from .layers import Conv2d, Linear, Module
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    cross_entropy,
    global_avg_pool,
    no_grad,
    sigmoid,
    upsample,
)
from .training import TrainConfig, TrainResult, fit, predict_batched

logger = logging.getLogger(__name__)

FUSION_KINDS = ("mul", "add", "concat")
MCA_BRANCHES = 3


@dataclass
class NetConfig:
    """Architecture of one MFF-Net instance."""
    num_classes: int = 4
    in_channels: int = 3
    image_size: int = 64
    stage_channels: Tuple[int, ...] = (16, 32, 64, 128)
    fuse_k: int = 3
    fusion: str = "mul"
    use_mca: bool = True
    fused_channels: int = 64
    mca_latent: int = 32
    upsample: str = "bilinear"
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 4:
            raise ValueError(f"backbone needs 4 stages, got {self.stage_channels}")
        if self.fuse_k not in (1, 2, 3, 4):
            raise ValueError(f"fuse_k must be in 1..4, got {self.fuse_k}")
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"fusion must be one of {FUSION_KINDS}, got '{self.fusion}'")
        if self.image_size % 16:
            raise ValueError(f"image_size must be divisible by 16 for four stride-2 stages, got {self.image_size}")

    def to_manifest(self) -> Dict:
        payload = asdict(self)
        payload["stage_channels"] = list(self.stage_channels)
        return payload

    @classmethod
    def from_manifest(cls, payload: Dict) -> "NetConfig":
        known = {k: v for k, v in payload.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class BackboneFeatures:
    """Stage outputs ordered from shallow (high resolution) to deep."""
    stages: List[Tensor]

    def last(self, k: int) -> List[Tensor]:
        if not 1 <= k <= len(self.stages):
            raise ValueError(f"cannot select the last {k} of {len(self.stages)} stages")
        return self.stages[-k:]


@dataclass
class FusionOutput:
    fused_map: Tensor
    pooled: Tensor
    logits: Optional[Tensor] = None
    aux_logits: Optional[Tensor] = None


class ConvStage(Module):
    """Stride-2 3x3 conv then a 3x3 refinement conv, both with ReLU."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.down = Conv2d(in_channels, out_channels, 3, rng, stride=2, padding=1)
        self.refine = Conv2d(out_channels, out_channels, 3, rng, stride=1, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.refine(self.down(x).relu()).relu()


class Backbone(Module):
    def __init__(self, in_channels: int, stage_channels: Sequence[int], rng: np.random.Generator):
        widths = [in_channels] + list(stage_channels)
        self.stages = [ConvStage(widths[i], widths[i + 1], rng) for i in range(len(stage_channels))]

    def forward(self, image: Tensor) -> BackboneFeatures:
        features = []
        x = image
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return BackboneFeatures(features)


def unit_gate(x: Tensor) -> Tensor:
    """2 * sigmoid(x): values in (0, 2) with 1 at x = 0, so products of gated maps stay near unit scale."""
    return sigmoid(x) * 2.0


class MCA(Module):
    """
    Multiplication based channel attention over three branches.

    Holds per-branch squeeze (C_i -> C') and expand (C' -> C_i) projections.
    The squeezed vectors are gated into (0, 2) and multiplied into one shared
    latent vector, so each branch's attention depends on every branch.
    """

    def __init__(self, channels: Sequence[int], latent_dim: int, rng: np.random.Generator):
        if len(channels) != MCA_BRANCHES:
            raise ValueError(f"MCA works on exactly {MCA_BRANCHES} branches, got {len(channels)}")
        self.latent_dim = latent_dim
        self.squeeze = [Linear(c, latent_dim, rng) for c in channels]
        self.expand = [Linear(latent_dim, c, rng) for c in channels]

    def shared_latent(self, features: Sequence[Tensor]) -> Tensor:
        """(N, C') product of the gated squeezed vectors, each entry in (0, 8)."""
        if len(features) != MCA_BRANCHES:
            raise ValueError(f"MCA expects {MCA_BRANCHES} branches, got {len(features)}")
        latent = None
        for branch, squeeze in zip(features, self.squeeze):
            n, c = branch.shape[:2]
            projected = unit_gate(squeeze(global_avg_pool(branch).reshape(n, c)))
            latent = projected if latent is None else latent * projected
        return latent

    def forward(self, features: Sequence[Tensor]) -> List[Tensor]:
        latent = self.shared_latent(features)
        attended = []
        for branch, expand in zip(features, self.expand):
            n, c = branch.shape[:2]
            weights = sigmoid(expand(latent)).reshape(n, c, 1, 1)
            attended.append(branch * weights)
        return attended


def mca(features: Sequence[Tensor], module: MCA) -> List[Tensor]:
    return module(features)


def _check_aligned(maps: Sequence[Tensor]):
    if not maps:
        raise ShapeError("fusion needs at least one branch")
    for m in maps[1:]:
        if m.shape != maps[0].shape:
            raise ShapeError(f"fusion branches are not aligned: {maps[0].shape} vs {m.shape}")


def _pool(fused: Tensor) -> Tensor:
    n, c = fused.shape[:2]
    return global_avg_pool(fused).reshape(n, c)


def fuse_multiplicative(*maps: Tensor) -> FusionOutput:
    """Element-wise product of aligned branches; d(pooled)/dX = Y*Z/(H*W)."""
    _check_aligned(maps)
    fused = maps[0]
    for m in maps[1:]:
        fused = fused * m
    return FusionOutput(fused_map=fused, pooled=_pool(fused))


def fuse_additive(*maps: Tensor) -> FusionOutput:
    """Element-wise sum of aligned branches; d(pooled)/dX is the constant 1/(H*W)."""
    _check_aligned(maps)
    fused = maps[0]
    for m in maps[1:]:
        fused = fused + m
    return FusionOutput(fused_map=fused, pooled=_pool(fused))


def fuse_concat(*maps: Tensor, projection: Conv2d) -> FusionOutput:
    """Channel concatenation followed by a 1x1 projection back to C_f."""
    _check_aligned(maps)
    fused = projection(concat(maps, axis=1))
    return FusionOutput(fused_map=fused, pooled=_pool(fused))


class MFFTrunk(Module):
    """
    Backbone -> last K stages -> MCA -> 1x1 alignment -> gate -> upsample -> fusion.

    Each aligned branch passes through unit_gate, so every fused input lies in
    (0, 2) and the product of K branches stays bounded by 2**K.
    """

    def __init__(self, config: NetConfig, rng: np.random.Generator):
        self.config = config
        self.backbone = Backbone(config.in_channels, config.stage_channels, rng)
        branch_channels = config.stage_channels[-config.fuse_k:]
        self.mca = None
        if config.use_mca:
            if config.fuse_k == MCA_BRANCHES:
                self.mca = MCA(branch_channels, config.mca_latent, rng)
            else:
                logger.warning(f"MCA needs {MCA_BRANCHES} fused stages; disabled for fuse_k={config.fuse_k}")
        self.align = [Conv2d(c, config.fused_channels, 1, rng) for c in branch_channels]
        self.projection = None
        if config.fusion == "concat":
            self.projection = Conv2d(config.fuse_k * config.fused_channels, config.fused_channels, 1, rng)

    def check_input(self, image: Tensor):
        expected = (self.config.in_channels, self.config.image_size, self.config.image_size)
        if image.ndim != 4 or tuple(image.shape[1:]) != expected:
            raise ShapeError(f"expected images of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), "
                             f"got {image.shape}")

    def forward(self, image: Tensor) -> Tuple[FusionOutput, BackboneFeatures]:
        self.check_input(image)
        features = self.backbone(image)
        branches = features.last(self.config.fuse_k)
        if self.mca is not None:
            branches = self.mca(branches)
        out_h, out_w = branches[0].shape[2:]
        aligned = [upsample(unit_gate(align(b)), out_h, out_w, self.config.upsample)
                   for align, b in zip(self.align, branches)]
        if self.config.fusion == "mul":
            fusion = fuse_multiplicative(*aligned)
        elif self.config.fusion == "add":
            fusion = fuse_additive(*aligned)
        else:
            fusion = fuse_concat(*aligned, projection=self.projection)
        return fusion, features


class MFFNet(Module):
    """Classification-stage network producing logits, auxiliary logits and the fused map."""

    def __init__(self, config: NetConfig):
        rng = np.random.default_rng([config.seed, 11])
        self.config = config
        self.trunk = MFFTrunk(config, rng)
        self.classifier = Linear(config.fused_channels, config.num_classes, rng)
        self.aux_classifier = Linear(config.stage_channels[-1], config.num_classes, rng)

    def forward(self, image: Tensor) -> FusionOutput:
        fusion, features = self.trunk(image)
        deepest = features.stages[-1]
        n, c = deepest.shape[:2]
        fusion.logits = self.classifier(fusion.pooled)
        fusion.aux_logits = self.aux_classifier(global_avg_pool(deepest).reshape(n, c))
        return fusion


class BackboneClassifier(Module):
    """Standalone classifier: toy backbone, global pooling of the deepest stage, linear head."""

    def __init__(self, config: NetConfig):
        rng = np.random.default_rng([config.seed, 13])
        self.config = config
        self.backbone = Backbone(config.in_channels, config.stage_channels, rng)
        self.classifier = Linear(config.stage_channels[-1], config.num_classes, rng)

    def forward(self, image: Tensor) -> Tensor:
        deepest = self.backbone(image).stages[-1]
        n, c = deepest.shape[:2]
        return self.classifier(global_avg_pool(deepest).reshape(n, c))


def compute_cam(fused_map, classifier_weights, class_id: int,
                out_size: Optional[Tuple[int, int]] = None, mode: str = "bilinear") -> CamMap:
    """
    Class activation map from the fused features.

    CAM = ReLU(sum_c w[class_id, c] * fused_map[c]), optionally upsampled to
    out_size, then min-max normalized to [0, 1]. A map with no positive
    response stays all zero.

    Args:
        fused_map: (C, H, W) or (1, C, H, W) features, Tensor or array
        classifier_weights: (num_classes, C) weights, Tensor or array
        class_id (int): Class whose row weights the channels
        out_size (tuple): Optional (H, W) to upsample to before normalizing
        mode (str): Upsampling mode

    Returns:
        CamMap: Normalized map tagged with class_id
    """
    features = np.asarray(fused_map.data if isinstance(fused_map, Tensor) else fused_map, dtype=np.float64)
    weights = np.asarray(classifier_weights.data if isinstance(classifier_weights, Tensor) else classifier_weights,
                         dtype=np.float64)
    if features.ndim == 4:
        features = features[0]
    if not 0 <= class_id < weights.shape[0]:
        raise ValueError(f"class_id {class_id} outside 0..{weights.shape[0] - 1}")
    if weights.shape[1] != features.shape[0]:
        raise ShapeError(f"classifier has {weights.shape[1]} inputs, fused map has {features.shape[0]} channels")
    cam = np.maximum(np.tensordot(weights[class_id], features, axes=1), 0.0)
    if out_size is not None and tuple(out_size) != cam.shape:
        with no_grad():
            cam = upsample(Tensor(cam[None, None]), out_size[0], out_size[1], mode).data[0, 0]
    return CamMap(normalize_cam(cam), source_class=int(class_id))


def normalize_cam(cam: np.ndarray) -> np.ndarray:
    low, high = cam.min(), cam.max()
    if high <= 0:
        return np.zeros_like(cam)
    if high - low <= 0:
        return np.ones_like(cam)
    return np.clip((cam - low) / (high - low), 0.0, 1.0)


def joint_loss(output: FusionOutput, labels: np.ndarray, use_aux: bool = True) -> Tensor:
    """L_cls + L_aux, both softmax cross-entropy."""
    loss = cross_entropy(output.logits, labels)
    if use_aux:
        loss = loss + cross_entropy(output.aux_logits, labels)
    return loss


def train_mffnet(images: np.ndarray, labels: np.ndarray, net_config: NetConfig,
                 train_config: TrainConfig, use_aux: bool = True) -> TrainResult:
    """
    Train the CAM-generation network with the joint classification loss.

    Args:
        images (np.ndarray): (N, 3, H, W) training images
        labels (np.ndarray): (N,) class ids
        net_config (NetConfig): Architecture
        train_config (TrainConfig): Optimizer and schedule
        use_aux (bool): Add the auxiliary head's cross-entropy

    Returns:
        TrainResult: Trained model and per-step loss curve
    """
    model = MFFNet(net_config)
    losses = fit(model, images, labels, lambda m, x, y: joint_loss(m(x), y, use_aux),
                 train_config, desc="mffnet")
    return TrainResult(model=model, losses=losses)


def train_classifier(images: np.ndarray, labels: np.ndarray, net_config: NetConfig,
                     train_config: TrainConfig) -> TrainResult:
    model = BackboneClassifier(net_config)
    losses = fit(model, images, labels, lambda m, x, y: cross_entropy(m(x), y),
                 train_config, desc="classifier")
    return TrainResult(model=model, losses=losses)


def class_logits(model: Module, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Logits of either classifier kind, computed in inference batches."""
    def run(batch: Tensor) -> np.ndarray:
        out = model(batch)
        return (out.logits if isinstance(out, FusionOutput) else out).data

    return predict_batched(run, images, batch_size)


def predict_topk(model: Module, images: np.ndarray, k: int = 5, batch_size: int = 64) -> np.ndarray:
    """Class ids ranked best first, (N, min(k, num_classes))."""
    logits = class_logits(model, images, batch_size)
    order = np.argsort(-logits, axis=1, kind="stable")
    return order[:, :k]


def accuracy(model: Module, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    return float((predict_topk(model, images, 1, batch_size)[:, 0] == labels).mean())


def fused_maps(model: MFFNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Fused feature maps (N, C_f, h, w) for CAM extraction."""
    return predict_batched(lambda batch: model(batch).fused_map.data, images, batch_size)


def build_model(kind: str, net_config: NetConfig) -> Module:
    if kind == "mffnet":
        return MFFNet(net_config)
    if kind == "classifier":
        return BackboneClassifier(net_config)
    raise ValueError(f"unknown model kind '{kind}'")
