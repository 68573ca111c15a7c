"""
Class-agnostic segmentation trained on pseudo labels with a masked binary cross-entropy.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .gppl import PseudoLabel
from .layers import Conv2d, Module
from .mffnet import MFFTrunk, NetConfig
from .tensor import BCE_EPS, Tensor, masked_bce as masked_bce_op, no_grad, upsample
from .training import TrainConfig, TrainResult, fit, predict_batched

logger = logging.getLogger(__name__)


@dataclass
class ProbMask:
    """Per-pixel foreground probability, clamped to [1e-7, 1 - 1e-7]."""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.clip(np.asarray(self.values, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)

    @property
    def shape(self):
        return self.values.shape


def masked_bce(pred: ProbMask, label: PseudoLabel) -> float:
    """
    -(1/(H*W)) * sum w_ij [g_ij log p_ij + (1 - g_ij) log(1 - p_ij)].

    The denominator is the full pixel count, not the number of supervised pixels.
    """
    if pred.shape != label.shape:
        raise ValueError(f"prediction {pred.shape} and pseudo label {label.shape} differ in shape")
    with no_grad():
        return masked_bce_op(Tensor(pred.values), label.g, label.w).item()


class SegmentationNet(Module):
    """MFF trunk with a 1-channel sigmoid head, upsampled to the input size."""

    def __init__(self, config: NetConfig):
        rng = np.random.default_rng([config.seed, 29])
        self.config = config
        self.trunk = MFFTrunk(config, rng)
        self.head = Conv2d(config.fused_channels, 1, 1, rng)

    def forward(self, image: Tensor) -> Tensor:
        fusion, _ = self.trunk(image)
        prob = self.head(fusion.fused_map).sigmoid()
        return upsample(prob, image.shape[2], image.shape[3], self.config.upsample)


def label_planes(pseudo_labels: Sequence[PseudoLabel]) -> np.ndarray:
    """Stack (g, w) planes into an (N, 2, H, W) target array."""
    return np.stack([np.stack([p.g, p.w]) for p in pseudo_labels]).astype(np.float32)


def _segmentation_loss(model: SegmentationNet, batch: Tensor, planes: np.ndarray) -> Tensor:
    prob = model(batch)
    return masked_bce_op(prob, planes[:, :1], planes[:, 1:])


def train_segmenter(images: np.ndarray, pseudo_labels: Sequence[PseudoLabel], net_config: NetConfig,
                    train_config: TrainConfig) -> TrainResult:
    """
    Train the class-agnostic segmenter; no class label is consumed.

    Args:
        images (np.ndarray): (N, 3, H, W) images that kept a pseudo label
        pseudo_labels (list): One PseudoLabel per image, at image resolution
        net_config (NetConfig): Architecture of the trunk
        train_config (TrainConfig): Optimizer and schedule

    Returns:
        TrainResult: Trained SegmentationNet and loss curve
    """
    if len(images) != len(pseudo_labels):
        raise ValueError(f"{len(images)} images but {len(pseudo_labels)} pseudo labels")
    planes = label_planes(pseudo_labels)
    if planes.shape[2:] != images.shape[2:]:
        raise ValueError(f"pseudo labels {planes.shape[2:]} do not match image size {images.shape[2:]}")
    model = SegmentationNet(net_config)
    losses = fit(model, images, planes, _segmentation_loss, train_config, desc="segmenter")
    return TrainResult(model=model, losses=losses)


def predict_masks(model: SegmentationNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Foreground probabilities (N, H, W) for a batch of images."""
    return predict_batched(lambda batch: model(batch).data[:, 0], images, batch_size)


def predict_mask(model: SegmentationNet, image: np.ndarray) -> ProbMask:
    """Foreground probability map for one (3, H, W) image."""
    return ProbMask(predict_masks(model, np.asarray(image)[None])[0])


def pixel_accuracy(masks: np.ndarray, pseudo_labels: List[PseudoLabel], tau: float = 0.5) -> float:
    """Agreement between binarized predictions and the supervised pseudo-label pixels."""
    hits = total = 0
    for mask, label in zip(masks, pseudo_labels):
        supervised = label.w > 0
        hits += int(((mask >= tau) == (label.g > 0))[supervised].sum())
        total += int(supervised.sum())
    return hits / total if total else 0.0
