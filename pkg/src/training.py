"""
Shared mini-batch training loop and batched inference helper.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np
from tqdm import tqdm

from .layers import SGD, Module, clip_grad_norm
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

LOG_EVERY = 100


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces NaN or infinite loss."""


@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float = 2.0  # 0 disables clipping
    hflip: bool = True
    seed: int = 0
    progress: bool = True


@dataclass
class TrainResult:
    model: Module
    losses: List[float] = field(default_factory=list)


def batch_indices(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Yield `steps` index batches, reshuffling at every epoch boundary."""
    order = rng.permutation(n)
    cursor = 0
    for _ in range(steps):
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        yield order[cursor:cursor + batch_size]
        cursor += batch_size


def random_hflip(images: np.ndarray, targets: np.ndarray,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Mirror a random half of the batch along the width axis.

    Targets with spatial dims (..., H, W) are mirrored with their images;
    per-sample class ids pass through unchanged. Inputs are never modified.
    """
    flip = rng.random(len(images)) < 0.5
    if not flip.any():
        return images, targets
    images = images.copy()
    images[flip] = images[flip][..., ::-1]
    if targets.ndim >= 3:
        targets = targets.copy()
        targets[flip] = targets[flip][..., ::-1]
    return images, targets


def fit(model: Module, images: np.ndarray, targets: np.ndarray,
        loss_fn: Callable[[Module, Tensor, np.ndarray], Tensor],
        config: TrainConfig, desc: str = "train") -> List[float]:
    """
    Minimize loss_fn with SGD and momentum.

    Gradients are clipped to a global norm of config.clip_norm before every
    step. A summary line with the mean loss and gradient norm is logged
    every 100 steps.

    Args:
        model (Module): Network to optimize in place
        images (np.ndarray): (N, C, H, W) inputs
        targets (np.ndarray): Per-sample targets, indexed along axis 0
        loss_fn (callable): (model, batch, batch_targets) -> scalar Tensor
        config (TrainConfig): Schedule and optimizer settings
        desc (str): Progress bar label

    Returns:
        list: Loss value of every step
    """
    n = len(images)
    if n == 0:
        raise ValueError("no training samples")
    if config.clip_norm < 0:
        raise ValueError(f"clip_norm must be >= 0, got {config.clip_norm}")
    batch_size = min(config.batch_size, n)
    rng = np.random.default_rng([config.seed, 17])
    optimizer = SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                    weight_decay=config.weight_decay)
    losses: List[float] = []
    grad_norms: List[float] = []

    batches = batch_indices(n, batch_size, config.steps, rng)
    for step, idx in enumerate(tqdm(batches, total=config.steps, desc=desc, disable=not config.progress)):
        x = images[idx]
        y = targets[idx]
        if config.hflip:
            x, y = random_hflip(x, y, rng)

        optimizer.zero_grad()
        loss = loss_fn(model, Tensor(x), y)
        value = loss.item()
        if not np.isfinite(value):
            logger.error(f"{desc}: non-finite loss {value} at step {step}")
            raise NonFiniteLossError(f"{desc}: loss became {value} at step {step}; lower the learning rate")
        loss.backward()
        if config.clip_norm > 0:
            grad_norms.append(clip_grad_norm(optimizer.params, config.clip_norm))
        optimizer.step()
        losses.append(value)

        if (step + 1) % LOG_EVERY == 0:
            norm = f", grad norm {np.mean(grad_norms[-LOG_EVERY:]):.3f}" if grad_norms else ""
            logger.info(f"{desc}: step {step + 1}/{config.steps} loss {np.mean(losses[-LOG_EVERY:]):.4f}{norm}")

    logger.info(f"{desc}: finished {config.steps} steps, final loss {losses[-1] if losses else float('nan'):.4f}")
    return losses


def predict_batched(run: Callable[[Tensor], np.ndarray], images: np.ndarray,
                    batch_size: int = 64) -> np.ndarray:
    """Apply `run` to inference batches without recording a tape and stack the results."""
    outputs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            outputs.append(np.asarray(run(Tensor(images[start:start + batch_size]))))
    return np.concatenate(outputs, axis=0)
