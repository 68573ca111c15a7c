"""
Parameterised building blocks, the SGD optimizer and gradient clipping on top of the tensor tape.
"""

import logging
from typing import Dict, Iterator, List, Tuple

import numpy as np

from .tensor import Tensor, conv2d, linear

logger = logging.getLogger(__name__)


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int,
                    gain: float = np.sqrt(2.0), dtype=np.float32) -> Tensor:
    """Fan-in scaled uniform init: U(-b, b) with b = gain * sqrt(3 / fan_in)."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Module:
    """Base class that discovers parameters and submodules from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """
        Copy arrays into the matching parameters.

        Args:
            state (dict): Parameter name -> array, as produced by state_dict()
        """
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch, missing={missing} unexpected={unexpected}")
        for name, param in own.items():
            array = np.asarray(state[name])
            if array.shape != param.shape:
                raise ValueError(f"parameter {name}: expected shape {param.shape}, got {array.shape}")
            param.data = array.astype(param.dtype).copy()
            param.zero_grad()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 gain: float = 1.0):
        self.weight = kaiming_uniform(rng, (out_features, in_features), in_features, gain=gain)
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class SGD:
    """Mini-batch SGD with heavy-ball momentum and L2 weight decay."""

    def __init__(self, params: List[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, v in zip(self.params, self.velocity):
            grad = p.grad
            if self.weight_decay:
                grad = grad + self.weight_decay * p.data
            v *= self.momentum
            v += grad
            p.data -= (self.lr * v).astype(p.dtype)


def clip_grad_norm(params: List[Tensor], max_norm: float) -> float:
    """
    Rescale gradients in place so their global L2 norm is at most max_norm.

    Args:
        params (list): Parameters whose .grad was filled by backward
        max_norm (float): Upper bound on the joint norm, > 0

    Returns:
        float: The norm before clipping
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype)
    return total
