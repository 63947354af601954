"""Named parameter collections, AdamW, and the warmup-cosine LR schedule."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import Tensor


class ParameterSet:
    """Named map of trainable tensors plus per-parameter Adam moments.

    Iteration order is always the sorted name order, which pins optimizer
    update order (and therefore results) independent of construction order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name '{name}'")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._m[name] = np.zeros_like(tensor.data)
        self._v[name] = np.zeros_like(tensor.data)
        return tensor

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self._params):
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameter data by name (float32 copies), for checkpointing."""
        return {
            name: np.asarray(p.data, dtype=np.float32).copy()
            for name, p in self.items()
        }

    def n_elements(self) -> int:
        return sum(p.size for p in self._params.values())


def adamw_step(
    params: ParameterSet,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update with decoupled weight decay and bias correction."""
    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise UsageError(f"parameter '{name}' has no gradient")
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m = params._m[name]
        v = params._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def cosine_lr(
    step: int,
    total_steps: int,
    base_lr: float,
    warmup_steps: int = 0,
    min_lr: float = 0.0,
) -> float:
    """Linear warmup from 0 to ``base_lr``, then a half cosine to ``min_lr``."""
    if warmup_steps > total_steps:
        raise ConfigError(
            f"warmup_steps ({warmup_steps}) exceeds total_steps ({total_steps})"
        )
    if not 0 <= step <= total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        progress = 1.0
    else:
        progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def trunc_normal(shape, std: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations, by resampling."""
    out = rng.standard_normal(size=shape)
    mask = np.abs(out) > 2.0
    while mask.any():
        out[mask] = rng.standard_normal(size=int(mask.sum()))
        mask = np.abs(out) > 2.0
    return (out * std).astype(dtype)
