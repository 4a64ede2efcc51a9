# unips_system/core/optim.py

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from unips_system.core.exceptions import OptimizerError, ParameterError
from unips_system.core.tensor import Parameter

logger = logging.getLogger(__name__)


@dataclass
class StepDecaySchedule:
    """
    Linear warmup from 0 to ``base_lr`` over the first epoch, then
    ``base_lr * factor ** floor((epoch - 1) / interval)`` with 1-based epochs.
    """

    base_lr: float
    iters_per_epoch: int
    decay_factor: float = 0.8
    decay_interval: int = 10
    warmup_epochs: int = 1

    def __post_init__(self):
        if self.base_lr < 0:
            raise ParameterError(f"Learning rate must be non-negative, got {self.base_lr}")
        if self.iters_per_epoch < 1 or self.decay_interval < 1:
            raise ParameterError("iters_per_epoch and decay_interval must be at least 1")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ParameterError(f"Decay factor must be in (0, 1], got {self.decay_factor}")

    def lr_at(self, iteration: int) -> float:
        warmup_iters = self.warmup_epochs * self.iters_per_epoch
        if iteration < warmup_iters:
            return self.base_lr * (iteration + 1) / warmup_iters
        epoch = iteration // self.iters_per_epoch + 1
        return self.base_lr * self.decay_factor ** ((epoch - 1) // self.decay_interval)


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def moments_for(self, name: str, like: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if name not in self.first_moment:
            self.first_moment[name] = np.zeros_like(like)
            self.second_moment[name] = np.zeros_like(like)
        m, v = self.first_moment[name], self.second_moment[name]
        if m.shape != like.shape:
            raise OptimizerError(f"Moment shape {m.shape} does not match parameter '{name}' shape {like.shape}")
        return m, v

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {"__step__": np.array(self.step, dtype=np.int64)}
        for name, m in self.first_moment.items():
            arrays[f"m::{name}"] = m
            arrays[f"v::{name}"] = self.second_moment[name]
        return arrays

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        self.step = int(arrays["__step__"])
        self.first_moment = {k[3:]: np.array(v) for k, v in arrays.items() if k.startswith("m::")}
        self.second_moment = {k[3:]: np.array(v) for k, v in arrays.items() if k.startswith("v::")}


def adamw_step(params: Sequence[Tuple[str, Parameter]], grads: Sequence[np.ndarray],
               state: OptimizerState) -> OptimizerState:
    """One AdamW update with decoupled weight decay and bias-corrected moments, in place."""
    if len(params) != len(grads):
        raise OptimizerError(f"Got {len(grads)} gradients for {len(params)} parameters")
    for (name, p), g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise OptimizerError(f"Non-finite gradient for parameter '{name}'")
        if g is not None and g.shape != p.shape:
            raise OptimizerError(f"Gradient shape {g.shape} does not match parameter '{name}' shape {p.shape}")

    state.step += 1
    lr = state.lr
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for (name, p), g in zip(params, grads):
        if g is None:
            continue
        m, v = state.moments_for(name, p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data *= (1.0 - lr * state.weight_decay)
        p.data -= (lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)).astype(p.data.dtype)
    return state


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class AdamW:
    """Optimizer over the trainable parameters of a module, driven by a learning-rate schedule."""

    def __init__(self, named_params: List[Tuple[str, Parameter]], schedule: StepDecaySchedule,
                 weight_decay: float = 0.05, clip_norm: float = 1.0):
        self.named_params = named_params
        self.schedule = schedule
        self.clip_norm = clip_norm
        self.state = OptimizerState(lr=schedule.lr_at(0), weight_decay=weight_decay)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self) -> Tuple[float, float]:
        """Clip, update, and return ``(lr, grad_norm)`` for the step just taken."""
        grad_norm = clip_grad_norm([p for _, p in self.named_params], self.clip_norm)
        self.state.lr = self.schedule.lr_at(self.state.step)
        grads = [p.grad for _, p in self.named_params]
        adamw_step(self.named_params, grads, self.state)
        return self.state.lr, grad_norm
