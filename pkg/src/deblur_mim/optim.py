"""AdamW and LARS on plain arrays, cosine-with-warmup schedule, layer-wise lr decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class OptimError(ValueError):
    pass


def _check_finite(name: str, grad: np.ndarray) -> None:
    if not np.isfinite(grad).all():
        raise OptimError(f"non-finite gradient for parameter {name!r}")


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               wd: float = 0.0, name: str = "param") -> np.ndarray:
    """One AdamW update, in place on ``param``.

    Decoupled decay is applied first (``param *= 1 - lr*wd``), then the
    bias-corrected adaptive step.
    """
    _check_finite(name, grad)
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    if wd:
        param *= 1.0 - lr * wd
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


@dataclass
class AdamW:
    """AdamW over a ``{name: array}`` mapping with per-name lr scales and decay masks."""

    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    lr_scale: dict = field(default_factory=dict)
    no_decay: frozenset = frozenset()
    state: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float) -> None:
        b1, b2 = self.betas
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = AdamState(np.zeros_like(p), np.zeros_like(p))
            wd = 0.0 if name in self.no_decay else self.weight_decay
            adamw_step(p, g, st, lr * self.lr_scale.get(name, 1.0), b1, b2, self.eps, wd, name)


# ---------------------------------------------------------------------------
# LARS

LARS_EPS = 1e-9


def trust_ratio(param: np.ndarray, grad: np.ndarray, wd: float, eps: float = LARS_EPS) -> float:
    w_norm = float(np.linalg.norm(param))
    g_norm = float(np.linalg.norm(grad))
    if w_norm == 0.0 or g_norm == 0.0:
        return 1.0
    return w_norm / (g_norm + wd * w_norm + eps)


@dataclass
class LarsState:
    mu: np.ndarray


def lars_step(param: np.ndarray, grad: np.ndarray, state: LarsState, lr: float,
              momentum: float = 0.9, wd: float = 0.0, adapt: bool = True,
              name: str = "param") -> np.ndarray:
    """One LARS update in place on ``param``.

    The layer's step is ``lr * trust_ratio * (grad + wd*param)`` fed through
    heavy-ball momentum.  ``adapt=False`` (biases, norms) uses ratio 1.
    """
    _check_finite(name, grad)
    d = grad + wd * param if wd else grad
    if adapt:
        d = d * trust_ratio(param, grad, wd)
    state.mu *= momentum
    state.mu += d
    param -= lr * state.mu
    return param


@dataclass
class LARS:
    momentum: float = 0.9
    weight_decay: float = 0.0
    state: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float) -> None:
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = LarsState(np.zeros_like(p))
            adapt = p.ndim > 1
            lars_step(p, g, st, lr, self.momentum, self.weight_decay if adapt else 0.0,
                      adapt, name)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class ScheduleSpec:
    base_lr: float
    warmup_epochs: float
    total_epochs: float
    steps_per_epoch: int = 1
    min_lr: float = 0.0

    def __post_init__(self):
        if not self.base_lr >= 0:
            raise OptimError(f"base_lr must be >= 0, got {self.base_lr}")
        if self.total_epochs <= 0 or not 0 <= self.warmup_epochs < self.total_epochs:
            raise OptimError(
                f"need 0 <= warmup ({self.warmup_epochs}) < total ({self.total_epochs})")
        if self.steps_per_epoch < 1:
            raise OptimError("steps_per_epoch must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_epochs * self.steps_per_epoch)

    @property
    def total_steps(self) -> int:
        return round(self.total_epochs * self.steps_per_epoch)


def cosine_warmup_lr(s: ScheduleSpec, step: int) -> float:
    """Linear warmup to ``base_lr`` then half-cosine down to ``min_lr``."""
    warm, total = s.warmup_steps, s.total_steps
    if step >= total:
        return s.min_lr
    if step < warm:
        return s.base_lr * step / warm
    frac = (step - warm) / (total - warm)
    return s.min_lr + (s.base_lr - s.min_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


def scaled_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: the tabulated base rate refers to a batch of 256."""
    return base_lr * batch_size / 256.0


def layerwise_lr_scale(layer_index: int, num_layers: int, decay: float) -> float:
    if not 0.0 < decay <= 1.0:
        raise OptimError(f"layer-wise decay must lie in (0, 1], got {decay}")
    if not 0 <= layer_index <= num_layers:
        raise OptimError(f"layer index {layer_index} outside [0, {num_layers}]")
    return decay ** (num_layers - layer_index)
