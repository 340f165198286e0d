"""Local optimizers: SGD with momentum/weight decay, the sharpness-aware
two-step wrappers (plain and adaptive), and the cyclic weight-averaging
learning-rate schedule.

All steps are pure functions over (params, state); nothing here mutates its
inputs, which keeps concurrent clients trivially safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import loss_and_grad
from .errors import ConfigError
from .models import ModelSpec
from .tensor import Batch, ParamVector

__all__ = [
    "SgdConfig",
    "SamConfig",
    "CyclicLr",
    "SgdState",
    "sgd_step",
    "sam_perturb",
    "sam_step",
    "sam_step_fn",
    "cyclic_lr",
]

_DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class SgdConfig:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        # lr = 0 is allowed: a frozen step leaves params unchanged, which
        # some round-loop edge cases rely on.
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass(frozen=True)
class SamConfig:
    """Neighborhood size rho; adaptive mode rescales it per-weight with
    t = |theta| + eta."""

    rho: float
    adaptive: bool = False
    eta: float = 0.0

    def __post_init__(self):
        if self.rho < 0:
            raise ConfigError("rho must be >= 0")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")


@dataclass(frozen=True)
class CyclicLr:
    gamma1: float
    gamma2: float
    cycle: int

    def __post_init__(self):
        if self.gamma1 <= 0 or self.gamma2 <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.cycle < 1:
            raise ConfigError("cycle length must be >= 1")


@dataclass(frozen=True)
class SgdState:
    """Momentum buffer; ``None`` until the first momentum step."""

    buf: np.ndarray | None = None


def sgd_step(
    params: ParamVector, grad: ParamVector, state: SgdState, cfg: SgdConfig
) -> tuple[ParamVector, SgdState]:
    """One SGD update: g' = grad + wd * params, optional momentum buffer."""
    g = grad.data
    if cfg.weight_decay:
        g = g + cfg.weight_decay * params.data
    if cfg.momentum:
        buf = g.copy() if state.buf is None else cfg.momentum * state.buf + g
        return params.like(params.data - cfg.lr * buf), SgdState(buf)
    return params.like(params.data - cfg.lr * g), state


def sam_perturb(params: ParamVector, grad: ParamVector, cfg: SamConfig) -> ParamVector:
    """Ascent direction scaled to the rho-neighborhood boundary.

    Plain mode: eps = rho * g / ||g||_2. Adaptive mode rescales elementwise
    by t = |theta| + eta: eps = rho * t^2 g / ||t g||_2. A (near-)zero
    denominator returns the zero vector; that happens legitimately on
    perfectly fit batches.
    """
    g = grad.data
    if cfg.adaptive:
        t = np.abs(params.data) + cfg.eta
        tg = t * g
        denom = float(np.linalg.norm(tg))
        if denom < _DEGENERATE_NORM:
            return grad.like(np.zeros_like(g))
        return grad.like(cfg.rho * (t * tg) / denom)
    denom = float(np.linalg.norm(g))
    if denom < _DEGENERATE_NORM:
        return grad.like(np.zeros_like(g))
    return grad.like(cfg.rho * g / denom)


LossGradFn = Callable[[ParamVector], tuple[float, ParamVector]]


def sam_step_fn(
    params: ParamVector,
    loss_grad: LossGradFn,
    state: SgdState,
    sam_cfg: SamConfig,
    sgd_cfg: SgdConfig,
) -> tuple[ParamVector, SgdState, float]:
    """Two-step sharpness-aware update against an arbitrary loss oracle.

    Ascends to params + eps along the (adaptively scaled) gradient, takes
    the gradient there, and descends from the original params with it.
    Weight decay enters only at the descent step, via ``sgd_step``.
    Returns (new params, new state, loss at params). Exactly two gradient
    evaluations are consumed per call.
    """
    loss, g1 = loss_grad(params)
    eps = sam_perturb(params, g1, sam_cfg)
    _, g2 = loss_grad(params.like(params.data + eps.data))
    new_params, new_state = sgd_step(params, g2, state, sgd_cfg)
    return new_params, new_state, loss


def sam_step(
    params: ParamVector,
    model: ModelSpec,
    batch: Batch,
    state: SgdState,
    sam_cfg: SamConfig,
    sgd_cfg: SgdConfig,
) -> tuple[ParamVector, SgdState, float]:
    """``sam_step_fn`` with both gradients taken on the same minibatch.

    With rho = 0 the perturbation is the zero vector, so the result is
    bit-identical to plain ``sgd_step`` on the batch gradient.
    """
    return sam_step_fn(
        params, lambda p: loss_and_grad(p, model, batch), state, sam_cfg, sgd_cfg
    )


def cyclic_lr(round_index: int, sched: CyclicLr) -> float:
    """Learning rate at 1-based step ``round_index`` of the cyclic schedule.

    gamma(i) = (1 - t(i)) gamma1 + t(i) gamma2 with
    t(i) = (mod(i - 1, c) + 1) / c; a cycle length of 1 means a constant
    gamma1.
    """
    if round_index < 1:
        raise ConfigError("round_index is 1-based")
    if sched.cycle == 1:
        return sched.gamma1
    t = ((round_index - 1) % sched.cycle + 1) / sched.cycle
    return (1.0 - t) * sched.gamma1 + t * sched.gamma2
