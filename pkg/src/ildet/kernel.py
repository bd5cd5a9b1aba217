"""Dense-network numerics: affine/ReLU layers, softmax, SGD with Nesterov
momentum and a finite-difference gradient checker.

Tensors are plain float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class StateError(RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class GradCheckError(AssertionError):
    """Analytic and numeric gradients disagree beyond tolerance."""


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.00005

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


class ParamStore:
    """Named parameters with matching gradient accumulators and velocity buffers."""

    def __init__(self, params: Optional[Dict[str, np.ndarray]] = None):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.velocity: Dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.velocity[name] = np.zeros_like(value)

    def names(self):
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def reset_velocity(self) -> None:
        for v in self.velocity.values():
            v.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name in self.params:
            out.params[name] = self.params[name].copy()
            out.grads[name] = self.grads[name].copy()
            out.velocity[name] = self.velocity[name].copy()
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]


def he_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(
            f"affine shapes do not conform: x{tuple(x.shape)} W{tuple(W.shape)} b{tuple(b.shape)}"
        )
    return x @ W + b


def blocked_affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray, block: int) -> np.ndarray:
    """``x @ W + b`` evaluated one ``block`` of output columns at a time.

    BLAS chooses kernels by matrix width, so a column's rounding can change
    when unrelated columns are appended. Fixed-width blocks make each block's
    values depend only on its own weights.
    """
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(
            f"affine shapes do not conform: x{tuple(x.shape)} W{tuple(W.shape)} b{tuple(b.shape)}"
        )
    if W.shape[1] % block:
        raise DimensionError(f"width {W.shape[1]} is not a multiple of block {block}")
    out = np.empty((x.shape[0], W.shape[1]))
    for j in range(0, W.shape[1], block):
        w = np.ascontiguousarray(W[:, j] if block == 1 else W[:, j:j + block])
        res = x @ w
        out[:, j:j + block] = res[:, None] if block == 1 else res
    out += b
    return out


def affine_backward(dout: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Return (dx, dW, db) for out = x @ W + b."""
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_backward(dout: np.ndarray, z: np.ndarray) -> np.ndarray:
    return dout * (z > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sgd_nesterov_step(
    store: ParamStore,
    cfg: OptimizerConfig,
    learning_rate: Optional[float] = None,
    masks: Optional[Dict[str, np.ndarray]] = None,
) -> None:
    """One Nesterov step in lookahead form, with coupled weight decay.

    ``v <- mu*v - lr*(g + wd*theta)``; ``theta <- theta + mu*v - lr*(g + wd*theta)``.
    Entries whose mask is False receive neither gradient nor decay, so they
    stay bit-identical. Gradients are zeroed afterwards.
    """
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    mu = cfg.momentum
    wd = cfg.weight_decay
    for name, theta in store.params.items():
        step = store.grads[name] + wd * theta if wd else store.grads[name].copy()
        if masks is not None and name in masks:
            mask = masks[name]
            if mask is False or (isinstance(mask, np.ndarray) and not mask.any()):
                continue
            if isinstance(mask, np.ndarray):
                step = step * mask
        v = store.velocity[name]
        v *= mu
        v -= lr * step
        theta += mu * v - lr * step
    store.zero_grad()


@dataclass
class GradCheckReport:
    worst_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    n_checked: int


def grad_check(
    store: ParamStore,
    loss_fn: Callable[[], float],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    raise_on_failure: bool = True,
) -> GradCheckReport:
    """Compare the analytic gradient against central finite differences.

    ``loss_fn()`` must run a forward pass over the current parameters, add the
    analytic gradient into ``store.grads`` and return the scalar loss.
    """
    if store.num_parameters() >= 10_000:
        raise ValueError("too many parameters for a finite-difference check")
    store.zero_grad()
    loss_fn()
    analytic = {k: g.copy() for k, g in store.grads.items()}

    worst = GradCheckReport(0.0, "", (), 0.0, 0.0, 0)
    n = 0
    for name, theta in store.params.items():
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + h
            f_plus = loss_fn()
            theta[idx] = orig - h
            f_minus = loss_fn()
            theta[idx] = orig
            num = (f_plus - f_minus) / (2 * h)
            ana = analytic[name][idx]
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            n += 1
            if err > worst.worst_error:
                worst = GradCheckReport(err, name, idx, ana, num, n)
    store.zero_grad()
    worst.n_checked = n
    if raise_on_failure and worst.worst_error > tolerance:
        raise GradCheckError(
            f"gradient mismatch in '{worst.worst_param}'{list(worst.worst_index)}: "
            f"analytic={worst.analytic:.6g} numeric={worst.numeric:.6g} "
            f"rel_err={worst.worst_error:.3g} > {tolerance}"
        )
    return worst
