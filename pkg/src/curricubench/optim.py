"""SGD with momentum and LARS, as pure per-tensor update rules.

Both functions work on scalars, numpy arrays and torch tensors alike. The velocity
is the only optimizer state; pass ``None`` on the first step.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np
import torch

from .errors import ShapeError

LARS_EPS = 1e-9


def _check(p, g, v):
    if np.shape(p) != np.shape(g) or (v is not None and np.shape(v) != np.shape(p)):
        raise ShapeError(f"shape mismatch: param {np.shape(p)}, grad {np.shape(g)}")


def sgd_update(p, g, lr, momentum=0.9, weight_decay=1e-4, velocity=None):
    """``v' = momentum*v + g + wd*p``; ``p' = p - lr*v'``. Returns ``(p', v')``."""
    _check(p, g, velocity)
    v_new = g + weight_decay * p
    if velocity is not None:
        v_new = momentum * velocity + v_new
    return p - lr * v_new, v_new


def _norm(x) -> float:
    if isinstance(x, torch.Tensor):
        return float(torch.linalg.vector_norm(x.detach().double()))
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64).ravel()))


def lars_local_lr(p, g, trust_coeff=0.001, weight_decay=1e-4) -> float:
    p_norm, g_norm = _norm(p), _norm(g)
    if p_norm > 0 and g_norm > 0:
        return trust_coeff * p_norm / (g_norm + weight_decay * p_norm + LARS_EPS)
    return 1.0


def lars_update(p, g, lr, trust_coeff=0.001, momentum=0.9, weight_decay=1e-4, velocity=None):
    """SGD step with the learning rate scaled per tensor by the LARS trust ratio."""
    _check(p, g, velocity)
    local = lars_local_lr(p, g, trust_coeff, weight_decay)
    return sgd_update(p, g, lr * local, momentum, weight_decay, velocity)


class Optimizer:
    """Applies :func:`sgd_update` or :func:`lars_update` to ``.grad`` in place."""

    def __init__(
        self,
        params: Iterable[torch.nn.Parameter],
        lr: float,
        kind: str = "sgd",
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
        trust_coeff: float = 0.001,
    ):
        if kind not in ("sgd", "lars"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.kind = kind
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.trust_coeff = trust_coeff
        self.velocity: dict[int, torch.Tensor] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            v = self.velocity.get(i)
            if self.kind == "lars":
                new_p, new_v = lars_update(
                    p, p.grad, self.lr, self.trust_coeff, self.momentum, self.weight_decay, v
                )
            else:
                new_p, new_v = sgd_update(p, p.grad, self.lr, self.momentum, self.weight_decay, v)
            p.copy_(new_p)
            self.velocity[i] = new_v
