"""Rank-stabilised low-rank adapters with Gaussian initialisation.

A frozen matrix ``W0`` of shape ``(a, b)`` is adapted as
``W0 + beta * Y @ X`` with ``Y`` of shape ``(a, r)``, ``X`` of shape
``(r, b)`` and ``beta = alpha / sqrt(r)``. ``Y`` starts at zero, so a fresh
adapter leaves the wrapped computation unchanged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError, DimensionError
from .tensor import Tensor, add, matmul, scale

logger = logging.getLogger(__name__)


def beta(r: int, alpha: float) -> float:
    """Adapter scale ``alpha / sqrt(r)``."""
    if r < 1:
        raise ContractError(f"rank must be >= 1, got {r}")
    return alpha / math.sqrt(r)


@dataclass(eq=False)
class LoraAdapter:
    base_ref: str
    X: Tensor
    Y: Tensor
    rank: int
    alpha: float
    init_std: float

    @property
    def beta(self) -> float:
        return beta(self.rank, self.alpha)

    @property
    def shape(self) -> tuple[int, int]:
        return self.Y.shape[0], self.X.shape[1]

    def delta(self) -> Tensor:
        """``beta * Y @ X`` as a tracked tensor."""
        return scale(matmul(self.Y, self.X), self.beta)

    def effective_delta(self) -> np.ndarray:
        return self.beta * (self.Y.data @ self.X.data)

    def param_count(self) -> int:
        return trainable_param_count(self)


def create_adapter(a: int, b: int, r: int, alpha: float, init_std: float = 0.02, seed=0,
                   base_ref: str = "", allow_overcomplete: bool = False, dtype=np.float64) -> LoraAdapter:
    """Fresh adapter for an ``(a, b)`` matrix: ``X ~ N(0, init_std^2)``, ``Y = 0``.

    ``r`` above ``min(a, b)`` is rejected unless ``allow_overcomplete``; the
    product then still has rank at most ``min(a, b)``.
    """
    if r < 1:
        raise ContractError(f"rank must be >= 1, got {r}")
    if alpha <= 0 or init_std <= 0:
        raise ContractError("alpha and init_std must be positive")
    limit = min(a, b)
    if r > limit:
        if not allow_overcomplete:
            raise ContractError(f"rank {r} exceeds min({a}, {b}) = {limit}")
        logger.warning("adapter %s: rank %d exceeds min(%d, %d); delta rank is capped at %d",
                       base_ref or "?", r, a, b, limit)
    elif r > limit / 2:
        logger.warning("adapter %s: rank %d is above half of min(%d, %d)", base_ref or "?", r, a, b)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X = Tensor(rng.normal(0.0, init_std, size=(r, b)).astype(dtype), requires_grad=True)
    Y = Tensor(np.zeros((a, r), dtype=dtype), requires_grad=True)
    return LoraAdapter(base_ref, X, Y, int(r), float(alpha), float(init_std))


def effective_weight(W0: Tensor, adapter: LoraAdapter) -> Tensor:
    """``W0 + beta * Y @ X``; gradients reach ``X`` and ``Y`` only when ``W0`` is frozen."""
    if W0.shape != adapter.shape:
        raise DimensionError(f"adapter {adapter.base_ref or '?'} has shape {adapter.shape}, base is {W0.shape}")
    return add(W0, adapter.delta())


def trainable_param_count(adapter: LoraAdapter) -> int:
    a, b = adapter.shape
    return adapter.rank * (a + b)
