"""
Plain SGD with coupled L2 weight decay
"""
from collections.abc import Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


def sgd_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], lr: float, weight_decay: float = 0.0
) -> list[np.ndarray]:
    """w <- w - lr * (g + weight_decay * w); returns new arrays, inputs are untouched."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    updated = []
    for i, (w, g) in enumerate(zip(params, grads, strict=True)):
        w = np.asarray(w, dtype=np.float64)
        g = np.zeros_like(w) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != w.shape:
            raise ContractError(f"parameter {i}: gradient shape {g.shape} != parameter shape {w.shape}")
        updated.append(w - lr * (g + weight_decay * w))
    return updated


class SGD:
    """Applies `sgd_step` to a fixed list of leaf tensors in place."""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        new = sgd_step([p.data for p in self.params], [p.grad for p in self.params], self.lr, self.weight_decay)
        for p, data in zip(self.params, new, strict=True):
            p.data = data
