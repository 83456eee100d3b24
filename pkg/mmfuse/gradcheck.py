"""
Finite-difference gradient checking
"""
from collections.abc import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor, no_grad


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    coords: Sequence[int] | None = None,
) -> float:
    """
    Compare the tape gradient of scalar-valued `f` at `x` with central differences.

    Args:
        f: function of one tensor returning a single-element tensor
        x: evaluation point (its data is copied, never modified)
        eps: finite-difference step
        max_coords: check only this many randomly chosen coordinates (all when None)
        seed: seed for the coordinate sample
        coords: explicit flat coordinates to check; overrides `max_coords`

    Returns:
        max over checked coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    """
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got output shape {out.shape}")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    if coords is not None:
        checked = np.unique(np.asarray(coords, dtype=np.int64))
        if checked.size == 0 or checked[0] < 0 or checked[-1] >= base.size:
            raise ContractError(f"grad_check coordinates must lie in [0, {base.size})")
    elif max_coords is not None and max_coords < base.size:
        checked = np.sort(np.random.default_rng(seed).choice(base.size, size=max_coords, replace=False))
    else:
        checked = np.arange(base.size)

    worst = 0.0
    flat = base.reshape(-1)
    with no_grad():
        for i in checked:
            shifted = flat.copy()
            shifted[i] = flat[i] + eps
            f_plus = f(Tensor(shifted.reshape(base.shape))).item()
            shifted[i] = flat[i] - eps
            f_minus = f(Tensor(shifted.reshape(base.shape))).item()
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
