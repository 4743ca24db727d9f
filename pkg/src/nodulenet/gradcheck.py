"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor, backward, no_grad


def _scalar(out: Tensor) -> float:
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("gradient_check needs a scalar-valued function")
    return float(out.data.reshape(()))


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def gradient_check(
    f: Callable[[Tensor], Tensor],
    point,
    epsilon: float = 1e-4,
    coords: Iterable[int] | None = None,
) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |central|)``.

    Evaluated in float64. ``coords`` restricts the check to a subset of flat
    indices of ``point``; by default every coordinate is checked.
    """
    if not 0 < epsilon <= 1e-2:
        raise ContractError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    out = f(x)
    _scalar(out)
    backward(out)
    analytic = x.grad.reshape(-1) if x.grad is not None else np.zeros(base.size)

    flat = base.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + epsilon
            plus = _scalar(f(Tensor(base)))
            flat[i] = orig - epsilon
            minus = _scalar(f(Tensor(base)))
            flat[i] = orig
            worst = max(worst, _relative_error(analytic[i], (plus - minus) / (2 * epsilon)))
    return worst


def parameter_gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn``'s gradient w.r.t. each parameter.

    Parameters are perturbed in place (they should be float64). At most
    ``max_coords`` randomly chosen coordinates are checked per tensor.
    Returns the max relative error per parameter name.
    """
    if not 0 < epsilon <= 1e-2:
        raise ContractError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    out = loss_fn()
    _scalar(out)
    backward(out)
    analytic = {n: (p.grad.reshape(-1).copy() if p.grad is not None else np.zeros(p.size)) for n, p in params.items()}

    errors = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            if max_coords is None or flat.size <= max_coords:
                idx = np.arange(flat.size)
            else:
                idx = rng.choice(flat.size, size=max_coords, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + epsilon
                plus = _scalar(loss_fn())
                flat[i] = orig - epsilon
                minus = _scalar(loss_fn())
                flat[i] = orig
                worst = max(worst, _relative_error(analytic[name][i], (plus - minus) / (2 * epsilon)))
            errors[name] = worst
    return errors
