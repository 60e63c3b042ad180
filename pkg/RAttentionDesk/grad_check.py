"""grad_check.py
Central finite-difference checks against tape gradients."""

from __future__ import annotations
from typing import Callable, Iterable
import numpy as np

from tensor import NonFiniteError, Tape, Tensor, backward

DENOMINATOR_FLOOR = 1e-8


def _evaluate(f: Callable[[Tensor], Tensor], x: Tensor) -> float:
    value = f(x)
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {data.shape}.")
    result = float(data.reshape(-1)[0])
    if not np.isfinite(result):
        raise NonFiniteError("The checked function returned a non-finite value.")
    return result


def numeric_gradient(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> np.ndarray:
    """Central-difference estimate of df/dx at the flat positions in indices (all when None).
    Entries that were not sampled are left at zero. x is perturbed in place and restored."""
    if step <= 0:
        raise ValueError(f"The finite-difference step must be positive, got {step}.")
    flat = x.data.reshape(-1)
    estimate = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size) if indices is None else indices:
        original = flat[i]
        flat[i] = original + step
        plus = _evaluate(f, x)
        flat[i] = original - step
        minus = _evaluate(f, x)
        flat[i] = original
        estimate[i] = (plus - minus) / (2.0 * step)
    return estimate.reshape(x.shape)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    floor: float = DENOMINATOR_FLOOR,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compares the tape gradient of f at x with central differences.

    f may read x through its argument or through a closure holding the same
    tensor (model parameters), since x is perturbed in place.

    Args:
        f (Callable[[Tensor], Tensor]): Deterministic scalar function.
        x (Tensor): Point to check at.
        step (float, optional): Finite-difference step. Defaults to 1e-5.
        floor (float, optional): Lower bound on the relative-error denominator. Defaults to 1e-8.
        max_elements (int | None, optional): Check only this many randomly chosen entries. Defaults to None (all).
        rng (np.random.Generator | None, optional): Chooses the sampled entries. Defaults to a fixed seed.

    Raises:
        ValueError: If step is not positive.
        NonFiniteError: If f returns NaN or Inf.

    Returns:
        float: The worst elementwise |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    if step <= 0:
        raise ValueError(f"The finite-difference step must be positive, got {step}.")
    previous_flag = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            value = f(x)
            if not np.all(np.isfinite(value.data)):
                raise NonFiniteError("The checked function returned a non-finite value.")
            grads = backward(tape, value)
    finally:
        x.requires_grad = previous_flag
    analytic = grads.get(x, np.zeros_like(x.data)).reshape(-1)

    if max_elements is None or max_elements >= x.size:
        indices = np.arange(x.size)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        indices = rng.choice(x.size, size=max_elements, replace=False)
    numeric = numeric_gradient(f, x, step, indices).reshape(-1)

    worst = 0.0
    for i in indices:
        a, n = float(analytic[i]), float(numeric[i])
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), floor))
    return worst
