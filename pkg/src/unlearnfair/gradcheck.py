"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NumericError
from .tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``; 0 when both vanish."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _scalar(value: Tensor) -> float:
    v = float(np.asarray(value.data).reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError("function returned a non-finite value")
    return v


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = _scalar(f(Tensor(x)))
            flat[i] = orig - eps
            lo = _scalar(f(Tensor(x)))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Compare backward() gradients of scalar ``f`` at ``x`` with central differences.

    Returns the max-norm relative error (see :func:`relative_error`).
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x, requires_grad=True)
    loss = f(xt)
    _scalar(loss)
    backward(loss)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)
    return relative_error(analytic, numeric_grad(f, x, eps))


def param_grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Finite-difference check of ``loss_fn`` with respect to tensors it closes over.

    Each parameter is perturbed in place and restored. The relative error is
    taken over all parameters jointly, so a parameter whose true gradient is
    exactly zero (a bias feeding a batch norm) does not divide noise by zero.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    for p in params:
        p.grad = None
    loss = loss_fn()
    _scalar(loss)
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    numeric = []
    with no_grad():
        for p in params:
            num = np.zeros(p.shape)
            flat, nflat = p.data.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = _scalar(loss_fn())
                flat[i] = orig - eps
                lo = _scalar(loss_fn())
                flat[i] = orig
                nflat[i] = (hi - lo) / (2.0 * eps)
            numeric.append(num)
    for p in params:
        p.grad = None
    if not params:
        return 0.0
    return relative_error(
        np.concatenate([a.reshape(-1) for a in analytic]), np.concatenate([n.reshape(-1) for n in numeric])
    )


def sample_away_from_kinks(
    rng: np.random.Generator,
    shape: Sequence[int],
    kinks: Sequence[float] = (0.0,),
    margin: float = 1e-3,
    low: float = -2.0,
    high: float = 2.0,
) -> np.ndarray:
    """Uniform samples in ``[low, high)`` redrawn until none lies within ``margin`` of a kink."""
    x = rng.uniform(low, high, size=shape)
    while True:
        bad = np.zeros(x.shape, dtype=bool)
        for k in kinks:
            bad |= np.abs(x - k) < margin
        if not bad.any():
            return x
        x[bad] = rng.uniform(low, high, size=int(bad.sum()))
