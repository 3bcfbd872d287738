"""Central finite-difference gradient checks."""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

from .rng import SplitMix64
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


def _central(loss_fn: Callable[[], float], flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    up = loss_fn()
    flat[i] = orig - h
    down = loss_fn()
    flat[i] = orig
    return (up - down) / (2.0 * h)


def numerical_gradient(loss_fn: Callable[[], float], param: Tensor, h: float = 1e-5,
                       indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``param`` at flat ``indices`` (all by default)."""
    flat = param.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    return np.array([_central(loss_fn, flat, i, h) for i in idx])


def straddles_kink(loss_fn: Callable[[], float], param: Tensor, i: int, h: float = 1e-5,
                   rtol: float = 1e-5, atol: float = 1e-8) -> bool:
    """True when the step-``h`` and step-``h/2`` central differences disagree.

    On a smooth function the two agree to O(h^2); a ReLU or max-pool switch
    inside the stencil makes them differ at first order.
    """
    flat = param.data.reshape(-1)
    full = _central(loss_fn, flat, i, h)
    half = _central(loss_fn, flat, i, h / 2)
    return abs(full - half) > rtol * max(abs(full), abs(half)) + atol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """``||a - n|| / max(||a|| + ||n||, floor)``.

    The floor keeps exactly-zero gradients (e.g. a bias every distance is
    invariant to) from turning finite-difference roundoff into error 1; at
    h = 1e-5 that roundoff is ~1e-10 per coordinate.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0, skip_kinks: bool = False,
                    skipped: dict[str, int] | None = None) -> dict[str, float]:
    """Relative error between backprop and finite differences for each named parameter.

    With ``max_entries`` only that many randomly chosen coordinates per
    parameter are probed. With ``skip_kinks`` coordinates whose stencil
    crosses a non-differentiable point are dropped (and, when sampling,
    replaced); per-parameter drop counts go into ``skipped``.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    rng = SplitMix64(seed)
    errors = {}
    scalar = lambda: float(loss_fn().data)  # noqa: E731
    for name, p in params.items():
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
        sampled = max_entries is not None and p.size > max_entries
        if sampled:
            pool = [rng.randbelow(p.size) for _ in range(4 * max_entries)]
            candidates = list(dict.fromkeys(pool))
        else:
            candidates = list(range(p.size))
        idx, dropped = [], 0
        with no_grad():
            for i in candidates:
                if sampled and len(idx) == max_entries:
                    break
                if skip_kinks and straddles_kink(scalar, p, i, h):
                    dropped += 1
                    continue
                idx.append(i)
            numeric = numerical_gradient(scalar, p, h, idx)
        if dropped:
            log.info("%s: skipped %d coordinates at kinks", name, dropped)
        if skipped is not None:
            skipped[name] = dropped
        errors[name] = relative_error(analytic[idx], numeric)
    return errors
