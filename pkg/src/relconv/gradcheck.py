"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import KinkRecorder, Tensor, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    worst: tuple[int, int] | None  # (tensor position, flat coordinate)


def _relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def check_gradients(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    skip_kinks: bool = False,
    kink_radius: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    roundoff_factor: float = 4.0,
) -> GradCheckResult:
    """Compare ``backward()`` gradients of scalar ``f(*inputs)`` with central differences.

    Inputs are perturbed in place, so ``f`` may equally close over them
    (model parameters) and ignore its arguments. With ``skip_kinks`` a
    coordinate is skipped when moving it by ``kink_radius`` either way changes
    the branch pattern of a piecewise op (relu/max/sparsemax), i.e. when the
    point lies within ``kink_radius`` of a non-differentiable boundary.
    ``max_coords`` samples that many coordinates per tensor.

    The relative error uses the denominator ``max(|a|, |b|, 1e-8)``; a
    coordinate whose absolute disagreement is below the rounding error of
    the difference quotient (``roundoff_factor * eps * |f| / h``) counts as
    exact, so true zero gradients do not report spurious errors.
    """
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in tensors:
        if not t.requires_grad:
            raise ValueError("every checked tensor must require grad")
        t.zero_grad()

    with KinkRecorder() as rec:
        out = f(*tensors)
    base_signature = rec.signature()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [t.grad.copy() for t in tensors]

    def evaluate():
        with no_grad():
            return float(f(*tensors).data)

    def signature():
        with no_grad(), KinkRecorder() as r:
            f(*tensors)
        return r.signature()

    worst_err, worst, checked, skipped = 0.0, None, 0, 0
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
        for c in coords:
            v = flat[c]
            if skip_kinks:
                near_kink = False
                for delta in (kink_radius, -kink_radius):
                    flat[c] = v + delta
                    if signature() != base_signature:
                        near_kink = True
                        break
                flat[c] = v
                if near_kink:
                    skipped += 1
                    continue
            flat[c] = v + h
            fp = evaluate()
            flat[c] = v - h
            fm = evaluate()
            flat[c] = v
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[ti].reshape(-1)[c])
            # central differences cannot resolve below their own rounding error
            noise = roundoff_factor * np.finfo(np.float64).eps * max(abs(fp), abs(fm), 1.0) / h
            err = 0.0 if abs(a - numeric) <= noise else float(_relative_error(np.array(a), np.array(numeric)))
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (ti, int(c))
    return GradCheckResult(worst_err, checked, skipped, worst)


def grad_check(f, inputs, h: float = 1e-5, **kwargs) -> float:
    """Maximum relative error between tape and finite-difference gradients."""
    return check_gradients(f, inputs, h=h, **kwargs).max_rel_error
