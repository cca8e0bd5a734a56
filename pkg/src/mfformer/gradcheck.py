"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .nn import track_regions
from .tensor import Tensor, relative_error


@dataclass
class GradcheckResult:
    max_error: float
    n_checked: int
    n_skipped: int = 0


def gradcheck_report(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-7,
    skip_kinks: bool = False,
    richardson: bool = False,
) -> GradcheckResult:
    """Compare tape gradients of the scalar ``fn()`` with central differences.

    With ``skip_kinks`` an entry is left out when ``x + eps`` and ``x - eps``
    land in different LeakyReLU / max-pool regions, where the difference
    quotient is not an estimate of the derivative.  ``richardson`` combines
    steps ``eps`` and ``eps/2`` as ``(4 D(eps/2) - D(eps)) / 3``, cancelling
    the O(eps^2) truncation term.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    rng = rng if rng is not None else np.random.default_rng(0)

    def evaluate():
        if not skip_kinks:
            return fn().item(), None
        with track_regions() as log:
            value = fn().item()
        return value, list(log)

    worst, checked, skipped = 0.0, 0, 0
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            picks = np.arange(flat.size)
        else:
            picks = rng.choice(flat.size, size=max_entries, replace=False)
        for i in picks:
            quotients, regions = [], []
            for h in ((eps, eps / 2) if richardson else (eps,)):
                old = flat[i]
                flat[i] = old + h
                fp, rp = evaluate()
                flat[i] = old - h
                fm, rm = evaluate()
                flat[i] = old
                quotients.append((fp - fm) / (2.0 * h))
                regions += [rp, rm]
            if skip_kinks and any(r != regions[0] for r in regions):
                skipped += 1
                continue
            num = (4.0 * quotients[1] - quotients[0]) / 3.0 if richardson else quotients[0]
            worst = max(worst, relative_error(g.reshape(-1)[i], num, floor=floor))
            checked += 1
    return GradcheckResult(worst, checked, skipped)


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], **kwargs) -> float:
    """Max relative error between tape gradients and central differences."""
    return gradcheck_report(fn, tensors, **kwargs).max_error
