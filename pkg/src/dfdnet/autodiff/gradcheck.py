"""Central finite-difference gradient checks for 64-bit graphs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dfdnet.autodiff.tensor import Tensor, backward, default_dtype
from dfdnet.errors import ContractError


@dataclass
class GradCheckReport:
    """Per-element comparison of analytic and numeric gradients.

    ``unverifiable`` holds ``(input_index, flat_element)`` pairs where the
    one-sided differences disagree, i.e. the point sits on a kink or a tie.
    """

    max_rel_error: float = 0.0
    rel_errors: list[np.ndarray] = field(default_factory=list)
    unverifiable: list[tuple[int, int]] = field(default_factory=list)
    checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.unverifiable

    def passed(self, tolerance: float) -> bool:
        return self.ok and self.max_rel_error < tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6,
               elements: int | None = None, rng: np.random.Generator | None = None,
               kink_tol: float = 1e-3, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` maps 64-bit tensors to a tensor; a fixed random projection reduces
    non-scalar outputs to a scalar so the whole Jacobian is exercised. With
    ``elements`` set, only that many randomly chosen coordinates per input are
    probed. A coordinate whose forward and backward one-sided slopes differ by
    more than ``kink_tol`` (relative) is reported as unverifiable rather than
    compared.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    points = [np.array(a, dtype=np.float64) for a in inputs]
    with default_dtype(np.float64):
        tensors = [Tensor(p, requires_grad=True) for p in points]
        out = fn(*tensors)
        if out.dtype != np.float64:
            raise ContractError("grad_check requires a 64-bit graph")
        proj = rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)
        backward(out, proj)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        def scalar(idx: int, flat: int, delta: float) -> float:
            moved = [p.copy() for p in points]
            moved[idx].reshape(-1)[flat] += delta
            value = fn(*[Tensor(m) for m in moved]).data
            return float(np.sum(value * proj))

        report = GradCheckReport()
        base = float(np.sum(fn(*[Tensor(p) for p in points]).data * proj))
        for i, p in enumerate(points):
            coords = np.arange(p.size)
            if elements is not None and elements < p.size:
                coords = rng.choice(p.size, size=elements, replace=False)
            errs = np.zeros(len(coords))
            for j, flat in enumerate(coords):
                up, down = scalar(i, flat, eps), scalar(i, flat, -eps)
                fwd, bwd = (up - base) / eps, (base - down) / eps
                if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1e-2):
                    report.unverifiable.append((i, int(flat)))
                    continue
                numeric = (up - down) / (2 * eps)
                errs[j] = relative_error(analytic[i].reshape(-1)[flat], numeric, floor)
                report.checked += 1
            report.rel_errors.append(errs)
            if errs.size:
                report.max_rel_error = max(report.max_rel_error, float(errs.max()))
    return report


def min_pairwise_gap(x: np.ndarray) -> float:
    """Smallest distance between any two distinct elements (sorted-neighbour gap)."""
    v = np.sort(np.ravel(x))
    if v.size < 2:
        return np.inf
    return float(np.min(np.diff(v)))


def tie_free_point(shape, rng: np.random.Generator, eps: float = 1e-6, scale: float = 1.0) -> np.ndarray:
    """Random array whose elements are pairwise more than ``10*eps`` apart and away from 0."""
    while True:
        x = rng.standard_normal(shape) * scale
        if min_pairwise_gap(np.append(x.ravel(), 0.0)) > 10 * eps:
            return x
