"""Directional cross-median filtering and the HILO/LIHO frequency exchange.

A cross-median filter (CMF) is two 1D median pools along perpendicular lines.
Three CMFs with different orientations are fused by a per-channel softmax
attention to give the low-frequency part of a feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dfdnet.autodiff import (
    Tensor,
    add,
    concat,
    fully_connected,
    global_avg_pool,
    make_result,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax_groups,
    sub,
)
from dfdnet.autodiff.ops import _fold_axis, _pad_index
from dfdnet.errors import ContractError, DimensionError
from dfdnet.nn import Linear, Module

Offsets = tuple[tuple[int, int], ...]


def line_offsets(k: int, dy: int, dx: int) -> Offsets:
    """``k`` integer steps ``t * (dy, dx)`` for ``t`` in ``-k//2 .. k//2``."""
    if k % 2 == 0 or k < 1:
        raise ContractError(f"line length must be odd and positive, got {k}")
    r = k // 2
    return tuple((t * dy, t * dx) for t in range(-r, r + 1))


@dataclass(frozen=True)
class DirectionSpec:
    first_pass: Offsets
    second_pass: Offsets
    label: str

    @property
    def k(self) -> int:
        return len(self.first_pass)


def direction_specs(k: int = 5) -> tuple[DirectionSpec, DirectionSpec, DirectionSpec]:
    """The three orientations: vertical-then-horizontal, 45-then-135 degrees, horizontal-then-vertical."""
    vertical, horizontal = line_offsets(k, 1, 0), line_offsets(k, 0, 1)
    diag45, diag135 = line_offsets(k, -1, 1), line_offsets(k, 1, 1)
    return (
        DirectionSpec(vertical, horizontal, "axis-VH"),
        DirectionSpec(diag45, diag135, "diag-45-135"),
        DirectionSpec(horizontal, vertical, "axis-HV"),
    )


def _median_select(samples: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Element-wise median of ``k`` equally shaped arrays, plus the lowest index holding it."""
    k = len(samples)
    if k <= 9:
        # odd-even transposition network; k passes fully sort k values
        a = list(samples)
        for p in range(k):
            for i in range(p % 2, k - 1, 2):
                a[i], a[i + 1] = np.minimum(a[i], a[i + 1]), np.maximum(a[i], a[i + 1])
        med = a[k // 2]
    else:
        med = np.partition(np.stack(samples, axis=-1), k // 2, axis=-1)[..., k // 2]
    idx = np.zeros(med.shape, dtype=np.int16)
    for j in range(k - 1, -1, -1):
        idx[samples[j] == med] = j
    return np.ascontiguousarray(med), idx


def median_pool_line(x: Tensor, offsets: Offsets) -> Tensor:
    """Median of the ``k`` samples ``x[i + dy, j + dx]`` for each pixel (replicate borders).

    The backward pass routes each output's gradient to the single selected
    sample; among equal values the lowest sample index wins.
    """
    k = len(offsets)
    if k % 2 == 0:
        raise ContractError(f"median_pool_line: k must be odd, got {k}")
    if x.ndim != 4:
        raise DimensionError("median_pool_line", f"input must be NCHW, got rank {x.ndim}")
    h, w = x.shape[2:]
    ph = max(abs(dy) for dy, _ in offsets)
    pw = max(abs(dx) for _, dx in offsets)
    xp = x.data[:, :, _pad_index(h, ph, "replicate"), :][:, :, :, _pad_index(w, pw, "replicate")]
    windows = [np.s_[:, :, ph + dy:ph + dy + h, pw + dx:pw + dx + w] for dy, dx in offsets]
    samples = [xp[s] for s in windows]
    med, idx = _median_select(samples)
    padded_shape, dtype = xp.shape, x.dtype

    def vjp(g):
        gp = np.zeros(padded_shape, dtype=dtype)
        for j, s in enumerate(windows):
            gp[s] += np.where(idx == j, g, 0)
        gp = _fold_axis(gp, 2, h, ph, "replicate")
        return (_fold_axis(gp, 3, w, pw, "replicate"),)

    return make_result(med, "median_line", (x,), vjp, selected=idx, offsets=offsets)


def cmf(x: Tensor, spec: DirectionSpec) -> Tensor:
    """Cross-median filter: a line median followed by its perpendicular counterpart."""
    return median_pool_line(median_pool_line(x, spec.first_pass), spec.second_pass)


class SEBlock(Module):
    """Squeeze-and-excitation gate; bottleneck width is max(C // 16, 4)."""

    def __init__(self, rng: np.random.Generator, channels: int):
        hidden = max(channels // 16, 4)
        self.fc1 = Linear(rng, channels, hidden)
        self.fc2 = Linear(rng, hidden, channels)


def se_gate(x: Tensor, params: SEBlock) -> Tensor:
    n, c = x.shape[:2]
    s = reshape(global_avg_pool(x), (n, c))
    return sigmoid(params.fc2(relu(params.fc1(s))))


def se_block(x: Tensor, params: SEBlock) -> Tensor:
    n, c = x.shape[:2]
    return mul(x, reshape(se_gate(x, params), (n, c, 1, 1)))


class DirectionAttention(Module):
    """Reduce FC (ratio 4) shared by three per-direction head FCs."""

    def __init__(self, rng: np.random.Generator, channels: int, groups: int = 3):
        hidden = max(channels // 4, 1)
        self.reduce = Linear(rng, channels, hidden)
        self.heads = [Linear(rng, hidden, channels) for _ in range(groups)]


def direction_weights(ys: list[Tensor], params: DirectionAttention) -> Tensor:
    """Per-channel softmax weights over the direction groups, shape (N, G, C)."""
    n, c = ys[0].shape[:2]
    total = ys[0]
    for y in ys[1:]:
        total = add(total, y)
    z = relu(params.reduce(reshape(global_avg_pool(total), (n, c))))
    logits = concat([reshape(head(z), (n, 1, c)) for head in params.heads], axis=1)
    return softmax_groups(logits, axis=1)


def direction_attention(y1: Tensor, y2: Tensor, y3: Tensor, params: DirectionAttention) -> Tensor:
    """Attention-weighted sum of the three filtered groups.

    Written as ``y1 + w2 (y2 - y1) + w3 (y3 - y1)``, which equals
    ``sum(w_i y_i)`` because the weights sum to one, and returns a shared value
    exactly when all groups agree (so constants pass through unchanged).
    """
    for y in (y2, y3):
        if y.shape != y1.shape:
            raise DimensionError("direction_attention", f"group shapes {y1.shape} and {y.shape} differ")
    n, c = y1.shape[:2]
    w = direction_weights([y1, y2, y3], params)
    w2 = reshape(w[:, 1, :], (n, c, 1, 1))
    w3 = reshape(w[:, 2, :], (n, c, 1, 1))
    return add(add(y1, mul(w2, sub(y2, y1))), mul(w3, sub(y3, y1)))


class CMFBank(Module):
    """Three oriented CMFs plus the attention that fuses them."""

    def __init__(self, rng: np.random.Generator, channels: int, k: int = 5):
        self.k = k
        self.specs = direction_specs(k)
        self.attention = DirectionAttention(rng, channels, len(self.specs))


def dcmf_forward(x: Tensor, bank: CMFBank) -> Tensor:
    y1, y2, y3 = (cmf(x, spec) for spec in bank.specs)
    return direction_attention(y1, y2, y3, bank.attention)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        axes = [i for i, (m, n) in enumerate(zip(a.shape, b.shape)) if m != n]
        raise DimensionError(op, f"shapes {a.shape} and {b.shape} differ on axes {axes}")


def hilo(z_d: Tensor, high_in: Tensor, bank: CMFBank, se: SEBlock,
         low: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """High In Low Out: peel the dCMF low frequency off the detail branch.

    Returns ``(z_d - low + high_in, se_block(low))``. ``low`` may be supplied
    when it was already computed from ``z_d``.
    """
    _check_same("hilo", z_d, high_in)
    if low is None:
        low = dcmf_forward(z_d, bank)
    return add(sub(z_d, low), high_in), se_block(low, se)


def liho(z_s: Tensor, low_in: Tensor, bank: CMFBank, low: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Low In High Out: keep the structure branch's low frequency, send its residual across.

    Returns ``(low + low_in, z_s - low)``.
    """
    _check_same("liho", z_s, low_in)
    if low is None:
        low = dcmf_forward(z_s, bank)
    return add(low, low_in), sub(z_s, low)
