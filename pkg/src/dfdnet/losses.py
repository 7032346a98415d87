"""Decomposed-label training losses and the PSNR/SSIM evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dfdnet.autodiff import Tensor, add, as_tensor, default_dtype, depthwise_filter, div, mul, no_grad, reduce, scale, sub
from dfdnet.errors import ContractError, DimensionError
from dfdnet.image import gaussian_taps

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    detail: float = 1.0
    structure: float = 1.0
    reconstruction: float = 1.0

    def __post_init__(self):
        if min(self.detail, self.structure, self.reconstruction) < 0:
            raise ContractError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossTerms:
    detail: Tensor
    structure: Tensor
    reconstruction: Tensor
    total: Tensor


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, f"prediction shape {a.shape} differs from target {b.shape}")


def detail_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error between predicted and target detail maps."""
    target = as_tensor(target, like=pred)
    _same_shape("detail_loss", pred, target)
    return reduce(sub(pred, target), "mean_abs")


def structure_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error between predicted and target structure maps."""
    target = as_tensor(target, like=pred)
    _same_shape("structure_loss", pred, target)
    return reduce(sub(pred, target), "mean_sq")


def ssim(x: Tensor, y, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    """Mean structural similarity over all valid 11x11 Gaussian windows, channels and images."""
    y = as_tensor(y, like=x)
    _same_shape("ssim", x, y)
    h, w = x.shape[-2:]
    if h < window or w < window:
        raise ContractError(f"ssim: image {h}x{w} is smaller than the {window}x{window} window")
    taps = gaussian_taps(window, sigma)
    blur = lambda t: depthwise_filter(t, taps)  # noqa: E731
    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = mul(mu_x, mu_x), mul(mu_y, mu_y), mul(mu_x, mu_y)
    var_x = sub(blur(mul(x, x)), mu_xx)
    var_y = sub(blur(mul(y, y)), mu_yy)
    cov = sub(blur(mul(x, y)), mu_xy)
    num = mul(add(scale(mu_xy, 2.0), c1), add(scale(cov, 2.0), c2))
    den = mul(add(add(mu_xx, mu_yy), c1), add(add(var_x, var_y), c2))
    return reduce(div(num, den), "mean")


def reconstruction_loss(pred: Tensor, target) -> Tensor:
    """L1 distance plus (1 - SSIM)."""
    target = as_tensor(target, like=pred)
    _same_shape("reconstruction_loss", pred, target)
    l1 = reduce(sub(pred, target), "mean_abs")
    return add(l1, sub(1.0, ssim(pred, target)))


def composite_loss(detail: Tensor, structure: Tensor, prediction: Tensor, clean, detail_target,
                   structure_target, weights: LossWeights = LossWeights(),
                   return_terms: bool = False):
    """Weighted sum of the detail, structure and reconstruction losses."""
    ld = detail_loss(detail, detail_target)
    ls = structure_loss(structure, structure_target)
    lr = reconstruction_loss(prediction, clean)
    total = add(add(scale(ld, weights.detail), scale(ls, weights.structure)), scale(lr, weights.reconstruction))
    if return_terms:
        return LossTerms(ld, ls, lr, total)
    return total


def psnr(x, y, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``math.inf``."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError("psnr", f"shapes {x.shape} and {y.shape} differ")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def ssim_value(x, y) -> float:
    """Evaluation SSIM (same definition as the loss) as a python float, in 64-bit."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    with no_grad(), default_dtype(np.float64):
        return float(ssim(Tensor(x), Tensor(y)).data)
