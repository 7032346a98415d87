"""Asymmetric convolution blocks, interactive adapters and the dual-branch network."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from dfdnet.autodiff import Tensor, add, concat, conv2d, depthwise_filter, index, pad2d, relu, sub
from dfdnet.dcmf import CMFBank, SEBlock, dcmf_forward, hilo, liho
from dfdnet.errors import ContractError, DimensionError
from dfdnet.image import LOWPASS_SIGMA, LOWPASS_SIZE, gaussian_taps
from dfdnet.nn import BatchNorm2d, Conv2d, Module, he_uniform, parameter

ABLATIONS = ("full", "BL", "DBL", "DBL+I")


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 4
    width: int = 16
    acb_k: int = 3
    cmf_k: int = 5
    ablation: str = "full"
    input_channels: int = 3
    share_adapter_rounds: bool = False
    input_skip: bool = True

    def __post_init__(self):
        if self.stages < 1:
            raise ContractError(f"stages must be >= 1, got {self.stages}")
        if self.width < 4:
            raise ContractError(f"width must be >= 4, got {self.width}")
        for name in ("acb_k", "cmf_k"):
            v = getattr(self, name)
            if v < 1 or v % 2 == 0:
                raise ContractError(f"{name} must be odd and positive, got {v}")
        if self.ablation not in ABLATIONS:
            raise ContractError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    @property
    def dual(self) -> bool:
        return self.ablation != "BL"

    @property
    def interactive(self) -> bool:
        return self.ablation in ("full", "DBL+I")

    @property
    def exchange(self) -> bool:
        return self.ablation == "full"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(kinds)
        if unknown:
            raise ContractError(f"unknown ModelConfig fields: {sorted(unknown)}")
        out = {}
        for k, v in d.items():
            default = getattr(cls, k)
            if isinstance(default, bool):
                out[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                out[k] = int(v)
            else:
                out[k] = str(v)
        return cls(**out)


# -- asymmetric convolution ------------------------------------------------------

class ACB(Module):
    """Parallel kxk, 1xk and kx1 kernels sharing one output bias."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int = 3):
        self.k = k
        self.square = parameter(he_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.hor = parameter(he_uniform(rng, (cout, cin, 1, k), cin * k))
        self.ver = parameter(he_uniform(rng, (cout, cin, k, 1), cin * k))
        self.bias = parameter(np.zeros(cout))

    def fused_kernel(self) -> Tensor:
        return fuse_acb_kernel(self.square, self.hor, self.ver)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.fused_kernel(), self.bias, padding="same")


def fuse_acb_kernel(square: Tensor, hor: Tensor, ver: Tensor) -> Tensor:
    """Single kxk kernel equivalent to the three ACB branches (zero-padded into the kxk frame)."""
    k = square.shape[-1]
    return add(add(square, pad2d(hor, k // 2, 0)), pad2d(ver, 0, k // 2))


def acb_forward(x: Tensor, params: ACB) -> Tensor:
    """Sum of the three parallel convolutions (zero padding, stride 1) plus the bias."""
    if not (params.square.shape[:2] == params.hor.shape[:2] == params.ver.shape[:2]):
        raise DimensionError("acb_forward", "the three kernels disagree on channel counts (axes 0/1)")
    out = conv2d(x, params.square, padding="same")
    out = add(out, conv2d(x, params.hor, padding="same"))
    out = add(out, conv2d(x, params.ver, params.bias, padding="same"))
    return out


# -- interactive adapter -----------------------------------------------------------

class AdapterRound(Module):
    """One evaluation of the interactive function for both branches."""

    def __init__(self, rng: np.random.Generator, width: int, k: int, cross: bool):
        self.psi_d1 = ACB(rng, width, width, k)
        self.psi_s1 = ACB(rng, width, width, k)
        self.cross = cross
        if cross:
            self.psi_d2 = ACB(rng, width, width, k)
            self.psi_s2 = ACB(rng, width, width, k)
        self.bn_d = BatchNorm2d(width)
        self.bn_s = BatchNorm2d(width)

    def __call__(self, z_d: Tensor, z_s: Tensor, exchange: bool = True) -> tuple[Tensor, Tensor]:
        f = z_d.shape[1]
        if self.cross and exchange:
            # psi_d1 and psi_d2 both read z_d, so they run as one conv with stacked outputs
            out_d = conv2d(z_d, concat([self.psi_d1.fused_kernel(), self.psi_d2.fused_kernel()]),
                           concat([self.psi_d1.bias, self.psi_d2.bias]), padding="same")
            out_s = conv2d(z_s, concat([self.psi_s1.fused_kernel(), self.psi_s2.fused_kernel()]),
                           concat([self.psi_s1.bias, self.psi_s2.bias]), padding="same")
            pre_d = add(index(out_d, np.s_[:, :f]), index(out_s, np.s_[:, f:]))
            pre_s = add(index(out_s, np.s_[:, :f]), index(out_d, np.s_[:, f:]))
        else:
            pre_d, pre_s = self.psi_d1(z_d), self.psi_s1(z_s)
        return relu(self.bn_d(pre_d)), relu(self.bn_s(pre_s))


class InteractiveAdapter(Module):
    def __init__(self, rng: np.random.Generator, width: int, k: int = 3, cross: bool = True,
                 shared: bool = False):
        self.shared = shared
        self.rounds = [AdapterRound(rng, width, k, cross) for _ in range(1 if shared else 2)]


def adapter_forward(z_d: Tensor, z_s: Tensor, params: InteractiveAdapter,
                    exchange: bool = True) -> tuple[Tensor, Tensor]:
    """Two rounds of ``z_d' = relu(BN(psi_d1(z_d) + psi_s2(z_s)))`` and its mirror."""
    if z_d.shape != z_s.shape:
        raise DimensionError("adapter_forward", f"branch shapes {z_d.shape} and {z_s.shape} differ")
    rounds = params.rounds * 2 if params.shared else params.rounds
    for r in rounds:
        z_d, z_s = r(z_d, z_s, exchange)
    return z_d, z_s


# -- network --------------------------------------------------------------------------

class Stage(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        if cfg.exchange:
            self.hilo_bank = CMFBank(rng, cfg.width, cfg.cmf_k)
            self.hilo_se = SEBlock(rng, cfg.width)
            self.liho_bank = CMFBank(rng, cfg.width, cfg.cmf_k)
        self.adapter = InteractiveAdapter(rng, cfg.width, cfg.acb_k, cross=cfg.interactive,
                                          shared=cfg.share_adapter_rounds)


class ResBlock(Module):
    def __init__(self, rng: np.random.Generator, width: int, k: int):
        self.conv1 = Conv2d(rng, width, width, k)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(rng, width, width, k)
        self.bn2 = BatchNorm2d(width)

    def __call__(self, z: Tensor) -> Tensor:
        y = self.bn2(self.conv2(relu(self.bn1(self.conv1(z)))))
        return relu(add(z, y))


class DerainNet(Module):
    """Detail branch f and structure branch g; the prediction is f(I) + g(I).

    With ``input_skip`` each branch adds its band of the input image (the
    high-pass residual to f, the low-pass to g), so the learned tails predict
    corrections rather than the image itself.

    The ``BL`` ablation is a single residual branch with a global skip; its
    output is reported as (residual, input) so the sum is still the prediction.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.config = cfg
        rng = np.random.default_rng(seed)
        c, f = cfg.input_channels, cfg.width
        if cfg.dual:
            self.head_d = Conv2d(rng, c, f, 3)
            self.head_s = Conv2d(rng, c, f, 3)
            self.stages = [Stage(rng, cfg) for _ in range(cfg.stages)]
            self.tail_d = Conv2d(rng, f, c, 3)
            self.tail_s = Conv2d(rng, f, c, 3)
        else:
            self.head = Conv2d(rng, c, f, 3)
            self.blocks = [ResBlock(rng, f, cfg.acb_k) for _ in range(cfg.stages)]
            self.tail = Conv2d(rng, f, c, 3)

    def __call__(self, image: Tensor, exchange: bool = True, features: list | None = None):
        return model_forward(self, image, exchange=exchange, features=features)


def model_forward(model: DerainNet, image: Tensor, exchange: bool = True,
                  features: list | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Run the network on an NCHW batch; returns (detail, structure, prediction).

    ``exchange=False`` zero-masks every cross-branch path (HILO/LIHO and the
    adapters' cross terms). When ``features`` is a list, the per-stage branch
    features are appended to it as ``(z_d, z_s)`` pairs.
    """
    cfg = model.config
    if image.ndim != 4 or image.shape[1] != cfg.input_channels:
        raise DimensionError("model_forward", f"expected N x {cfg.input_channels} x H x W, got {image.shape}")
    h, w = image.shape[2:]
    if min(h, w) < max(cfg.cmf_k, 11):
        raise ContractError(f"model_forward: input {h}x{w} smaller than {max(cfg.cmf_k, 11)}")
    if not cfg.dual:
        z = model.head(image)
        for block in model.blocks:
            z = block(z)
            if features is not None:
                features.append((z, None))
        residual = model.tail(z)
        return residual, image, add(residual, image)

    z_d, z_s = model.head_d(image), model.head_s(image)
    for stage in model.stages:
        if cfg.exchange and exchange:
            low_d = dcmf_forward(z_d, stage.hilo_bank)
            low_s = dcmf_forward(z_s, stage.liho_bank)
            z_d_next, low_out = hilo(z_d, sub(z_s, low_s), stage.hilo_bank, stage.hilo_se, low=low_d)
            z_s, _ = liho(z_s, low_out, stage.liho_bank, low=low_s)
            z_d = z_d_next
        z_d, z_s = adapter_forward(z_d, z_s, stage.adapter, exchange=exchange)
        if features is not None:
            features.append((z_d, z_s))
    detail, structure = model.tail_d(z_d), model.tail_s(z_s)
    if cfg.input_skip:
        smooth = image_lowpass(image)
        detail = add(detail, sub(image, smooth))
        structure = add(structure, smooth)
    return detail, structure, add(detail, structure)


def image_lowpass(image: Tensor) -> Tensor:
    """The label-decomposition Gaussian low-pass, as a differentiable op."""
    r = LOWPASS_SIZE // 2
    return depthwise_filter(pad2d(image, r, r, "reflect"), gaussian_taps(LOWPASS_SIZE, LOWPASS_SIGMA))


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars for ``cfg``."""
    c, f, k = cfg.input_channels, cfg.width, cfg.acb_k
    conv = lambda cin, cout, kk: cout * cin * kk * kk + cout  # noqa: E731
    bn = 2 * f
    if not cfg.dual:
        per_block = 2 * conv(f, f, k) + 2 * bn
        return conv(c, f, 3) + cfg.stages * per_block + conv(f, c, 3)
    acb = f * f * (k * k + 2 * k) + f
    per_round = (4 if cfg.interactive else 2) * acb + 2 * bn
    per_stage = per_round * (1 if cfg.share_adapter_rounds else 2)
    if cfg.exchange:
        hid = max(f // 4, 1)
        attention = (f * hid + hid) + 3 * (hid * f + f)
        se_hid = max(f // 16, 4)
        se = (f * se_hid + se_hid) + (se_hid * f + f)
        per_stage += 2 * attention + se
    return 2 * conv(c, f, 3) + cfg.stages * per_stage + 2 * conv(f, c, 3)
