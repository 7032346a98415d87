"""Parameter containers and the layers the network is assembled from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from dfdnet.autodiff import Tensor, batch_norm, conv2d, fully_connected, get_default_dtype


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


class Module:
    """Holds parameters (tensors with ``requires_grad``), buffers and sub-modules.

    Registration order is attribute assignment order, which makes the
    parameter registry, and therefore checkpoints, deterministic.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if name.startswith("buf_") and isinstance(value, np.ndarray):
                yield prefix + name[4:], value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, kernel: int | tuple[int, int],
                 bias: bool = True):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.weight = parameter(he_uniform(rng, (cout, cin, kh, kw), cin * kh * kw))
        self.bias = parameter(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding="same")


class Linear(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int):
        self.weight = parameter(he_uniform(rng, (cout, cin), cin))
        self.bias = parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.buf_running_mean = np.zeros(channels, dtype=get_default_dtype())
        self.buf_running_var = np.ones(channels, dtype=get_default_dtype())
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.buf_running_mean, self.buf_running_var,
                          self.training, self.momentum, self.eps)
