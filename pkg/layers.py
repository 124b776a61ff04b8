"""
Parameter containers and the dense layers built on the tensor engine.
"""

from collections import OrderedDict
from typing import Dict, Iterator, List, Tuple

import numpy as np

from tensor import Tensor, add, conv2d, matmul, reshape


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype=np.float32) -> Tensor:
    """He-scaled normal initialisation for ReLU networks."""
    data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def zeros(shape: Tuple[int, ...], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Module:
    """Base class: parameters are discovered from attributes in assignment order."""

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        seen = set()
        for name, param in self._walk(prefix):
            if id(param) in seen:
                continue
            seen.add(id(param))
            yield name, param

    def _walk(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith('_'):
                continue
            full = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value._walk(full + '.')
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{full}.{index}.")

    def parameters(self) -> List[Tensor]:
        return [param for _, param in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, param.data) for name, param in self.named_parameters())

    def num_parameters(self) -> int:
        return int(sum(param.data.size for param in self.parameters()))

    def zero_grad(self):
        for param in self.parameters():
            param.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    """y = x·W + b with W of shape in×out."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        limit = np.sqrt(1.0 / in_features)
        self.weight = Tensor(rng.uniform(-limit, limit, size=(in_features, out_features)).astype(dtype),
                             requires_grad=True)
        self.bias = zeros((out_features,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = add(out, self.bias)
        return out


class Conv2d(Module):
    """Plain 2-d cross-correlation layer with 'same' padding for odd kernels."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype)
        self.bias = zeros((out_channels,), dtype) if bias else None
        self.pad = kernel_size // 2

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, stride=1, pad=self.pad)
        if self.bias is not None:
            out = add(out, reshape(self.bias, (1, -1, 1, 1)))
        return out
