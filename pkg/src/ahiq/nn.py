"""Parameterized layers on top of the tensor engine.

Modules register parameters (trained) and buffers (serialized but not
trained); ``state()`` flattens both into the dotted-name map the checkpoint
format stores.  Weight layouts follow the (out, in) convention so externally
converted weights drop in without reshuffling.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: Tensor) -> None:
        value.requires_grad = False
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name, p in self.named_parameters(prefix):
            out[name] = p
        for name, b in self.named_buffers(prefix):
            out[name] = b
        return out

    def load_state(self, values: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy arrays into matching parameters/buffers; reject mismatches.

        Every entry in ``values`` must name an existing tensor of identical
        shape; the error lists all offending names at once.
        """
        state = self.state(prefix)
        missing = [k for k in values if k not in state]
        bad_shape = [
            f"{k} (checkpoint {tuple(np.shape(values[k]))} vs model {state[k].shape})"
            for k in values
            if k in state and tuple(np.shape(values[k])) != state[k].shape
        ]
        if missing or bad_shape:
            parts = []
            if missing:
                parts.append("unknown tensors: " + ", ".join(sorted(missing)))
            if bad_shape:
                parts.append("shape mismatches: " + ", ".join(sorted(bad_shape)))
            raise ValueError("state load rejected; " + "; ".join(parts))
        for k, arr in values.items():
            state[k].data = np.asarray(arr, dtype=state[k].dtype).reshape(state[k].shape).copy()

    def train(self) -> "Module":
        object.__setattr__(self, "training", True)
        for m in self._modules.values():
            m.train()
        return self

    def eval(self) -> "Module":
        object.__setattr__(self, "training", False)
        for m in self._modules.values():
            m.eval()
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._list = list(modules)
        for i, m in enumerate(self._list):
            self._modules[str(i)] = m

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    data = rng.standard_normal(shape) * std
    data = np.clip(data, -2 * std, 2 * std)
    return Tensor(data.astype(np.float32), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = _uniform(rng, (out_features, in_features), bound)
        self.bias = _uniform(rng, (out_features,), bound) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, T.transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        return y


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        bound = 1.0 / np.sqrt(in_ch * kernel * kernel)
        self.weight = _uniform(rng, (out_ch, in_ch, kernel, kernel), bound)
        self.bias = _uniform(rng, (out_ch,), bound) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-6):
        super().__init__()
        self.features = features
        self.eps = eps
        self.weight = Tensor(np.ones(features, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(features, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.features, self.eps) * self.weight + self.bias


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics.

    Training mode normalizes by batch statistics (gradients flow through
    them); running buffers are updated with the unbiased variance outside the
    tape.  Eval mode normalizes by the stored running statistics.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.register_buffer("running_mean", Tensor(np.zeros(channels, dtype=np.float32)))
        self.register_buffer("running_var", Tensor(np.ones(channels, dtype=np.float32)))

    def __call__(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        if self.training:
            mu = T.mean(x, axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = T.mean(centered * centered, axis=(0, 2, 3), keepdims=True)
            xhat = centered / T.sqrt(var + float(self.eps))
            n = x.size // c
            with T.no_grad():
                unbiased = var.data.reshape(c) * (n / max(n - 1, 1))
                m = self.momentum
                self.running_mean.data = (
                    (1 - m) * self.running_mean.data + m * mu.data.reshape(c)
                ).astype(self.running_mean.dtype)
                self.running_var.data = (
                    (1 - m) * self.running_var.data + m * unbiased
                ).astype(self.running_var.dtype)
        else:
            shape = (1, c, 1, 1)
            mu = T.reshape(self.running_mean, shape)
            std = T.sqrt(T.reshape(self.running_var, shape) + float(self.eps))
            xhat = (x - mu) / std
        w = T.reshape(self.weight, (1, c, 1, 1))
        b = T.reshape(self.bias, (1, c, 1, 1))
        return xhat * w + b


class MaxPool2d(Module):
    def __init__(self, kernel: int, stride: int, padding: int = 0):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.maxpool2d(x, self.kernel, self.stride, self.padding)
