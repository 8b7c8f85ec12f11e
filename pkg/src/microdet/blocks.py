"""Reusable network blocks: conv-norm-act, CSP bottlenecks, SPP and attention."""

from __future__ import annotations

import math

import numpy as np

from microdet import tensor as T
from microdet.tensor import Tensor


class Module:
    """Minimal container of parameters, buffers and sub-modules.

    Sub-modules are discovered by attribute scan (plain attributes and
    lists of modules), so blocks compose without registration boilerplate.
    """

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        """All parameters and buffers, in deterministic attribute order."""
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[prefix + name] = value
        for name, child in self._children():
            out.update(child.named_tensors(prefix + name + "."))
        return out

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors(prefix).items() if v.requires_grad}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, flag: bool = True) -> "Module":
        self.training = flag
        for _, child in self._children():
            child.train(flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into this module's tensors; shapes must match."""
        own = self.named_tensors()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_tensors().items()}


def kaiming_conv(rng: np.random.Generator, k_out: int, c_in: int, kh: int, kw: int) -> Tensor:
    fan_in = c_in * kh * kw
    bound = math.sqrt(2.0 / fan_in)
    w = rng.standard_normal((k_out, c_in, kh, kw)) * bound
    return Tensor(w.astype(np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 1, stride: int = 1,
                 bias: bool = True, bias_init: float = 0.0):
        super().__init__()
        self.stride = stride
        self.pad = k // 2
        self.weight = kaiming_conv(rng, c_out, c_in, k, k)
        self.bias = (Tensor(np.full(c_out, bias_init, dtype=np.float32), requires_grad=True)
                     if bias else None)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=np.float32))
        self.running_var = Tensor(np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta,
                            self.running_mean.data, self.running_var.data,
                            momentum=self.momentum, eps=self.eps,
                            training=self.training)


class ConvBNAct(Module):
    """3x3/1x1 convolution, batch norm, SiLU."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 act: bool = True):
        super().__init__()
        self.conv = Conv2d(rng, c_in, c_out, k, stride, bias=False)
        self.bn = BatchNorm2d(c_out)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn(self.conv(x))
        return out.silu() if self.act else out


class Bottleneck(Module):
    def __init__(self, rng, channels: int, shortcut: bool = True):
        super().__init__()
        self.cv1 = ConvBNAct(rng, channels, channels, k=1)
        self.cv2 = ConvBNAct(rng, channels, channels, k=3)
        self.shortcut = shortcut

    def forward(self, x: Tensor) -> Tensor:
        out = self.cv2(self.cv1(x))
        return out + x if self.shortcut else out


class C3(Module):
    """Cross-stage-partial block: split, residual bottlenecks, merge."""

    def __init__(self, rng, c_in: int, c_out: int, n: int = 1, shortcut: bool = True):
        super().__init__()
        if c_out % 2 != 0:
            raise ValueError(f"C3 output channels must be even, got {c_out}")
        hidden = c_out // 2
        self.cv1 = ConvBNAct(rng, c_in, hidden, k=1)
        self.cv2 = ConvBNAct(rng, c_in, hidden, k=1)
        self.blocks = [Bottleneck(rng, hidden, shortcut) for _ in range(n)]
        self.cv3 = ConvBNAct(rng, 2 * hidden, c_out, k=1)

    def forward(self, x: Tensor) -> Tensor:
        a = self.cv1(x)
        for block in self.blocks:
            a = block(a)
        b = self.cv2(x)
        return self.cv3(T.concat([a, b], axis=1))


class SPPLite(Module):
    """Cheap spatial pyramid pooling: two cascaded 5x5 max pools."""

    def __init__(self, rng, c_in: int, c_out: int):
        super().__init__()
        hidden = max(2, c_in // 2)
        self.cv1 = ConvBNAct(rng, c_in, hidden, k=1)
        self.cv2 = ConvBNAct(rng, 3 * hidden, c_out, k=1)

    def forward(self, x: Tensor) -> Tensor:
        a = self.cv1(x)
        p1 = T.max_pool2d(a, 5, 1, pad=2)
        p2 = T.max_pool2d(p1, 5, 1, pad=2)
        return self.cv2(T.concat([a, p1, p2], axis=1))


class DualAttention(Module):
    """Channel gate times spatial gate, both in (0, 1), applied elementwise.

    The channel branch maps the global-average-pooled feature vector
    through a single CxC linear layer and a sigmoid; the spatial branch
    runs a 7x7 convolution over the channel-wise [avg; max] pooled map.
    The input is multiplied by the resulting attention map, so the output
    magnitude never exceeds the input's.
    """

    def __init__(self, rng, channels: int):
        super().__init__()
        scale = 1.0 / math.sqrt(channels)
        self.channel_weights = Tensor(
            (rng.standard_normal((channels, channels)) * scale).astype(np.float32),
            requires_grad=True)
        self.spatial_kernel = kaiming_conv(rng, 1, 2, 7, 7)

    def attention_map(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if self.channel_weights.shape[0] != c:
            raise T.ShapeError(
                f"dual_attention: {c} input channels vs weights for "
                f"{self.channel_weights.shape[0]}")
        gap = T.global_avg_pool(x).reshape(n, c)
        chan = T.matmul(gap, self.channel_weights.transpose2d()).sigmoid()
        chan = T.expand(chan.reshape(n, c, 1, 1), (n, c, h, w))
        pooled = T.concat([x.mean(axis=1, keepdims=True),
                           x.max(axis=1, keepdims=True)], axis=1)
        sp = T.conv2d(pooled, self.spatial_kernel, stride=1, pad=3).sigmoid()
        sp = T.expand(sp, (n, c, h, w))
        return chan * sp

    def forward(self, x: Tensor) -> Tensor:
        return x * self.attention_map(x)
