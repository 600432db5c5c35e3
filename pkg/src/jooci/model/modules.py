"""Neural building blocks on top of the autodiff core.

``Module`` tracks parameters, buffers and children by attribute assignment,
yielding stable dotted names (``content.blocks.3.attn.wq``) in registration
order; those names are the checkpoint contract.  Construction threads an
:class:`Initializer` through every block so a whole model is reproducible
from one seed, and so parameter shapes can be enumerated without allocating
memory (used for paper-scale parameter accounting).
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from ..autodiff import Parameter, Tensor, ops


class Initializer:
    """Seeded weight factory.

    With ``materialize=False`` every draw returns a zero-strided broadcast
    view: correct shape and dtype at no memory cost, for parameter counting
    at paper scale.
    """

    def __init__(self, seed: int, dtype=np.float32, materialize: bool = True):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.materialize = materialize

    def _wrap(self, arr_fn, shape):
        if not self.materialize:
            return np.broadcast_to(np.zeros((), dtype=self.dtype), shape)
        return arr_fn().astype(self.dtype)

    def normal(self, shape, std: float) -> np.ndarray:
        return self._wrap(lambda: self.rng.normal(0.0, std, size=shape), tuple(shape))

    def fan_in(self, shape, fan: int) -> np.ndarray:
        return self.normal(shape, 1.0 / math.sqrt(fan))

    def zeros(self, shape) -> np.ndarray:
        return self._wrap(lambda: np.zeros(shape), tuple(shape))

    def ones(self, shape) -> np.ndarray:
        return self._wrap(lambda: np.ones(shape), tuple(shape))


class Module:
    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._parameters.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def set_buffer(self, dotted: str, array: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].set_buffer(rest, array)
        else:
            self._buffers[head][...] = array

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """``y = x @ W.T + b`` for time-major inputs ``[..., in_dim]``."""

    def __init__(self, in_dim: int, out_dim: int, ini: Initializer, bias: bool = True):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(ini.fan_in((out_dim, in_dim), in_dim))
        self.bias = Parameter(ini.zeros((out_dim,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, ops.transpose(self.weight))
        if self.bias is not None:
            out = ops.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, ini: Initializer, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(ini.ones((dim,)))
        self.beta = Parameter(ini.zeros((dim,)))

    def forward(self, x: Tensor) -> Tensor:
        return ops.norm_axis(x, self.gamma, self.beta, axis=-1, eps=self.eps)


class ChannelNorm(Module):
    """Per-channel normalisation over time for ``[C, T]`` inputs."""

    def __init__(self, channels: int, ini: Initializer, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(ini.ones((channels, 1)))
        self.beta = Parameter(ini.zeros((channels, 1)))

    def forward(self, x: Tensor) -> Tensor:
        return ops.norm_axis(x, self.gamma, self.beta, axis=1, eps=self.eps)


class BatchNorm1d(Module):
    """Feature-wise batch norm over ``[C, N]`` with running statistics.

    Train mode normalises by the statistics of the current call (axis 1) and
    updates the running buffers with momentum 0.1; eval mode uses the running
    buffers only, so its output does not depend on what else is in the batch.
    """

    def __init__(self, channels: int, ini: Initializer, momentum: float = 0.1,
                 eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(ini.ones((channels,)))
        self.beta = Parameter(ini.zeros((channels,)))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float64))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm1d(x, self.gamma, self.beta,
                                self.running_mean, self.running_var,
                                training=self.training, momentum=self.momentum,
                                eps=self.eps)


class Conv1d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, ini: Initializer,
                 stride: int = 1, dilation: int = 1, groups: int = 1,
                 bias: bool = True):
        super().__init__()
        self.stride, self.dilation, self.groups = stride, dilation, groups
        fan = (in_ch // groups) * kernel
        self.weight = Parameter(ini.fan_in((out_ch, in_ch // groups, kernel), fan))
        self.bias = Parameter(ini.zeros((out_ch,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, stride=self.stride,
                          dilation=self.dilation, groups=self.groups)


class Res2NetBlock(Module):
    """Hierarchical multi-scale 1-d block.

    The input splits into ``scale`` channel groups; group 1 passes through,
    each later group goes through a same-length conv of its group plus the
    previous output: y_i = relu(conv_i(x_i + y_{i-1})).  Length is preserved
    by symmetric zero padding of dilation*(kernel-1)/2.
    """

    def __init__(self, channels: int, kernel: int, dilation: int, scale: int,
                 ini: Initializer):
        super().__init__()
        if channels % scale != 0:
            raise ValueError(f"channels {channels} not divisible by scale {scale}")
        if (kernel - 1) % 2 != 0:
            raise ValueError("Res2NetBlock needs an odd kernel to keep length")
        self.scale = scale
        self.width = channels // scale
        self.pad = dilation * (kernel - 1) // 2
        self.convs = ModuleList([
            Conv1d(self.width, self.width, kernel, ini, dilation=dilation)
            for _ in range(scale - 1)])

    def forward(self, x: Tensor) -> Tensor:
        parts = [ops.narrow(x, 0, i * self.width, self.width) for i in range(self.scale)]
        outs = [parts[0]]
        prev = parts[0]
        for i, conv in enumerate(self.convs):
            h = ops.add(parts[i + 1], prev)
            if self.pad:
                h = ops.pad1d(h, 1, self.pad, self.pad)
            prev = ops.relu(conv(h))
            outs.append(prev)
        return ops.concat(outs, axis=0)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over time-major ``[T, D]`` sequences."""

    def __init__(self, dim: int, heads: int, ini: Initializer):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, ini)
        self.wk = Linear(dim, dim, ini)
        self.wv = Linear(dim, dim, ini)
        self.wo = Linear(dim, dim, ini)

    def _split(self, x: Tensor, t: int) -> Tensor:
        return ops.transpose(ops.reshape(x, (t, self.heads, self.head_dim)), (1, 0, 2))

    def forward(self, x: Tensor, memory: Optional[Tensor] = None,
                return_weights: bool = False):
        mem = x if memory is None else memory
        t, s = x.shape[0], mem.shape[0]
        q = self._split(self.wq(x), t)                     # [H, T, d]
        k = self._split(self.wk(mem), s)
        v = self._split(self.wv(mem), s)
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 2, 1))),
                           1.0 / math.sqrt(self.head_dim))
        attn = ops.softmax(scores, axis=-1)                # [H, T, S]
        ctx = ops.matmul(attn, v)                          # [H, T, d]
        out = self.wo(ops.reshape(ops.transpose(ctx, (1, 0, 2)), (t, -1)))
        if return_weights:
            return out, attn.data
        return out


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, ini: Initializer):
        super().__init__()
        self.fc1 = Linear(dim, hidden, ini)
        self.fc2 = Linear(hidden, dim, ini)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Post-norm encoder layer: x = LN(x + attn(x)); x = LN(x + ffn(x))."""

    def __init__(self, dim: int, heads: int, ffn: int, ini: Initializer):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, ini)
        self.ln1 = LayerNorm(dim, ini)
        self.ffn = FeedForward(dim, ffn, ini)
        self.ln2 = LayerNorm(dim, ini)

    def forward(self, x: Tensor) -> Tensor:
        x = self.ln1(ops.add(x, self.attn(x)))
        return self.ln2(ops.add(x, self.ffn(x)))


class TransformerDecoderLayer(Module):
    """Post-norm decoder layer with self- and cross-attention."""

    def __init__(self, dim: int, heads: int, ffn: int, ini: Initializer):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads, ini)
        self.ln1 = LayerNorm(dim, ini)
        self.cross_attn = MultiHeadAttention(dim, heads, ini)
        self.ln2 = LayerNorm(dim, ini)
        self.ffn = FeedForward(dim, ffn, ini)
        self.ln3 = LayerNorm(dim, ini)

    def forward(self, x: Tensor, memory: Tensor) -> Tensor:
        x = self.ln1(ops.add(x, self.self_attn(x)))
        x = self.ln2(ops.add(x, self.cross_attn(x, memory)))
        return self.ln3(ops.add(x, self.ffn(x)))


class PositionalConv(Module):
    """Convolutional relative positional encoding over ``[C, T]``.

    Pads kernel//2 on both sides; even kernels produce one extra step that is
    trimmed, so output length always equals input length.
    """

    def __init__(self, dim: int, kernel: int, groups: int, ini: Initializer):
        super().__init__()
        self.kernel = kernel
        self.conv = Conv1d(dim, dim, kernel, ini, groups=groups)

    def forward(self, x: Tensor) -> Tensor:
        t = x.shape[1]
        h = self.conv(ops.pad1d(x, 1, self.kernel // 2, self.kernel // 2))
        if h.shape[1] != t:
            h = ops.narrow(h, 1, 0, t)
        return ops.gelu(h)


def sinusoidal_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sine/cosine position table ``[length, dim]`` (parameter-free)."""
    pos = np.arange(length)[:, None].astype(np.float64)
    half = dim // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    table = np.zeros((length, dim))
    table[:, 0:2 * half:2] = np.sin(pos * freq)
    table[:, 1:2 * half:2] = np.cos(pos * freq)
    return table.astype(dtype)
