"""Layers built on :mod:`eendss.tensor`.

Activations are laid out channel-major, (batch, channels, time), for the
convolutional layers and time-major, (batch, time, features), for the
transformer and recurrent layers. All weights are initialised uniformly in
``±sqrt(1 / fan_in)``.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Minimal parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def to(self, dtype):
        """Cast every parameter in place (used by float64 gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Pointwise(Module):
    """1x1 convolution over (batch, in, time)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _uniform(rng, (cout, cin), cin)
        self.bias = _uniform(rng, (cout, 1), cin) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(self.weight, x)
        return y + self.bias if self.bias is not None else y


class Linear(Module):
    """Affine map over the last axis."""

    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        self.din, self.dout = din, dout
        self.weight = _uniform(rng, (din, dout), din)
        self.bias = _uniform(rng, (dout,), din) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv1d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, dilation: int = 1, bias: bool = True):
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.weight = _uniform(rng, (cout, cin, kernel), cin * kernel)
        self.bias = _uniform(rng, (cout,), cin * kernel) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, dilation=self.dilation)


class DepthwiseConv1d(Module):
    """Per-channel dilated convolution with 'same' padding (odd kernels)."""

    def __init__(self, channels: int, kernel: int, dilation: int, rng: np.random.Generator):
        self.dilation = dilation
        self.padding = dilation * (kernel - 1) // 2
        self.weight = _uniform(rng, (channels, 1, kernel), kernel)
        self.bias = _uniform(rng, (channels,), kernel)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, padding=self.padding, dilation=self.dilation,
                        groups=x.shape[1])


class ConvTranspose1d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int, rng: np.random.Generator):
        self.stride = stride
        self.weight = _uniform(rng, (cin, cout, kernel), cin)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose1d(x, self.weight, stride=self.stride)


class PReLU(Module):
    """PReLU with one slope shared by all channels."""

    def __init__(self, init: float = 0.25):
        self.slope = Tensor([init], requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.prelu(x, self.slope)


class GlobalLayerNorm(Module):
    """Normalise each utterance over channels and time, then scale per channel."""

    def __init__(self, channels: int, eps: float = 1e-8):
        self.eps = eps
        self.gamma = Tensor(np.ones((channels, 1)), requires_grad=True)
        self.beta = Tensor(np.zeros((channels, 1)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, axes=(1, 2), eps=self.eps, weight=self.gamma, bias=self.beta)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, axes=-1, eps=self.eps, weight=self.gamma, bias=self.beta)


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        dh = d // self.heads
        qkv = self.qkv(x).reshape(n, t, 3, self.heads, dh).transpose(2, 0, 3, 1, 4)  # (3, n, h, t, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)  # (n, h, t, dh)
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(n, t, d))


class TransformerEncoderLayer(Module):
    """Pre-norm self-attention block without positional encoding."""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_dim, rng)
        self.ff2 = Linear(ff_dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ff2(T.relu(self.ff1(self.norm2(x))))


class LSTM(Module):
    """Single-layer LSTM, time-major inputs of shape (batch, time, features)."""

    def __init__(self, din: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.w_ih = _uniform(rng, (4 * hidden, din), hidden)
        self.w_hh = _uniform(rng, (4 * hidden, hidden), hidden)
        self.bias = _uniform(rng, (4 * hidden,), hidden)

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor] | None = None):
        """Return ``(h_seq, (h_last, c_last))``."""
        n = x.shape[0]
        if state is None:
            zeros = Tensor(np.zeros((n, self.hidden)), dtype=x.dtype)
            state = (zeros, zeros)
        hc = T.lstm(x, state[0], state[1], self.w_ih, self.w_hh, self.bias)
        h = self.hidden
        return hc[:, :, :h], (hc[:, -1, :h], hc[:, -1, h:])
