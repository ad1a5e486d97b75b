"""Conv-TasNet style separation branch with one mask head per speaker count."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import ConvTranspose1d, Conv1d, GlobalLayerNorm, Module, Pointwise, PReLU, DepthwiseConv1d
from .tensor import ShapeError, Tensor


class TCNBlock(Module):
    """Residual block: expand, PReLU, gLN, depthwise dilated conv, PReLU, gLN, project."""

    def __init__(self, bottleneck: int, hidden: int, kernel: int, dilation: int, rng: np.random.Generator):
        self.dilation = dilation
        self.kernel = kernel
        self.expand = Pointwise(bottleneck, hidden, rng)
        self.act1 = PReLU()
        self.norm1 = GlobalLayerNorm(hidden)
        self.depthwise = DepthwiseConv1d(hidden, kernel, dilation, rng)
        self.act2 = PReLU()
        self.norm2 = GlobalLayerNorm(hidden)
        self.project = Pointwise(hidden, bottleneck, rng)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.norm1(self.act1(self.expand(x)))
        y = self.norm2(self.act2(self.depthwise(y)))
        return x + self.project(y)


class SeparationNet(Module):
    """Encoder, TCN separator, multiple 1x1 mask heads and a shared decoder.

    Args:
        n_filters: encoder representation size N.
        bottleneck: TCN bottleneck size B.
        hidden: channels inside each TCN block.
        layers: dilated layers per repeat (dilations 1, 2, ..., 2**(layers-1)).
        repeats: number of stacked repeats.
        c_max: number of mask heads; head k emits k masks.
    """

    def __init__(self, rng: np.random.Generator, n_filters: int = 512, kernel: int = 16, stride: int = 8,
                 bottleneck: int = 128, hidden: int = 512, tcn_kernel: int = 3, layers: int = 8,
                 repeats: int = 3, c_max: int = 4):
        self.n_filters, self.kernel, self.stride = n_filters, kernel, stride
        self.c_max = c_max
        self.encoder = Conv1d(1, n_filters, kernel, rng, stride=stride, bias=False)
        self.input_norm = GlobalLayerNorm(n_filters)
        self.input_proj = Pointwise(n_filters, bottleneck, rng)
        self.blocks = [TCNBlock(bottleneck, hidden, tcn_kernel, 2 ** i, rng)
                       for _ in range(repeats) for i in range(layers)]
        self.mask_act = PReLU()
        self.heads = [Pointwise(bottleneck, k * n_filters, rng) for k in range(1, c_max + 1)]
        self.decoder = ConvTranspose1d(n_filters, 1, kernel, stride, rng)

    def dilations(self) -> list[int]:
        return [b.dilation for b in self.blocks]

    def receptive_field(self) -> list[int]:
        """Receptive field in encoder frames after each TCN layer."""
        rf, out = 1, []
        for b in self.blocks:
            rf += (b.kernel - 1) * b.dilation
            out.append(rf)
        return out

    def encode(self, x: Tensor) -> Tensor:
        """(batch, samples) -> non-negative features (batch, N, T_f)."""
        if x.shape[-1] < self.kernel:
            raise ValueError(f"waveform of {x.shape[-1]} samples is shorter than the {self.kernel}-sample kernel")
        return T.relu(self.encoder(x.reshape(x.shape[0], 1, x.shape[-1])))

    def separator(self, h: Tensor) -> Tensor:
        """Encoder features -> TCN bottleneck features (batch, B, T_f)."""
        e = self.input_proj(self.input_norm(h))
        for block in self.blocks:
            e = block(e)
        return e

    def masks(self, e_tcn: Tensor, k: int) -> Tensor:
        """Masks of shape (batch, k, N, T_f) in [0, 1] from head ``k``."""
        if not 1 <= k <= self.c_max:
            raise ValueError(f"speaker count {k} outside [1, {self.c_max}]")
        n, _, frames = e_tcn.shape
        m = self.heads[k - 1](self.mask_act(e_tcn))
        return T.sigmoid(m.reshape(n, k, self.n_filters, frames))

    def decode(self, d: Tensor, length: int) -> Tensor:
        """(batch, N, T_f) -> (batch, length), trimming or zero-padding the tail."""
        y = self.decoder(d)
        y = y.reshape(y.shape[0], y.shape[-1])
        if y.shape[-1] >= length:
            return y[:, :length]
        return T.pad(y, [(0, 0), (0, length - y.shape[-1])])

    def apply_masks_and_decode(self, h: Tensor, masks: Tensor, length: int) -> Tensor:
        """Mask encoder features and decode: returns (batch, k, length)."""
        n, k, nf, frames = masks.shape
        if h.shape != (n, nf, frames):
            raise ShapeError("apply_masks_and_decode", f"features {h.shape} vs masks {masks.shape}")
        d = (h.reshape(n, 1, nf, frames) * masks).reshape(n * k, nf, frames)
        return self.decode(d, length).reshape(n, k, length)

    def __call__(self, x: Tensor, k: int) -> tuple[Tensor, Tensor]:
        """Return ``(separated (batch, k, samples), e_tcn)``."""
        h = self.encode(x)
        e = self.separator(h)
        return self.apply_masks_and_decode(h, self.masks(e, k), x.shape[-1]), e
