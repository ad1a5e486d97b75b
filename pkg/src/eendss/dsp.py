"""Framing, power spectra, log-mel features and frame-rate bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, _uniform
from .tensor import Tensor

LOG_FLOOR = 1e-10


@dataclass
class FrameSequence:
    """A (num_frames, dim) feature matrix at a fixed hop."""

    values: np.ndarray
    frame_hop_samples: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"frame values must be 2-d, got shape {self.values.shape}")
        if self.frame_hop_samples <= 0:
            raise ValueError("frame_hop_samples must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("frame values must be finite")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def num_frames(length: int, frame_len: int, hop: int) -> int:
    return (length - frame_len) // hop + 1


def separation_frames(num_samples: int, kernel: int = 16, stride: int = 8) -> int:
    """Encoder frame count T_f for a waveform of ``num_samples``."""
    return (num_samples - kernel) // stride + 1


def diarization_frames(num_samples: int, kernel: int = 16, stride: int = 8, factor: int = 8) -> int:
    """Diarization frame count T_d = floor(T_f / factor)."""
    return separation_frames(num_samples, kernel, stride) // factor


def stft_power(x: np.ndarray, frame_len: int = 512, hop: int = 64) -> FrameSequence:
    """Hann-windowed squared-magnitude spectra, ``frame_len // 2 + 1`` bins."""
    x = np.asarray(x, dtype=np.float64)
    if frame_len < hop:
        raise ValueError(f"frame_len {frame_len} must be >= hop {hop}")
    if x.shape[-1] < frame_len:
        raise ValueError(f"signal of {x.shape[-1]} samples is shorter than one frame ({frame_len})")
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop]
    window = np.hanning(frame_len + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, n=frame_len, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    return FrameSequence(power, hop)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-mel filters from 0 Hz to Nyquist, shape (n_mels, n_fft//2+1).

    Weights are evaluated at the exact bin frequencies, so every filter is
    non-empty even when it is narrower than one bin spacing.
    """
    n_bins = n_fft // 2 + 1
    if n_mels > n_bins:
        raise ValueError(f"n_mels={n_mels} exceeds the {n_bins} spectral bins")
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    # a filter narrower than the bin spacing can miss every bin; give it the nearest one
    for row, c in zip(fb, edges[1:-1]):
        if row.sum() == 0.0:
            row[int(np.argmin(np.abs(freqs - c)))] = 1.0
    return fb


def log_mel(power: FrameSequence, n_mels: int = 80, sample_rate: int = 8000) -> FrameSequence:
    n_fft = 2 * (power.dim - 1)
    fb = mel_filterbank(n_mels, n_fft, sample_rate)
    return FrameSequence(np.log(np.maximum(power.values @ fb.T, LOG_FLOOR)), power.frame_hop_samples)


def lmf_features(x: np.ndarray, n_frames: int, frame_len: int = 512, hop: int = 64, n_mels: int = 80,
                 sample_rate: int = 8000) -> FrameSequence:
    """Log-mel frames aligned with the diarization frame grid.

    Frame ``j`` is centred on sample ``j * hop + hop // 2``, the centre of the
    j-th subsampled bottleneck frame. The signal is zero-padded so exactly
    ``n_frames`` frames exist.
    """
    x = np.asarray(x, dtype=np.float64)
    left = frame_len // 2 - hop // 2
    need = (n_frames - 1) * hop + frame_len
    right = max(0, need - left - x.shape[-1])
    padded = np.pad(x, (left, right))
    seq = log_mel(stft_power(padded, frame_len, hop), n_mels, sample_rate)
    return FrameSequence(seq.values[:n_frames], hop)


class Subsample(Module):
    """Learnable time subsampling.

    A 2-D convolution over (time, feature) whose kernel spans ``factor``
    frames and the whole feature axis, with time stride ``factor``; that is
    one affine map per non-overlapping group of ``factor`` frames.
    """

    def __init__(self, in_dim: int, out_dim: int, factor: int, rng: np.random.Generator):
        self.factor = factor
        self.in_dim = in_dim
        self.weight = _uniform(rng, (in_dim * factor, out_dim), in_dim * factor)
        self.bias = _uniform(rng, (out_dim,), in_dim * factor)

    def __call__(self, x: Tensor) -> Tensor:
        """(batch, in_dim, frames) -> (batch, frames // factor, out_dim)."""
        n, c, frames = x.shape
        out_frames = frames // self.factor
        if out_frames < 1:
            raise ValueError(f"{frames} frames cannot be subsampled by {self.factor}")
        x = x[:, :, :out_frames * self.factor].reshape(n, c, out_frames, self.factor)
        x = x.transpose(0, 2, 3, 1).reshape(n, out_frames, self.factor * c)
        return T.matmul(x, self.weight) + self.bias

    def frames(self, seq: FrameSequence) -> FrameSequence:
        with T.no_grad():
            out = self(Tensor(seq.values.T[None]))
        return FrameSequence(out.data[0].astype(np.float64), seq.frame_hop_samples * self.factor)
