"""EEND branch with encoder-decoder attractors (EDA)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dsp import Subsample
from .nn import LSTM, LayerNorm, Linear, Module, TransformerEncoderLayer
from .tensor import ShapeError, Tensor


@dataclass
class AttractorSet:
    attractors: Tensor  # (batch, c_gen, D)
    existence: Tensor  # (batch, c_gen), probabilities in (0, 1)

    @property
    def count(self) -> int:
        return self.attractors.shape[1]


@dataclass
class DiarOutput:
    """Posteriors (C, T_d), binarized labels and the estimated speaker count."""

    posteriors: np.ndarray
    labels: np.ndarray
    num_speakers: int
    existence: np.ndarray


class DiarizationNet(Module):
    def __init__(self, rng: np.random.Generator, bottleneck: int = 128, d_model: int = 256, heads: int = 4,
                 layers: int = 4, ff_dim: int = 1024, subsample: int = 8, lmf_dim: int = 0):
        self.d_model = d_model
        self.lmf_dim = lmf_dim
        self.subsample = Subsample(bottleneck, d_model, subsample, rng)
        self.input_proj = Linear(d_model + lmf_dim, d_model, rng)
        self.encoder = [TransformerEncoderLayer(d_model, heads, ff_dim, rng) for _ in range(layers)]
        self.final_norm = LayerNorm(d_model)
        self.eda_encoder = LSTM(d_model, d_model, rng)
        self.eda_decoder = LSTM(d_model, d_model, rng)
        self.existence = Linear(d_model, 1, rng)

    def embed(self, e_tcn: Tensor, lmf: Tensor | None = None) -> Tensor:
        """Bottleneck features (batch, B, T_f) -> embeddings (batch, T_d, D)."""
        x = self.subsample(e_tcn)
        if self.lmf_dim:
            if lmf is None:
                raise ValueError("this model was built with LMF concatenation; lmf features are required")
            if lmf.shape[:2] != x.shape[:2] or lmf.shape[2] != self.lmf_dim:
                raise ShapeError("diar_encode", f"lmf frames {lmf.shape} misaligned with subsampled {x.shape}")
            x = T.concat([x, lmf], axis=-1)
        elif lmf is not None:
            raise ValueError("lmf features given to a model built without LMF concatenation")
        x = self.input_proj(x)
        for layer in self.encoder:
            x = layer(x)
        return self.final_norm(x)

    def attractors(self, emb: Tensor, c_stop: int, order: np.ndarray | None = None) -> AttractorSet:
        """Run the EDA encoder over ``emb`` and decode ``c_stop`` attractors from zero inputs.

        ``order`` optionally permutes the frames fed to the EDA encoder.
        """
        if c_stop < 1:
            raise ValueError("c_stop must be at least 1")
        n, frames, d = emb.shape
        if frames == 0:
            raise ValueError("empty embedding sequence")
        if order is not None:
            if sorted(np.asarray(order).tolist()) != list(range(frames)):
                raise ValueError(f"order must be a permutation of {frames} frames")
            emb = emb[:, np.asarray(order)]
        _, state = self.eda_encoder(emb)
        zeros = Tensor(np.zeros((n, c_stop, d)), dtype=emb.dtype)
        attractors, _ = self.eda_decoder(zeros, state)
        q = T.sigmoid(self.existence(attractors)).reshape(n, c_stop)
        return AttractorSet(attractors, q)

    @staticmethod
    def posteriors(emb: Tensor, attractors: Tensor) -> Tensor:
        """sigma(A^T e_t) as (batch, T_d, C)."""
        return T.sigmoid(T.matmul(emb, T.swapaxes(attractors, -1, -2)))


def existence_labels(num_speakers: int) -> np.ndarray:
    """[1] * C + [0]."""
    return np.array([1.0] * num_speakers + [0.0])


def count_speakers(q, tau: float = 0.5) -> int:
    """Length of the longest prefix of ``q`` whose entries all exceed ``tau``."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    below = np.flatnonzero(q <= tau)
    return int(below[0]) if below.size else int(q.size)


def median_filter_binary(labels: np.ndarray, width: int) -> np.ndarray:
    """Per-row median filter of 0/1 labels along the last axis.

    Near the edges the window shrinks symmetrically, so it stays centred and
    odd-sized and no ties arise.
    """
    if width % 2 == 0:
        raise ValueError(f"median filter width must be odd, got {width}")
    labels = np.asarray(labels)
    if width == 1 or labels.shape[-1] == 0:
        return labels.astype(np.int8)
    x = labels.reshape(-1, labels.shape[-1]).astype(np.int64)
    frames = x.shape[-1]
    csum = np.concatenate([np.zeros((x.shape[0], 1), dtype=np.int64), np.cumsum(x, axis=-1)], axis=-1)
    idx = np.arange(frames)
    half = np.minimum(np.minimum(idx, frames - 1 - idx), width // 2)
    ones = csum[:, idx + half + 1] - csum[:, idx - half]
    return (2 * ones > 2 * half + 1).astype(np.int8).reshape(labels.shape)


def binarize(p, theta: float = 0.5, median_frames: int = 11) -> np.ndarray:
    """Threshold posteriors (C, T_d) at ``theta`` then median filter each speaker."""
    return median_filter_binary(np.asarray(p) >= theta, median_frames)
