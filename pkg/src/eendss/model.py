"""The joint network: shared encoder + TCN, separation and diarization branches."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .diarization import AttractorSet, DiarizationNet
from .dsp import diarization_frames, lmf_features
from .nn import Module
from .separation import SeparationNet
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are the full-size configuration."""

    n_filters: int = 512
    kernel: int = 16
    stride: int = 8
    bottleneck: int = 128
    tcn_hidden: int = 512
    tcn_kernel: int = 3
    tcn_layers: int = 8
    tcn_repeats: int = 3
    d_model: int = 256
    heads: int = 4
    transformer_layers: int = 4
    ff_dim: int = 1024
    subsample: int = 8
    c_max: int = 4
    lmf_concat: bool = False
    eda_shuffle: bool = False
    n_mels: int = 80
    lmf_frame_len: int = 512
    sample_rate: int = 8000

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def lmf_hop(self) -> int:
        return self.stride * self.subsample


@dataclass
class ModelOutput:
    e_tcn: Tensor
    embeddings: Tensor
    attractors: AttractorSet
    posteriors: Tensor | None  # (batch, T_d, C)
    separated: Tensor | None = None  # (batch, k, samples)
    features: Tensor | None = field(default=None, repr=False)


class EENDSS(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.seed = seed
        c = self.config
        rng = np.random.default_rng(seed)
        self.separation = SeparationNet(rng, c.n_filters, c.kernel, c.stride, c.bottleneck, c.tcn_hidden,
                                        c.tcn_kernel, c.tcn_layers, c.tcn_repeats, c.c_max)
        self.diarization = DiarizationNet(rng, c.bottleneck, c.d_model, c.heads, c.transformer_layers, c.ff_dim,
                                          c.subsample, c.n_mels if c.lmf_concat else 0)

    def diar_frames(self, num_samples: int) -> int:
        c = self.config
        return diarization_frames(num_samples, c.kernel, c.stride, c.subsample)

    def lmf(self, x: np.ndarray) -> Tensor:
        """Frame-aligned LMF features for a (batch, samples) array."""
        c = self.config
        x = np.atleast_2d(np.asarray(x))
        frames = self.diar_frames(x.shape[-1])
        feats = [lmf_features(row, frames, c.lmf_frame_len, c.lmf_hop, c.n_mels, c.sample_rate).values for row in x]
        return Tensor(np.stack(feats))

    def __call__(self, x: Tensor, num_speakers: int | None = None, n_attractors: int | None = None,
                 separate: bool = True, lmf: Tensor | None = None,
                 rng: np.random.Generator | None = None) -> ModelOutput:
        """Forward both branches.

        Args:
            x: mixtures, (batch, samples).
            num_speakers: speaker count used for the mask head and posteriors
                (the oracle count during training). ``None`` runs the
                diarization pass only.
            n_attractors: attractors to generate; defaults to
                ``num_speakers + 1`` or ``c_max + 1``.
            separate: skip the mask head and decoder when False.
            lmf: precomputed LMF features when the model concatenates them.
            rng: source of the EDA frame shuffle when ``eda_shuffle`` is set.
                Without it a fixed permutation seeded by the frame count is
                used, so inference stays deterministic.
        """
        c = self.config
        if c.lmf_concat and lmf is None:
            lmf = self.lmf(x.data)
        sep = self.separation
        h = sep.encode(x)
        e_tcn = sep.separator(h)
        emb = self.diarization.embed(e_tcn, lmf if c.lmf_concat else None)
        if n_attractors is None:
            n_attractors = num_speakers + 1 if num_speakers is not None else c.c_max + 1
        att = self.diarization.attractors(emb, n_attractors, self.eda_order(emb.shape[1], rng))
        post = None
        if num_speakers is not None and num_speakers > 0:
            post = DiarizationNet.posteriors(emb, att.attractors[:, :num_speakers])
        separated = None
        if separate and num_speakers:
            separated = sep.apply_masks_and_decode(h, sep.masks(e_tcn, num_speakers), x.shape[-1])
        return ModelOutput(e_tcn, emb, att, post, separated, h)

    def eda_order(self, frames: int, rng: np.random.Generator | None = None) -> np.ndarray | None:
        if not self.config.eda_shuffle:
            return None
        return (rng or np.random.default_rng(frames)).permutation(frames)

    def separation_parameter_names(self) -> list[str]:
        """Parameters used only by the separation branch (mask heads and decoder)."""
        return [n for n, _ in self.named_parameters()
                if n.startswith(("separation.heads.", "separation.decoder.", "separation.mask_act."))]

    def save(self, path, extra: dict | None = None):
        return save_checkpoint(path, self.state_dict(), hyperparameters=self.config.to_dict(), seed=self.seed,
                               extra=extra)

    @classmethod
    def load(cls, path) -> "EENDSS":
        arrays, header = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(header["hyperparameters"]), seed=header.get("seed") or 0)
        model.load_state_dict(arrays)
        return model


TOY_CONFIG = ModelConfig(n_filters=64, bottleneck=32, tcn_hidden=64, tcn_layers=8, tcn_repeats=1, d_model=64,
                         heads=4, transformer_layers=2, ff_dim=128, c_max=4)
"""A reduced configuration that trains in minutes on one CPU core."""
