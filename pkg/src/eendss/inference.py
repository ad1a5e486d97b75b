"""Two-pass inference: diarize and count, then separate with the matching mask head.

Optionally the separated signals are multiplied by their aligned speech
activity posteriors ("fusion"), which suppresses residual leakage while a
speaker is silent.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .diarization import DiarOutput, DiarizationNet, binarize, count_speakers
from .tensor import Tensor

FRAME_HOP = 64


@dataclass
class InferenceOptions:
    theta: float = 0.5  # posterior threshold for activity labels
    tau: float = 0.5  # existence threshold for counting
    median_frames: int = 11
    fusion: bool = False
    num_speakers: int | None = None  # oracle count; skips counting when set

    def __post_init__(self):
        for name in ("theta", "tau"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        if self.median_frames < 1 or self.median_frames % 2 == 0:
            raise ValueError(f"median_frames must be a positive odd number, got {self.median_frames}")


@dataclass
class InferenceResult:
    num_speakers: int
    diar: DiarOutput
    separated: np.ndarray  # (C_hat, samples)
    fused: np.ndarray | None
    alignment: tuple[int, ...]  # separated output c pairs with diarization row alignment[c]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"num_speakers": self.num_speakers, "existence": [float(v) for v in self.diar.existence],
                "alignment": list(self.alignment), "fusion": self.fused is not None, "warnings": self.warnings}


def upsample_posteriors(p: np.ndarray, length: int, hop: int = FRAME_HOP) -> np.ndarray:
    """Zero-order hold each frame over ``hop`` samples, then pad with the last value or trim to ``length``."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    up = np.repeat(p, hop, axis=-1)
    if up.shape[-1] < length:
        edge = up[:, -1:] if up.shape[-1] else np.zeros((p.shape[0], 1))
        up = np.concatenate([up, np.repeat(edge, length - up.shape[-1], axis=-1)], axis=-1)
    return up[:, :length]


def _pearson_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """r[i, j] between rows a[i] and b[j]; rows with zero variance correlate as 0."""
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    na = np.sqrt(np.sum(a * a, axis=-1))
    nb = np.sqrt(np.sum(b * b, axis=-1))
    num = a @ b.T
    den = np.outer(na, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return r


def align_speakers(separated, posteriors, hop: int = FRAME_HOP) -> tuple[int, ...]:
    """Permutation maximising the summed correlation of |s_c| with upsampled p_{phi(c)}.

    Exhaustive over all orderings; the lexicographically smallest
    permutation wins ties.
    """
    s = np.atleast_2d(np.asarray(separated, dtype=np.float64))
    p = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    if s.shape[0] != p.shape[0]:
        raise ValueError(f"{s.shape[0]} separated signals but {p.shape[0]} posterior rows")
    k = s.shape[0]
    if k < 1:
        raise ValueError("alignment needs at least one speaker")
    r = _pearson_matrix(np.abs(s), upsample_posteriors(p, s.shape[-1], hop))
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(k)):
        score = 0.0
        for c in range(k):
            score += r[c, perm[c]]
        if score > best_score:
            best, best_score = perm, score
    return tuple(int(v) for v in best)


def fuse(separated, posteriors, alignment, hop: int = FRAME_HOP) -> np.ndarray:
    """Multiply each separated signal by its aligned, upsampled posterior."""
    s = np.atleast_2d(np.asarray(separated, dtype=np.float64))
    p = upsample_posteriors(posteriors, s.shape[-1], hop)
    return s * p[list(alignment)]


def infer(x, model, options: InferenceOptions | None = None) -> InferenceResult:
    """Run both passes on one mixture of shape (samples,)."""
    options = options or InferenceOptions()
    x = np.asarray(x, dtype=np.float32).reshape(-1)
    cfg = model.config
    if x.size < cfg.kernel:
        raise ValueError(f"input of {x.size} samples is shorter than the {cfg.kernel}-sample encoder kernel")
    warnings = []
    with T.no_grad():
        xt = Tensor(x[None])
        lmf = model.lmf(x[None]) if cfg.lmf_concat else None
        sep = model.separation
        h = sep.encode(xt)
        e_tcn = sep.separator(h)
        emb = model.diarization.embed(e_tcn, lmf)
        att = model.diarization.attractors(emb, cfg.c_max + 1, model.eda_order(emb.shape[1]))
        q = att.existence.data[0].astype(np.float64)
        if options.num_speakers is not None:
            c_hat = int(options.num_speakers)
        else:
            c_hat = count_speakers(q, options.tau)
        if c_hat > cfg.c_max:
            warnings.append(f"estimated {c_hat} speakers exceeds c_max={cfg.c_max}; capped")
            c_hat = cfg.c_max
        frames = emb.shape[1]
        if c_hat == 0:
            warnings.append("no speakers detected; separation skipped")
            diar = DiarOutput(np.zeros((0, frames)), np.zeros((0, frames), dtype=np.int8), 0, q)
            return InferenceResult(0, diar, np.zeros((0, x.size), dtype=np.float32), None, (), warnings)
        post = DiarizationNet.posteriors(emb, att.attractors[:, :c_hat]).data[0].T.astype(np.float64)
        separated = sep.apply_masks_and_decode(h, sep.masks(e_tcn, c_hat), x.size).data[0]
    labels = binarize(post, options.theta, options.median_frames)
    diar = DiarOutput(post, labels, c_hat, q)
    alignment = align_speakers(separated, post)
    fused = fuse(separated, post, alignment).astype(np.float32) if options.fusion else None
    return InferenceResult(c_hat, diar, separated, fused, alignment, warnings)
