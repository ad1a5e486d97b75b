"""Training objectives: PIT diarization BCE, attractor existence BCE, SI-SDR and their weighted sum."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PROB_EPS = 1e-7
SDR_EPS = 1e-8
SDR_CLAMP_DB = 60.0
MAX_PIT_SPEAKERS = 8


def _batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == ndim - 1:
        return x.reshape((1,) + x.shape), True
    return x, False


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype if like is not None else None)


def _best_permutations(scores: np.ndarray, maximize: bool) -> list[tuple[int, ...]]:
    """Per-sample permutation optimising sum_i scores[b, i, perm[i]].

    Ties resolve to the lexicographically smallest permutation.
    """
    k = scores.shape[-1]
    perms = list(itertools.permutations(range(k)))
    idx = np.array(perms)
    totals = scores[:, np.arange(k)[None, :], idx].sum(axis=-1)  # (batch, perms)
    best = totals.argmax(axis=1) if maximize else totals.argmin(axis=1)
    return [perms[b] for b in best]


def _gather_perm(scores: Tensor, perms: list[tuple[int, ...]]) -> Tensor:
    n, k, _ = scores.shape
    rows = np.repeat(np.arange(n), k)
    cols = np.tile(np.arange(k), n)
    picks = np.array([p[i] for p in perms for i in range(k)])
    return scores[rows, cols, picks].reshape(n, k)


def bce(p: Tensor, y) -> Tensor:
    """Elementwise binary cross entropy with posteriors clamped to [1e-7, 1 - 1e-7]."""
    y = _as_tensor(y, p)
    pc = T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(y * T.log(pc) + (1.0 - y) * T.log(1.0 - pc))


def pit_diar_loss(p: Tensor, labels, reduction: str = "sum") -> tuple[Tensor, list[tuple[int, ...]]]:
    """Permutation-invariant BCE between posteriors and reference labels.

    Args:
        p: posteriors (C, T) or (batch, C, T).
        labels: binary reference labels with the same shape.
        reduction: ``"sum"`` sums over frames and speakers; ``"mean"``
            divides that sum by C * T. Both average over the batch.

    Returns:
        The loss and, per sample, the permutation ``phi`` such that
        posterior row ``c`` is scored against reference row ``phi[c]``.
    """
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    p, _ = _batched(p, 3)
    if labels.ndim == 2:
        labels = labels[None]
    if p.shape != labels.shape:
        raise ShapeError("pit_diar_loss", f"posteriors {p.shape} vs labels {labels.shape}")
    n, c, frames = p.shape
    if c > MAX_PIT_SPEAKERS:
        raise ValueError(f"{c} speakers exceeds the permutation search limit of {MAX_PIT_SPEAKERS}")
    pc = T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    yt = Tensor(np.swapaxes(labels, -1, -2), dtype=p.dtype)
    # costs[b, i, j] = sum_t BCE(labels[b, j, t], p[b, i, t])
    costs = -(T.matmul(T.log(pc), yt) + T.matmul(T.log(1.0 - pc), 1.0 - yt))
    perms = _best_permutations(costs.data.astype(np.float64), maximize=False)
    loss = _gather_perm(costs, perms).sum() * (1.0 / n)
    if reduction == "mean":
        loss = loss * (1.0 / (c * frames))
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss, perms


def existence_loss(q: Tensor, labels=None) -> Tensor:
    """(1 / (C+1)) * sum BCE(l, q), averaged over the batch.

    ``labels`` defaults to ``[1] * C + [0]`` for ``q`` of length C + 1.
    """
    q, _ = _batched(q, 2)
    n, length = q.shape
    if labels is None:
        labels = np.array([1.0] * (length - 1) + [0.0])
    labels = np.broadcast_to(np.asarray(labels, dtype=np.float64), q.shape)
    return bce(q, labels).sum() * (1.0 / (n * length))


def si_sdr(estimate: Tensor, reference) -> Tensor:
    """SI-SDR in dB along the last axis, clamped to [-60, 60]."""
    reference = _as_tensor(reference, estimate)
    energy = np.sum(reference.data.astype(np.float64) ** 2, axis=-1)
    if np.any(energy == 0):
        raise ValueError("SI-SDR is undefined for an all-zero reference")
    ref_energy = T.sum(reference * reference, axis=-1, keepdims=True)
    alpha = T.sum(estimate * reference, axis=-1, keepdims=True) / ref_energy
    target = alpha * reference
    noise = estimate - target
    ratio = (T.sum(target * target, axis=-1) + SDR_EPS) / (T.sum(noise * noise, axis=-1) + SDR_EPS)
    db = T.log(ratio) * (10.0 / math.log(10.0))
    return T.clamp(db, -SDR_CLAMP_DB, SDR_CLAMP_DB)


def si_sdr_loss(estimate: Tensor, reference) -> Tensor:
    """Negative SI-SDR, averaged over any leading axes."""
    return -T.mean(si_sdr(estimate, reference))


def pit_separation_loss(estimates: Tensor, references) -> tuple[Tensor, list[tuple[int, ...]]]:
    """Utterance-level PIT over whole signals.

    Args:
        estimates: (k, samples) or (batch, k, samples).
        references: same shape.

    Returns:
        Mean negative SI-SDR under the best permutation, and per sample the
        permutation ``perm`` pairing estimate ``i`` with reference ``perm[i]``.
    """
    references = _as_tensor(references, estimates)
    estimates, _ = _batched(estimates, 3)
    references, _ = _batched(references, 3)
    if estimates.shape[:2] != references.shape[:2]:
        raise ShapeError("pit_separation_loss",
                         f"{estimates.shape[1]} estimates vs {references.shape[1]} references")
    if estimates.shape != references.shape:
        raise ShapeError("pit_separation_loss", f"estimates {estimates.shape} vs references {references.shape}")
    n, k, length = estimates.shape
    pair = si_sdr(estimates.reshape(n, k, 1, length), references.reshape(n, 1, k, length))  # (n, k, k)
    perms = _best_permutations(pair.data.astype(np.float64), maximize=True)
    return -T.mean(_gather_perm(pair, perms)), perms


@dataclass
class LossBreakdown:
    total: Tensor
    l_sisdr: float
    l_diar: float
    l_exist: float
    weights: tuple[float, float, float]
    diar_perms: list | None = None
    sep_perms: list | None = None

    def recombined(self) -> float:
        w1, w2, w3 = self.weights
        return w1 * self.l_sisdr + w2 * self.l_diar + w3 * self.l_exist


def multitask_loss(l_sisdr, l_diar, l_exist, weights=(1.0, 0.2, 0.2), diar_perms=None,
                   sep_perms=None) -> LossBreakdown:
    """total = w1 * L_sisdr + w2 * L_diar + w3 * L_exist.

    A component may be ``None`` when its weight is zero (its branch was not run).
    """
    w = tuple(float(v) for v in weights)
    if len(w) != 3 or any(v < 0 for v in w):
        raise ValueError(f"loss weights must be three non-negative numbers, got {weights}")
    parts = []
    values = []
    for weight, part in zip(w, (l_sisdr, l_diar, l_exist)):
        if part is None:
            if weight != 0:
                raise ValueError("a loss component with non-zero weight is missing")
            values.append(0.0)
            continue
        part = T.astype(part, np.float64) if isinstance(part, Tensor) else Tensor(part, dtype=np.float64)
        values.append(float(part.data))
        if weight != 0:
            parts.append(part * weight)
    total = parts[0] if parts else Tensor(0.0, dtype=np.float64)
    for extra in parts[1:]:
        total = total + extra
    return LossBreakdown(total, values[0], values[1], values[2], w, diar_perms, sep_perms)
