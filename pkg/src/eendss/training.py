"""Multitask training loop, plateau schedule and flexible-count finetuning."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .diarization import existence_labels
from .losses import LossBreakdown, existence_loss, multitask_loss, pit_diar_loss, pit_separation_loss
from .simulate import MixtureSample
from .tensor import Tensor

log = logging.getLogger(__name__)

HISTORY_FIELDS = ["epoch", "lr", "l_sisdr", "l_diar", "l_exist", "total", "dev_total"]


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    lr_halving_patience: int = 3
    early_stop_patience: int = 5
    lambda1: float = 1.0
    lambda2: float = 0.2
    lambda3: float = 0.2
    c_max: int = 4
    lmf_concat: bool = False
    seed: int = 0
    max_epochs: int = 100
    grad_clip: float = 5.0
    min_improvement: float = 1e-4
    diar_reduction: str = "mean"
    max_skip_fraction: float = 0.01

    def __post_init__(self):
        if self.lr_halving_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("lr_halving_patience and early_stop_patience must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights lambda1..3 must be non-negative")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.diar_reduction not in ("sum", "mean"):
            raise ValueError(f"diar_reduction must be 'sum' or 'mean', got {self.diar_reduction!r}")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EpochStats:
    l_sisdr: float
    l_diar: float
    l_exist: float
    total: float
    batches: int
    skipped: int = 0


def make_batches(samples: list[MixtureSample], batch_size: int, rng: np.random.Generator | None = None):
    """Group samples by (speaker count, length), chunk, and shuffle the chunks.

    Returns lists of indices into ``samples``.
    """
    groups: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault((s.num_speakers, s.mixture.size), []).append(i)
    batches = []
    for key in sorted(groups):
        idx = np.array(groups[key])
        if rng is not None:
            idx = rng.permutation(idx)
        batches.extend(idx[j:j + batch_size].tolist() for j in range(0, idx.size, batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


class _LmfCache:
    def __init__(self, model):
        self.model = model
        self.cache: dict[int, np.ndarray] = {}

    def __call__(self, samples, idx) -> Tensor | None:
        if not self.model.config.lmf_concat:
            return None
        rows = []
        for i in idx:
            key = id(samples[i])
            if key not in self.cache:
                self.cache[key] = self.model.lmf(samples[i].mixture[None]).data[0]
            rows.append(self.cache[key])
        return Tensor(np.stack(rows))


def batch_losses(model, samples: list[MixtureSample], idx: list[int], config: TrainConfig,
                 lmf: Tensor | None = None, rng: np.random.Generator | None = None) -> LossBreakdown:
    """Forward one equal-count batch with the oracle mask head and combine the three losses."""
    batch = [samples[i] for i in idx]
    c = batch[0].num_speakers
    x = Tensor(np.stack([s.mixture for s in batch]))
    out = model(x, num_speakers=c, separate=config.lambda1 > 0, lmf=lmf, rng=rng)
    l_sep, sep_perms = None, None
    if config.lambda1 > 0:
        refs = np.stack([s.sources for s in batch])
        l_sep, sep_perms = pit_separation_loss(out.separated, refs)
    labels = np.stack([s.labels for s in batch])
    l_diar, diar_perms = pit_diar_loss(T.swapaxes(out.posteriors, -1, -2), labels, reduction=config.diar_reduction)
    l_exist = existence_loss(out.attractors.existence, existence_labels(c))
    return multitask_loss(l_sep, l_diar, l_exist, config.weights, diar_perms, sep_perms)


def train_epoch(model, samples: list[MixtureSample], config: TrainConfig, optimizer: T.Adam,
                rng: np.random.Generator, lmf_cache: _LmfCache | None = None) -> EpochStats:
    """One pass over ``samples``: forward, multitask loss, backward, clipped Adam step per batch."""
    lmf_cache = lmf_cache or _LmfCache(model)
    params = model.parameters()
    sums = np.zeros(4)
    done = skipped = 0
    batches = make_batches(samples, config.batch_size, rng)
    for idx in batches:
        optimizer.zero_grad()
        parts = batch_losses(model, samples, idx, config, lmf_cache(samples, idx), rng)
        total = float(parts.total.data)
        if not math.isfinite(total):
            T.get_tape().clear()
            skipped += 1
        else:
            parts.total.backward()
            T.clip_grad_norm(params, config.grad_clip)
            if optimizer.step():
                sums += [parts.l_sisdr, parts.l_diar, parts.l_exist, total]
                done += 1
            else:
                skipped += 1
    if skipped > config.max_skip_fraction * len(batches):
        raise RuntimeError(f"{skipped} of {len(batches)} batches had non-finite losses or gradients")
    means = sums / max(done, 1)
    return EpochStats(*means.tolist(), batches=len(batches), skipped=skipped)


def evaluate(model, samples: list[MixtureSample], config: TrainConfig, lmf_cache: _LmfCache | None = None) -> EpochStats:
    """Mean losses over ``samples`` without gradient tracking (batches weighted by size)."""
    lmf_cache = lmf_cache or _LmfCache(model)
    sums = np.zeros(4)
    count = 0
    with T.no_grad():
        for idx in make_batches(samples, config.batch_size):
            parts = batch_losses(model, samples, idx, config, lmf_cache(samples, idx))
            sums += len(idx) * np.array([parts.l_sisdr, parts.l_diar, parts.l_exist, float(parts.total.data)])
            count += len(idx)
    means = sums / max(count, 1)
    return EpochStats(*means.tolist(), batches=count)


class PlateauSchedule:
    """Halve the lr after ``halving`` epochs without improvement; stop after ``stop`` such epochs.

    An improvement means beating the best loss so far by at least ``min_delta``.
    """

    def __init__(self, lr: float, halving: int, stop: int, min_delta: float = 1e-4):
        self.lr = lr
        self.halving, self.stop, self.min_delta = halving, stop, min_delta
        self.best = math.inf
        self.bad_epochs = 0
        self.since_halving = 0

    def step(self, loss: float) -> dict:
        """Record one epoch; returns flags ``improved``, ``halved`` and ``stop``."""
        improved = loss < self.best - self.min_delta
        halved = False
        if improved:
            self.best = loss
            self.bad_epochs = self.since_halving = 0
        else:
            self.bad_epochs += 1
            self.since_halving += 1
            if self.since_halving >= self.halving:
                self.lr *= 0.5
                self.since_halving = 0
                halved = True
        return {"improved": improved, "halved": halved, "stop": self.bad_epochs >= self.stop}


@dataclass
class FitResult:
    history: list[dict]
    best_epoch: int
    best_dev: float
    stopped_early: bool
    checkpoint: Path | None = None
    skipped_batches: int = 0
    events: list[str] = field(default_factory=list)


def write_history(path, history: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{row[k]:.8g}" if isinstance(row[k], float) else row[k]) for k in HISTORY_FIELDS})


def fit(model, train: list[MixtureSample], dev: list[MixtureSample], config: TrainConfig, out_dir=None,
        epoch_fn: Callable | None = None, eval_fn: Callable | None = None, extra: dict | None = None) -> FitResult:
    """Train until early stopping or ``max_epochs`` and restore the best-dev weights.

    ``epoch_fn(model, train, config, optimizer, rng)`` and
    ``eval_fn(model, dev, config)`` default to :func:`train_epoch` and
    :func:`evaluate`. With ``out_dir`` the best weights go to ``best.ckpt``
    and the per-epoch log to ``history.csv``.
    """
    if config.max_epochs < 1:
        raise ValueError(f"max_epochs must be at least 1, got {config.max_epochs}")
    if not dev:
        raise ValueError("the dev split is empty")
    epoch_fn = epoch_fn or train_epoch
    eval_fn = eval_fn or evaluate
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    cache = _LmfCache(model)
    optimizer = T.Adam(model.parameters(), lr=config.lr)
    schedule = PlateauSchedule(config.lr, config.lr_halving_patience, config.early_stop_patience,
                               config.min_improvement)
    history, events = [], []
    best_state, best_epoch, stopped, skipped = model.state_dict(), 0, False, 0
    ckpt = out_dir / "best.ckpt" if out_dir is not None else None
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        lr = optimizer.lr
        if epoch_fn is train_epoch:
            stats = train_epoch(model, train, config, optimizer, rng, cache)
        else:
            stats = epoch_fn(model, train, config, optimizer, rng)
        skipped += stats.skipped
        dev_stats = evaluate(model, dev, config, cache) if eval_fn is evaluate else eval_fn(model, dev, config)
        row = {"epoch": epoch, "lr": lr, "l_sisdr": stats.l_sisdr, "l_diar": stats.l_diar,
               "l_exist": stats.l_exist, "total": stats.total, "dev_total": dev_stats.total}
        history.append(row)
        flags = schedule.step(dev_stats.total)
        log.info("epoch %d lr %.3g train %.4f dev %.4f%s", epoch, lr, stats.total, dev_stats.total,
                 " *" if flags["improved"] else "")
        if flags["improved"]:
            best_state, best_epoch = model.state_dict(), epoch
            if ckpt is not None:
                model.save(ckpt, extra={"epoch": epoch, "dev_total": dev_stats.total, **(extra or {})})
        if flags["halved"]:
            optimizer.lr = schedule.lr
            events.append(f"epoch {epoch}: lr halved to {schedule.lr:g}")
        if out_dir is not None:
            write_history(out_dir / "history.csv", history)
        if flags["stop"]:
            stopped = True
            events.append(f"epoch {epoch}: early stop")
            break
    model.load_state_dict(best_state)
    return FitResult(history, best_epoch, schedule.best, stopped, ckpt, skipped, events)


def finetune_flexible(model, train: list[MixtureSample], dev: list[MixtureSample], config: TrainConfig,
                      out_dir=None, **kwargs) -> FitResult | None:
    """Continue training a fixed-count model on a mixed-count corpus.

    The optimizer state and the lr schedule start fresh. With
    ``max_epochs == 0`` the model is returned untouched (and saved when
    ``out_dir`` is given) and ``None`` is returned.
    """
    counts = sorted({s.num_speakers for s in train})
    if len(counts) < 2:
        raise ValueError(f"flexible finetuning needs at least two speaker counts, got {counts}")
    c_max = model.config.c_max
    too_many = sorted({s.num_speakers for s in list(train) + list(dev) if s.num_speakers > c_max})
    if too_many:
        raise ValueError(f"corpus contains speaker counts {too_many} above c_max={c_max}")
    if config.max_epochs == 0:
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            model.save(Path(out_dir) / "best.ckpt")
        return None
    return fit(model, train, dev, config, out_dir, **kwargs)
