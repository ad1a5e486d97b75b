"""Synthetic conversation-like mixtures with controlled speaker count and overlap.

Each speaker is a harmonic tone stack shaped by speaker-specific formant
bands and a 4 Hz syllabic envelope. Speakers in one mixture share an
utterance length and are staggered in time by a common step, which is
searched so that the realized overlap ratio matches the request. Overlap is
measured as the fraction of speech time (samples with at least one active
speaker) during which two or more speakers are active.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import quantize, read_json, read_rttm, read_wav, write_json, write_rttm, write_wav
from .dsp import diarization_frames

OVERLAP_TOLERANCE = 0.05
MIN_F0_GAP_HZ = 20.0
RAMP_SECONDS = 0.02
PEAK_LIMIT = 0.95
FRAME_HOP = 64


@dataclass(frozen=True)
class SourceSpec:
    """Synthetic voice descriptor.

    ``utterances`` lists (start, duration) pairs in seconds. The envelope is
    zero outside them and at least 5% of its peak inside, so the activity
    mask is exactly the union of the utterance intervals.
    """

    f0: float
    formants: tuple[float, ...]
    bandwidths: tuple[float, ...]
    utterances: tuple[tuple[float, float], ...]
    am_rate: float = 4.0
    rms: float = 0.1
    seed: int = 0


@dataclass
class MixtureSample:
    mixture: np.ndarray  # (samples,)
    sources: np.ndarray  # (C, samples), already multiplied by their activity
    activity: np.ndarray | None  # (C, samples) bool
    labels: np.ndarray  # (C, T_d) int8
    noise: np.ndarray | None
    overlap_ratio: float  # realized
    num_speakers: int
    requested_overlap: float | None = None
    snr_db: float | None = None
    sample_rate: int = 8000
    id: str = ""


def overlap_fraction(activity: np.ndarray) -> float:
    """Fraction of speech samples where two or more rows are active (0 when silent)."""
    count = np.asarray(activity, dtype=np.int64).sum(axis=0)
    speech = np.count_nonzero(count >= 1)
    return float(np.count_nonzero(count >= 2) / speech) if speech else 0.0


def frame_labels(activity: np.ndarray, num_frames: int, hop: int = FRAME_HOP) -> np.ndarray:
    """1 where more than half of a frame's ``hop`` samples are active."""
    activity = np.atleast_2d(np.asarray(activity, dtype=np.int64))
    need = num_frames * hop
    if activity.shape[1] < need:
        activity = np.pad(activity, ((0, 0), (0, need - activity.shape[1])))
    votes = activity[:, :need].reshape(activity.shape[0], num_frames, hop).sum(axis=-1)
    return (2 * votes > hop).astype(np.int8)


def synth_source(spec: SourceSpec, duration: float, sample_rate: int = 8000) -> tuple[np.ndarray, np.ndarray]:
    """Render ``spec`` over ``duration`` seconds; returns (waveform, activity mask)."""
    if duration < 0.5:
        raise ValueError(f"duration must be at least 0.5 s, got {duration}")
    n = int(round(duration * sample_rate))
    rng = np.random.default_rng(spec.seed)
    t = np.arange(n) / sample_rate

    vib_rate = rng.uniform(3.0, 6.0)
    f0 = spec.f0 * (1.0 + 0.02 * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    nyquist = 0.5 * sample_rate
    harmonics = np.arange(1, int(0.95 * nyquist / (spec.f0 * 1.02)) + 1)
    freqs = harmonics * spec.f0
    gains = np.full(freqs.shape, 0.02)
    for centre, width in zip(spec.formants, spec.bandwidths):
        gains += np.exp(-0.5 * ((freqs - centre) / width) ** 2)
    gains /= np.sqrt(harmonics)
    offsets = rng.uniform(0, 2 * np.pi, size=harmonics.shape)
    carrier = gains @ np.sin(np.outer(harmonics, phase) + offsets[:, None])
    carrier /= np.sqrt(np.mean(carrier ** 2))

    envelope = np.zeros(n)
    ramp = max(1, int(RAMP_SECONDS * sample_rate))
    for start_s, dur_s in spec.utterances:
        a = max(0, int(round(start_s * sample_rate)))
        b = min(n, int(round((start_s + dur_s) * sample_rate)))
        if b <= a:
            continue
        length = b - a
        shape = np.ones(length)
        r = min(ramp, length // 2)
        if r:
            rise = 0.05 + 0.95 * 0.5 * (1 - np.cos(np.pi * np.arange(r) / r))
            shape[:r] = np.minimum(shape[:r], rise)
            shape[length - r:] = np.minimum(shape[length - r:], rise[::-1])
        envelope[a:b] = np.maximum(envelope[a:b], shape)
    am = 0.675 + 0.325 * np.cos(2 * np.pi * spec.am_rate * t + rng.uniform(0, 2 * np.pi))
    envelope *= am

    active = envelope > 0.01 * envelope.max() if envelope.any() else np.zeros(n, dtype=bool)
    wave = np.where(active, carrier * envelope, 0.0)
    level = np.sqrt(np.mean(wave ** 2))
    if level > 0:
        wave *= spec.rms / level
    return wave, active


def _extent(activity: np.ndarray) -> tuple[int, int]:
    idx = np.flatnonzero(activity)
    if idx.size == 0:
        raise ValueError("a source has no active samples")
    return int(idx[0]), int(idx[-1]) + 1


def _placed_activity(acts: list[np.ndarray], delta: int, length: int) -> np.ndarray:
    out = np.zeros((len(acts), length), dtype=bool)
    for c, a in enumerate(acts):
        out[c, c * delta:c * delta + a.size] = a
    return out


def mix(sources, activities, overlap_ratio: float, noise_snr_db: float | None = None,
        duration: float | None = None, rng: np.random.Generator | None = None,
        sample_rate: int = 8000) -> MixtureSample:
    """Place sources on one timeline and sum them, plus optional white noise.

    Source ``c`` starts ``c * delta`` samples after source 0 (each source is
    first trimmed to its active extent), with ``delta`` chosen so that the
    realized overlap ratio is as close as possible to ``overlap_ratio``. All
    signals are snapped to the PCM16 grid before summing, which keeps
    ``x == sum(sources) + noise`` exact both in memory and on disk.

    Raises:
        ValueError: when no stagger can land within 5 points of the request
            for these source lengths and this mixture duration.
    """
    c_count = len(sources)
    if c_count < 1 or len(activities) != c_count:
        raise ValueError("need at least one source and one activity mask per source")
    if not 0.0 <= overlap_ratio <= 1.0:
        raise ValueError(f"overlap_ratio must lie in [0, 1], got {overlap_ratio}")
    trimmed, acts = [], []
    for s, a in zip(sources, activities):
        s, a = np.asarray(s, dtype=np.float64), np.asarray(a, dtype=bool)
        lo, hi = _extent(a)
        trimmed.append(np.where(a[lo:hi], s[lo:hi], 0.0))
        acts.append(a[lo:hi])
    n = int(round(duration * sample_rate)) if duration is not None else max(a.size for a in acts)
    longest = max(a.size for a in acts)
    if longest > n:
        raise ValueError(f"duration: a source of {longest} samples does not fit a {n}-sample mixture")

    if c_count == 1:
        delta = 0
    else:
        d_max = min((n - a.size) // c for c, a in enumerate(acts) if c > 0)

        def ratio(d):
            return overlap_fraction(_placed_activity(acts, d, n))

        lo, hi = 0, d_max
        while hi - lo > 1:  # largest delta whose ratio still reaches the target
            mid = (lo + hi) // 2
            if ratio(mid) >= overlap_ratio:
                lo = mid
            else:
                hi = mid
        delta = min((lo, hi), key=lambda d: (abs(ratio(d) - overlap_ratio), d))
        realized = ratio(delta)
        if abs(realized - overlap_ratio) > OVERLAP_TOLERANCE:
            raise ValueError(
                f"overlap_ratio {overlap_ratio:.2f} is infeasible: staggering these {c_count} sources inside "
                f"{n} samples reaches at best {realized:.3f} (achievable range "
                f"[{ratio(d_max):.3f}, {ratio(0):.3f}])")

    span = max(c * delta + a.size for c, a in enumerate(acts))
    slack = n - span
    offset = int(rng.integers(0, slack + 1)) if rng is not None else slack // 2
    placed = np.zeros((c_count, n))
    activity = np.zeros((c_count, n), dtype=bool)
    for c, (s, a) in enumerate(zip(trimmed, acts)):
        start = offset + c * delta
        placed[c, start:start + s.size] = s
        activity[c, start:start + a.size] = a

    speech = placed.sum(axis=0)
    noise = np.zeros(n)
    if noise_snr_db is not None:
        gen = rng if rng is not None else np.random.default_rng(0)
        power = np.mean(speech ** 2)
        noise = gen.standard_normal(n) * math.sqrt(power / 10 ** (noise_snr_db / 10))
    peak = np.max(np.abs(speech + noise))
    if peak > PEAK_LIMIT:
        placed *= PEAK_LIMIT / peak
        noise *= PEAK_LIMIT / peak
    placed = quantize(placed) * activity
    noise = quantize(noise)
    mixture = placed.sum(axis=0) + noise
    labels = frame_labels(activity, diarization_frames(n))
    return MixtureSample(mixture, placed, activity, labels, noise, overlap_fraction(activity), c_count,
                         requested_overlap=overlap_ratio, snr_db=noise_snr_db, sample_rate=sample_rate)


def random_specs(rng: np.random.Generator, num_speakers: int, utterances, rms_range=(0.07, 0.14)) -> list[SourceSpec]:
    """Speaker descriptors with fundamentals at least 20 Hz apart."""
    f0s: list[float] = []
    while len(f0s) < num_speakers:
        f = float(rng.uniform(90.0, 320.0))
        if all(abs(f - g) >= MIN_F0_GAP_HZ for g in f0s):
            f0s.append(f)
    specs = []
    for f0 in f0s:
        formants = (float(rng.uniform(300, 900)), float(rng.uniform(900, 2200)), float(rng.uniform(2200, 3400)))
        widths = tuple(float(w) for w in rng.uniform(120, 300, size=3))
        specs.append(SourceSpec(f0, formants, widths, tuple(utterances), rms=float(rng.uniform(*rms_range)),
                                seed=int(rng.integers(2 ** 31))))
    return specs


def _stagger_for(num_speakers: int, overlap_ratio: float, span: int) -> tuple[int, int]:
    """(utterance length, delta) filling ``span`` samples at the requested overlap."""
    if num_speakers == 1:
        return span, 0

    def ratio(d):
        length = span - (num_speakers - 1) * d
        acts = [np.ones(length, dtype=bool)] * num_speakers
        return overlap_fraction(_placed_activity(acts, d, span))

    lo, hi = 0, span // num_speakers
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ratio(mid) >= overlap_ratio:
            lo = mid
        else:
            hi = mid
    delta = min((lo, hi), key=lambda d: (abs(ratio(d) - overlap_ratio), d))
    return span - (num_speakers - 1) * delta, delta


def random_mixture(rng: np.random.Generator, num_speakers: int, overlap_ratio: float, duration: float = 2.0,
                   noise_snr_db: float | None = None, sample_rate: int = 8000) -> MixtureSample:
    n = int(round(duration * sample_rate))
    span = int(n * rng.uniform(0.75, 0.92))
    length, _ = _stagger_for(num_speakers, overlap_ratio, span)
    utterance = ((0.0, length / sample_rate),)
    specs = random_specs(rng, num_speakers, utterance)
    rendered = [synth_source(s, max(duration, 0.5), sample_rate) for s in specs]
    return mix([w for w, _ in rendered], [a for _, a in rendered], overlap_ratio, noise_snr_db, duration, rng,
               sample_rate)


@dataclass
class CorpusConfig:
    """Corpus layout. Samples cycle round-robin through (speaker count, overlap) bins within each split."""

    seed: int = 0
    sample_rate: int = 8000
    duration: float = 2.0
    num_train_dev: int = 100
    dev_fraction: float = 0.1
    num_test: int = 20
    speaker_counts: list[int] = field(default_factory=lambda: [2])
    overlap_ratios: list[float] = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    noise_snr_db: float | None = None
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.duration < 0.5:
            raise ValueError(f"duration: must be at least 0.5 s, got {self.duration}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate: must be positive, got {self.sample_rate}")
        for name in ("num_train_dev", "num_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.dev_fraction < 1.0:
            raise ValueError(f"dev_fraction: must lie in [0, 1), got {self.dev_fraction}")
        if not isinstance(self.overlap_ratios, (list, tuple)) or not self.overlap_ratios:
            raise ValueError("overlap_ratios: must be a non-empty list")
        for r in self.overlap_ratios:
            if not isinstance(r, (int, float)) or not 0.0 <= r <= 1.0:
                raise ValueError(f"overlap_ratios: every entry must be a number in [0, 1], got {r!r}")
        if not isinstance(self.speaker_counts, (list, tuple)) or not self.speaker_counts:
            raise ValueError("speaker_counts: must be a non-empty list")
        for c in self.speaker_counts:
            if not isinstance(c, int) or not 1 <= c <= 8:
                raise ValueError(f"speaker_counts: every entry must be an integer in [1, 8], got {c!r}")
        if self.workers < 1:
            raise ValueError(f"workers: must be at least 1, got {self.workers}")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def split_sizes(self) -> dict[str, int]:
        dev = int(round(self.num_train_dev * self.dev_fraction))
        return {"train": self.num_train_dev - dev, "dev": dev, "test": self.num_test}


def _plan(config: CorpusConfig) -> list[dict]:
    bins = [(c, float(r)) for c in config.speaker_counts for r in config.overlap_ratios]
    jobs, index = [], 0
    for split, size in config.split_sizes().items():
        for j in range(size):
            c, r = bins[j % len(bins)]
            jobs.append({"split": split, "index": index, "id": f"{split}{j:05d}", "num_speakers": c,
                         "overlap_ratio": r})
            index += 1
    return jobs


def _make_sample(job: dict, config: CorpusConfig, out_dir: Path) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, job["index"]]))
    sample = random_mixture(rng, job["num_speakers"], job["overlap_ratio"], config.duration, config.noise_snr_db,
                            config.sample_rate)
    rel = Path(job["split"]) / job["id"]
    folder = out_dir / rel
    folder.mkdir(parents=True, exist_ok=True)
    write_wav(folder / "mix.wav", sample.mixture, config.sample_rate)
    sources = []
    for c, s in enumerate(sample.sources, 1):
        write_wav(folder / f"s{c}.wav", s, config.sample_rate)
        sources.append(str(rel / f"s{c}.wav"))
    write_rttm(folder / "ref.rttm", sample.labels, job["id"])
    return {**job, "seed": [config.seed, job["index"]], "snr_db": config.noise_snr_db,
            "realized_overlap": round(sample.overlap_ratio, 6), "mixture": str(rel / "mix.wav"),
            "sources": sources, "rttm": str(rel / "ref.rttm"), "num_samples": int(sample.mixture.size),
            "num_frames": int(sample.labels.shape[1])}


def build_corpus(config: CorpusConfig, out_dir) -> dict:
    """Generate every split under ``out_dir`` and write ``manifest.json``.

    Sample ``i`` draws from ``SeedSequence([seed, i])``, so the corpus does
    not depend on ``config.workers``.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create corpus directory {out_dir}: {err}") from err
    jobs = _plan(config)
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            rows = list(pool.map(_make_sample, jobs, [config] * len(jobs), [out_dir] * len(jobs)))
    else:
        rows = [_make_sample(job, config, out_dir) for job in jobs]
    manifest = {"config": config.to_dict(), "samples": rows}
    write_json(out_dir / "manifest.json", manifest)
    return manifest


def load_split(corpus_dir, split: str | None = None, manifest: dict | None = None) -> list[MixtureSample]:
    """Read the mixtures, sources and RTTM labels of one split (all splits when ``split`` is None).

    Noise is recovered exactly as ``x - sum(sources)``. Sample-level activity
    is not stored on disk, so ``activity`` is None for loaded samples.
    """
    corpus_dir = Path(corpus_dir)
    manifest = manifest or read_json(corpus_dir / "manifest.json")
    rate = manifest["config"]["sample_rate"]
    out = []
    for row in manifest["samples"]:
        if split is not None and row["split"] != split:
            continue
        x = read_wav(corpus_dir / row["mixture"], rate)
        sources = np.stack([read_wav(corpus_dir / p, rate) for p in row["sources"]])
        labels = read_rttm(corpus_dir / row["rttm"], row["num_frames"], row["num_speakers"])
        out.append(MixtureSample(x, sources, None, labels, x - sources.sum(axis=0), row["realized_overlap"], row["num_speakers"],
                                 requested_overlap=row["overlap_ratio"], snr_db=row["snr_db"], sample_rate=rate,
                                 id=row["id"]))
    return out
