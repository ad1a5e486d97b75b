"""Evaluation metrics: DER, SI-SDR(i), SDR(i), STOI and speaker counting accuracy.

Everything here is plain float64 numpy and has no autograd dependency.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_toeplitz
from scipy.optimize import linear_sum_assignment
from scipy.signal import fftconvolve, resample_poly

from .audio_io import write_json
from .diarization import median_filter_binary

SDR_EPS = 1e-8
SDR_CLAMP_DB = 60.0
SDR_TAPS = 512
SDR_RIDGE = 1e-8
SILENT_AMPLITUDE = 1e-6
FRAME_SHIFT = 0.008


# --------------------------------------------------------------------------- DER


@dataclass
class DERResult:
    """Frame counts and percentages; ``der`` is NaN when the reference has no speech."""

    miss_frames: int
    false_alarm_frames: int
    confusion_frames: int
    speech_frames: int
    mapping: dict[int, int] = field(default_factory=dict)  # hyp row -> ref row

    def _pct(self, n):
        return 100.0 * n / self.speech_frames if self.speech_frames else math.nan

    @property
    def miss(self) -> float:
        return self._pct(self.miss_frames)

    @property
    def false_alarm(self) -> float:
        return self._pct(self.false_alarm_frames)

    @property
    def confusion(self) -> float:
        return self._pct(self.confusion_frames)

    @property
    def der(self) -> float:
        return self._pct(self.miss_frames + self.false_alarm_frames + self.confusion_frames)

    @property
    def defined(self) -> bool:
        return self.speech_frames > 0


def _scored_frames(ref: np.ndarray, collar: float, frame_shift: float) -> np.ndarray:
    """Mask of frames outside the no-score collar around reference boundaries."""
    frames = ref.shape[1]
    keep = np.ones(frames, dtype=bool)
    width = int(round(collar / frame_shift))
    if width <= 0:
        return keep
    for row in ref:
        edges = np.flatnonzero(np.diff(np.concatenate([[0], row, [0]])) != 0)
        for e in edges:
            keep[max(0, e - width):min(frames, e + width)] = False
    return keep


def der(ref, hyp, collar: float = 0.0, median_frames: int = 11, frame_shift: float = FRAME_SHIFT) -> DERResult:
    """Frame-level diarization error rate.

    The hypothesis is median filtered, then mapped one-to-one onto reference
    speakers by a Hungarian assignment maximising co-active frames. Extra
    hypothesis speakers surface as false alarm, missing ones as miss.

    Args:
        ref: (C, T) binary reference labels.
        hyp: (C_hat, T) binary hypothesis labels; either count may be zero.
        collar: seconds around each reference boundary excluded from scoring.
        median_frames: hypothesis median filter width (1 disables it).
    """
    ref = np.asarray(ref).astype(np.int64).reshape(-1, np.shape(ref)[-1])
    hyp = np.asarray(hyp).astype(np.int64)
    hyp = hyp.reshape(-1, hyp.shape[-1]) if hyp.size else np.zeros((0, ref.shape[1]), dtype=np.int64)
    if ref.shape[1] != hyp.shape[1]:
        raise ValueError(f"reference has {ref.shape[1]} frames, hypothesis has {hyp.shape[1]}")
    if hyp.shape[0] and median_frames > 1:
        hyp = median_filter_binary(hyp, median_frames).astype(np.int64)
    keep = _scored_frames(ref, collar, frame_shift)
    ref, hyp = ref[:, keep], hyp[:, keep]
    n_ref, n_hyp = ref.sum(axis=0), hyp.sum(axis=0)
    mapping = {}
    correct = 0
    if ref.shape[0] and hyp.shape[0]:
        coactive = hyp @ ref.T  # (C_hat, C)
        rows, cols = linear_sum_assignment(coactive, maximize=True)
        mapping = {int(r): int(c) for r, c in zip(rows, cols)}
        correct = int(coactive[rows, cols].sum())
    miss = int(np.maximum(n_ref - n_hyp, 0).sum())
    fa = int(np.maximum(n_hyp - n_ref, 0).sum())
    confusion = int(np.minimum(n_ref, n_hyp).sum()) - correct
    return DERResult(miss, fa, confusion, int(n_ref.sum()), mapping)


# --------------------------------------------------------------------------- SI-SDR / SDR


def _ratio_db(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.clip(10.0 * np.log10((num + SDR_EPS) / (den + SDR_EPS)), -SDR_CLAMP_DB, SDR_CLAMP_DB)


def si_sdr(estimate, reference) -> np.ndarray:
    """SI-SDR in dB along the last axis (same epsilon and clamp as the training loss).

    Leading axes broadcast.
    """
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape[-1] != ref.shape[-1]:
        raise ValueError(f"estimate {est.shape} and reference {ref.shape} differ in length")
    est, ref = np.broadcast_arrays(est, ref)
    energy = np.sum(ref * ref, axis=-1, keepdims=True)
    if np.any(energy == 0):
        raise ValueError("SI-SDR is undefined for an all-zero reference")
    target = np.sum(est * ref, axis=-1, keepdims=True) / energy * ref
    return _ratio_db(np.sum(target ** 2, axis=-1), np.sum((est - target) ** 2, axis=-1))


def si_sdr_improvement(estimate, reference, mixture) -> np.ndarray:
    reference = np.asarray(reference, dtype=np.float64)
    mixture = np.broadcast_to(np.asarray(mixture, dtype=np.float64), reference.shape)
    return si_sdr(estimate, reference) - si_sdr(mixture, reference)


def _projection_target(est: np.ndarray, ref: np.ndarray, taps: int) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares FIR projection of ``est`` onto delayed copies of ``ref``.

    Returns (target, padded estimate), both of length len + taps - 1.
    """
    n = ref.size
    size = 1 << int(np.ceil(np.log2(n + taps)))
    r_spec = np.fft.rfft(ref, size)
    auto = np.fft.irfft(r_spec * np.conj(r_spec), size)[:taps]
    cross = np.fft.irfft(np.fft.rfft(est, size) * np.conj(r_spec), size)[:taps]
    auto[0] += SDR_RIDGE
    h = solve_toeplitz(auto, cross)
    target = fftconvolve(ref, h)
    return target, np.pad(est, (0, taps - 1))


def sdr(estimate, reference, taps: int = SDR_TAPS) -> float:
    """BSS-eval style SDR with a ``taps``-long distortion filter, in dB, clamped to +/-60."""
    est = np.asarray(estimate, dtype=np.float64).reshape(-1)
    ref = np.asarray(reference, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise ValueError(f"estimate {est.shape} and reference {ref.shape} differ in shape")
    if not np.any(ref):
        raise ValueError("SDR is undefined for an all-zero reference")
    target, padded = _projection_target(est, ref, taps)
    return float(_ratio_db(np.sum(target ** 2), np.sum((padded - target) ** 2)))


def sdr_improvement(estimate, reference, mixture, taps: int = SDR_TAPS) -> float:
    return sdr(estimate, reference, taps) - sdr(mixture, reference, taps)


# --------------------------------------------------------------------------- STOI

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE = 40.0
STOI_DEGENERATE = 1e-5
_EPS = np.finfo(np.float64).eps


def third_octave_matrix(fs: int = STOI_FS, nfft: int = STOI_NFFT, bands: int = STOI_BANDS,
                        min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    """(bands, nfft // 2 + 1) 0/1 matrix grouping DFT bins into one-third-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(bands, dtype=np.float64)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((bands, f.size))
    for i in range(bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    starts = np.arange(0, x.size - size, hop)
    window = np.hanning(size + 2)[1:-1]
    return x[starts[:, None] + np.arange(size)] * window


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    count, size = frames.shape
    out = np.zeros((count - 1) * hop + size) if count else np.zeros(0)
    for i, frame in enumerate(frames):
        out[i * hop:i * hop + size] += frame
    return out


def stoi(estimate, reference, sample_rate: int = 8000) -> float:
    """Short-time objective intelligibility of ``estimate`` against the clean ``reference``.

    Signals are resampled to 10 kHz, frames more than 40 dB below the loudest
    reference frame are dropped, and clipped one-third-octave envelope
    correlations over 384 ms segments are averaged. When fewer than one
    segment of non-silent frames survives, a warning is issued and
    ``1e-5`` is returned, as the reference implementation does.
    """
    est = np.asarray(estimate, dtype=np.float64).reshape(-1)
    ref = np.asarray(reference, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise ValueError(f"estimate {est.shape} and reference {ref.shape} differ in shape")
    if ref.size < 0.384 * sample_rate:
        raise ValueError(f"STOI needs at least 384 ms of signal, got {ref.size / sample_rate * 1000:.0f} ms")
    if sample_rate != STOI_FS:
        g = math.gcd(STOI_FS, sample_rate)
        ref = resample_poly(ref, STOI_FS // g, sample_rate // g)
        est = resample_poly(est, STOI_FS // g, sample_rate // g)

    hop = STOI_FRAME // 2
    ref_f, est_f = _frames(ref, STOI_FRAME, hop), _frames(est, STOI_FRAME, hop)
    energy = 20 * np.log10(np.linalg.norm(ref_f, axis=1) + _EPS)
    keep = energy > energy.max() - STOI_DYN_RANGE
    ref, est = _overlap_add(ref_f[keep], hop), _overlap_add(est_f[keep], hop)

    obm = third_octave_matrix()
    ref_tob = np.sqrt(obm @ (np.abs(np.fft.rfft(_frames(ref, STOI_FRAME, hop), STOI_NFFT)) ** 2).T)
    est_tob = np.sqrt(obm @ (np.abs(np.fft.rfft(_frames(est, STOI_FRAME, hop), STOI_NFFT)) ** 2).T)
    n_frames = ref_tob.shape[1]
    if n_frames < STOI_SEGMENT:
        warnings.warn(f"only {n_frames} non-silent frames remain; STOI needs {STOI_SEGMENT}, returning 1e-5")
        return STOI_DEGENERATE

    idx = np.arange(STOI_SEGMENT, n_frames + 1)[:, None] + np.arange(-STOI_SEGMENT, 0)
    x = ref_tob[:, idx].transpose(1, 0, 2)  # (segments, bands, N)
    y = est_tob[:, idx].transpose(1, 0, 2)
    y = y * (np.linalg.norm(x, axis=2, keepdims=True) / (np.linalg.norm(y, axis=2, keepdims=True) + _EPS))
    y = np.minimum(y, x * (1 + 10 ** (-STOI_BETA_DB / 20)))
    x = x - x.mean(axis=2, keepdims=True)
    y = y - y.mean(axis=2, keepdims=True)
    x /= np.linalg.norm(x, axis=2, keepdims=True) + _EPS
    y /= np.linalg.norm(y, axis=2, keepdims=True) + _EPS
    return float(np.sum(x * y) / (x.shape[0] * x.shape[1]))


# --------------------------------------------------------------------------- counting and padding


def pad_for_count_mismatch(refs, ests, amplitude: float = SILENT_AMPLITUDE) -> tuple[np.ndarray, np.ndarray]:
    """Append constant ``amplitude`` signals to the shorter list so both hold max(C, C_hat) rows."""
    refs = [np.asarray(r, dtype=np.float64) for r in refs]
    ests = [np.asarray(e, dtype=np.float64) for e in ests]
    if not refs and not ests:
        raise ValueError("both the reference and the estimate lists are empty")
    length = (refs or ests)[0].size
    for sig in refs + ests:
        if sig.size != length:
            raise ValueError(f"all signals must share one length, got {sig.size} and {length}")
    k = max(len(refs), len(ests))
    silent = np.full(length, amplitude)
    refs = refs + [silent.copy() for _ in range(k - len(refs))]
    ests = ests + [silent.copy() for _ in range(k - len(ests))]
    return np.stack(refs), np.stack(ests)


def speaker_counting_accuracy(pairs) -> float:
    """Percentage of (C, C_hat) pairs with C_hat == C."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("speaker counting accuracy needs at least one utterance")
    return 100.0 * sum(int(c == c_hat) for c, c_hat in pairs) / len(pairs)


def best_source_permutation(ests: np.ndarray, refs: np.ndarray) -> tuple[int, ...]:
    """Permutation ``perm`` (estimate i scored against ref perm[i]) maximising mean SI-SDR."""
    k = refs.shape[0]
    scores = si_sdr(ests[:, None, :], refs[None, :, :])
    return max(itertools.permutations(range(k)), key=lambda p: (scores[np.arange(k), list(p)].sum(), [-v for v in p]))


# --------------------------------------------------------------------------- reports


@dataclass
class UtteranceMetrics:
    id: str
    num_speakers: int
    est_speakers: int
    overlap_ratio: float
    der: float
    miss: float
    false_alarm: float
    confusion: float
    speech_frames: int
    error_frames: int
    si_sdri: float
    sdri: float
    stoi: float


def score_utterance(utt_id: str, mixture, ref_sources, est_sources, ref_labels, hyp_labels,
                    overlap_ratio: float = math.nan, sample_rate: int = 8000,
                    median_frames: int = 11) -> UtteranceMetrics:
    """All metrics for one utterance, padding with silent signals when counts differ."""
    d = der(ref_labels, hyp_labels, median_frames=median_frames)
    refs, ests = pad_for_count_mismatch(list(ref_sources), list(est_sources))
    perm = best_source_permutation(ests, refs)
    refs = refs[list(perm)]
    x = np.asarray(mixture, dtype=np.float64)
    si = float(np.mean(si_sdr_improvement(ests, refs, x)))
    sd = float(np.mean([sdr_improvement(e, r, x) for e, r in zip(ests, refs)]))
    st = float(np.mean([stoi(e, r, sample_rate) for e, r in zip(ests, refs)]))
    return UtteranceMetrics(utt_id, len(ref_sources), len(est_sources), float(overlap_ratio), d.der, d.miss,
                            d.false_alarm, d.confusion, d.speech_frames,
                            d.miss_frames + d.false_alarm_frames + d.confusion_frames, si, sd, st)


def _aggregate(rows: list[UtteranceMetrics]) -> dict:
    speech = sum(r.speech_frames for r in rows)
    errors = sum(r.error_frames for r in rows)
    return {
        "utterances": len(rows),
        "der": 100.0 * errors / speech if speech else math.nan,
        "si_sdri": float(np.mean([r.si_sdri for r in rows])) if rows else math.nan,
        "sdri": float(np.mean([r.sdri for r in rows])) if rows else math.nan,
        "stoi": float(np.mean([r.stoi for r in rows])) if rows else math.nan,
        "sca": speaker_counting_accuracy((r.num_speakers, r.est_speakers) for r in rows) if rows else math.nan,
    }


CSV_FIELDS = [f for f in UtteranceMetrics.__dataclass_fields__]


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(value)


@dataclass
class MetricsReport:
    """Per-utterance rows plus corpus aggregates; corpus DER pools frames over utterances."""

    utterances: list[UtteranceMetrics]

    @property
    def aggregate(self) -> dict:
        return _aggregate(self.utterances)

    def per_overlap(self) -> list[dict]:
        bins = sorted({round(u.overlap_ratio, 6) for u in self.utterances})
        return [{"overlap_ratio": b, **_aggregate([u for u in self.utterances if round(u.overlap_ratio, 6) == b])}
                for b in bins]

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for u in self.utterances:
            w.writerow([_fmt(getattr(u, f)) for f in CSV_FIELDS])
        agg = self.aggregate
        w.writerow(["ALL", "", "", "", _fmt(agg["der"]), "", "", "", "", "", _fmt(agg["si_sdri"]),
                    _fmt(agg["sdri"]), _fmt(agg["stoi"])])
        return out.getvalue()

    def per_overlap_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        cols = ["overlap_ratio", "utterances", "der", "si_sdri", "sdri", "stoi", "sca"]
        w.writerow(cols)
        for row in self.per_overlap():
            w.writerow([_fmt(float(row[c])) if c != "utterances" else row[c] for c in cols])
        return out.getvalue()

    def to_dict(self) -> dict:
        return {"aggregate": self.aggregate, "per_overlap": self.per_overlap(),
                "utterances": [asdict(u) for u in self.utterances]}

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text(self.to_csv())
        (out_dir / "per_overlap.csv").write_text(self.per_overlap_csv())
        write_json(out_dir / "metrics.json", self.to_dict())
