"""WAV, RTTM and manifest I/O.

Audio is RIFF PCM16 mono. Diarization labels travel as RTTM with one
segment per run of consecutive active frames; with an 8 ms frame hop every
timestamp is a whole number of frames, so the conversion round-trips.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.io import wavfile

PCM_SCALE = 32768.0


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap float samples onto the PCM16 grid (values stay float64).

    The grid step is a power of two, so sums of quantized signals are exact.
    """
    return np.round(np.asarray(x, dtype=np.float64) * PCM_SCALE) / PCM_SCALE


def write_wav(path, x: np.ndarray, sample_rate: int = 8000):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{path}: expected a mono signal, got shape {x.shape}")
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak * PCM_SCALE > 32767.5:
        raise ValueError(f"{path}: samples exceed full scale (peak {peak:.4f})")
    path = Path(path)
    try:
        wavfile.write(path, sample_rate, np.round(x * PCM_SCALE).astype(np.int16))
    except OSError as err:
        raise OSError(f"cannot write {path}: {err}") from err


def read_wav(path, sample_rate: int | None = 8000) -> np.ndarray:
    """Read a mono PCM16 file as float64 in [-1, 1]."""
    try:
        rate, data = wavfile.read(Path(path))
    except (OSError, ValueError) as err:
        raise OSError(f"cannot read {path}: {err}") from err
    if sample_rate is not None and rate != sample_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {sample_rate} Hz")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype != np.int16:
        raise ValueError(f"{path}: expected PCM16 samples, got {data.dtype}")
    return data.astype(np.float64) / PCM_SCALE


def labels_to_segments(labels: np.ndarray) -> list[tuple[int, int, int]]:
    """(speaker, start_frame, n_frames) for every run of ones, speaker-major."""
    labels = np.asarray(labels).astype(bool)
    segments = []
    for spk, row in enumerate(labels):
        padded = np.concatenate([[False], row, [False]])
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        for start, stop in zip(edges[::2], edges[1::2]):
            segments.append((spk, int(start), int(stop - start)))
    return segments


def write_rttm(path, labels: np.ndarray, file_id: str, frame_shift: float = 0.008):
    lines = [f"SPEAKER {file_id} 1 {start * frame_shift:.3f} {n * frame_shift:.3f} <NA> <NA> spk{spk + 1} <NA> <NA>"
             for spk, start, n in labels_to_segments(labels)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_rttm(path, num_frames: int, num_speakers: int | None = None,
              frame_shift: float = 0.008) -> np.ndarray:
    """Frame labels (C, num_frames) from an RTTM file.

    Speakers are ordered by their ``spkN`` index when the names follow that
    pattern, otherwise by first appearance.
    """
    rows: dict[str, list[tuple[int, int]]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if fields[0] != "SPEAKER" or len(fields) < 8:
            raise ValueError(f"{path}:{lineno}: not an RTTM SPEAKER line")
        start = int(round(float(fields[3]) / frame_shift))
        n = int(round(float(fields[4]) / frame_shift))
        rows.setdefault(fields[7], []).append((start, n))

    def order(name):
        return (0, int(name[3:])) if name.startswith("spk") and name[3:].isdigit() else (1, 0)

    names = sorted(rows, key=order)
    count = len(names) if num_speakers is None else num_speakers
    if count < len(names):
        raise ValueError(f"{path}: {len(names)} speakers but only {count} rows requested")
    labels = np.zeros((count, num_frames), dtype=np.int8)
    for i, name in enumerate(names):
        for start, n in rows[name]:
            labels[i, start:min(start + n, num_frames)] = 1
    return labels


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as err:
        raise OSError(f"cannot read {path}: {err}") from err
