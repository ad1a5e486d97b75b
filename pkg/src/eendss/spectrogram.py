"""Log-power spectrogram export as a grayscale PNG plus a CSV of frames."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .dsp import log_mel, stft_power

LOG_FLOOR = 1e-10


def log_power_frames(x: np.ndarray, frame_len: int = 512, hop: int = 64, n_mels: int | None = None,
                     sample_rate: int = 8000) -> np.ndarray:
    """(frames, bins) log10 power, on linear DFT bins or ``n_mels`` mel bands."""
    power = stft_power(np.asarray(x, dtype=np.float64), frame_len, hop)
    if n_mels:
        return log_mel(power, n_mels, sample_rate).values / np.log(10.0)
    return np.log10(np.maximum(power.values, LOG_FLOOR))


def to_image(frames: np.ndarray) -> Image.Image:
    """Grayscale image of height ``bins`` and width ``frames``, low frequencies at the bottom.

    Values map linearly from the array minimum (black) to its maximum
    (white); a constant array renders uniformly black.
    """
    lo, hi = float(frames.min()), float(frames.max())
    scaled = np.zeros_like(frames) if hi <= lo else (frames - lo) / (hi - lo)
    pixels = np.round(255 * scaled).astype(np.uint8).T[::-1]
    return Image.fromarray(np.ascontiguousarray(pixels), mode="L")


def write_spectrogram(x: np.ndarray, png_path, csv_path, **kwargs) -> np.ndarray:
    frames = log_power_frames(x, **kwargs)
    to_image(frames).save(png_path)
    np.savetxt(csv_path, frames, delimiter=",", fmt="%.6f")
    return frames
