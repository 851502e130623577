"""Deterministic numeric kernels used by the augmenters and data generators.

All kernels are pure functions: same input, same output, no global state.
Images are float arrays shaped (H, W) or (H, W, C) with values in [0, 1];
waveforms are 1-D float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidCompressionError, ShapeError

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class StftParams:
    """Analysis window and hop in samples, fixed across sampling rates.

    Defaults correspond to 25 ms / 10 ms at a 16 kHz native rate. Keeping
    them in samples means the frame count of a resampled signal scales
    with its sampling rate, which is what makes rate modulation shrink
    the spectrogram's time axis.
    """

    window: int = 400
    hop: int = 160

    def __post_init__(self):
        if self.window < 2 or self.hop < 1:
            raise ValueError(f"bad stft params: window={self.window}, hop={self.hop}")

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window:
            raise ShapeError(
                f"waveform of {n_samples} samples is shorter than the {self.window}-sample window"
            )
        return 1 + (n_samples - self.window) // self.hop


@dataclass
class Spectrogram:
    """Log-mel energies shaped (n_banks, n_frames)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.size == 0:
            raise ShapeError(f"spectrogram must be 2-D and nonempty, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("spectrogram contains non-finite values")

    @property
    def n_banks(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize an (H, W) or (H, W, C) image with bilinear interpolation.

    Sample points follow the align-corners=false convention: output pixel
    centers map to (i + 0.5) * scale - 0.5 in source coordinates, clamped
    to the image. Channels are interpolated independently. The identity
    resize reproduces the input exactly.
    """
    if height < 1 or width < 1:
        raise ShapeError(f"target dims must be positive, got ({height}, {width})")
    img = np.asarray(img)
    if img.ndim not in (2, 3):
        raise ShapeError(f"expected (H, W) or (H, W, C) image, got shape {img.shape}")
    src_h, src_w = img.shape[:2]

    def axis_weights(n_src: int, n_dst: int):
        pos = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
        pos = np.clip(pos, 0.0, n_src - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = pos - lo
        return lo, hi, frac

    y0, y1, fy = axis_weights(src_h, height)
    x0, x1, fx = axis_weights(src_w, width)

    squeeze = img.ndim == 2
    work = img[..., None] if squeeze else img
    rows = work[y0] * (1.0 - fy)[:, None, None] + work[y1] * fy[:, None, None]
    out = rows[:, x0] * (1.0 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
    if squeeze:
        out = out[..., 0]
    return out.astype(img.dtype, copy=False)


def uniform_frame_sample(frames: np.ndarray, t: int) -> np.ndarray:
    """Pick t frames at uniformly spaced source indices floor(i * T / t)."""
    n = len(frames)
    if t < 1 or t > n:
        raise InvalidCompressionError(f"cannot sample {t} frames from {n}")
    idx = (np.arange(t, dtype=np.int64) * n) // t
    return np.asarray(frames)[idx]


def resample_audio(wave: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    """Resample a waveform by linear interpolation.

    Output length is floor(len * dst / src). Upsampling is rejected: the
    compression levels only ever lower the rate.
    """
    if dst_rate < 1 or dst_rate > src_rate:
        raise InvalidCompressionError(
            f"destination rate {dst_rate} must be in [1, {src_rate}]"
        )
    wave = np.asarray(wave)
    if wave.ndim != 1 or wave.size == 0:
        raise ShapeError(f"expected nonempty 1-D waveform, got shape {wave.shape}")
    if dst_rate == src_rate:
        return wave.copy()
    n_out = (wave.size * dst_rate) // src_rate
    pos = np.arange(n_out, dtype=np.float64) * (src_rate / dst_rate)
    lo = np.minimum(np.floor(pos).astype(np.int64), wave.size - 1)
    hi = np.minimum(lo + 1, wave.size - 1)
    frac = pos - lo
    out = wave[lo] * (1.0 - frac) + wave[hi] * frac
    return out.astype(wave.dtype, copy=False)


def stft(wave: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    """Power spectrogram of a Hann-windowed short-time Fourier transform.

    Returns (window_len // 2 + 1, n_frames) squared magnitudes with
    n_frames = 1 + floor((len - window_len) / hop).
    """
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ShapeError(f"expected 1-D waveform, got shape {wave.shape}")
    if window_len < 2 or hop < 1:
        raise ValueError(f"bad window/hop: ({window_len}, {hop})")
    if wave.size < window_len:
        raise ShapeError(
            f"waveform of {wave.size} samples is shorter than the {window_len}-sample window"
        )
    # periodic Hann window
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window_len) / window_len)
    frames = np.lib.stride_tricks.sliding_window_view(wave, window_len)[::hop]
    spectrum = np.fft.rfft(frames * window, axis=1)
    return (spectrum.real**2 + spectrum.imag**2).T


def mel_filterbank(power: np.ndarray, n_banks: int, rate: int) -> Spectrogram:
    """Apply triangular mel-spaced filterbanks and a floored log.

    Banks span [0, rate/2] with peaks equally spaced on the mel scale;
    each triangle peaks at 1 so per-frequency column sums stay <= 1.
    """
    power = np.asarray(power)
    if power.ndim != 2:
        raise ShapeError(f"expected (n_bins, n_frames) power array, got {power.shape}")
    n_bins = power.shape[0]
    if n_banks < 1 or n_banks > n_bins:
        raise ShapeError(f"n_banks must be in [1, {n_bins}], got {n_banks}")

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    window_len = 2 * (n_bins - 1)
    bin_freqs = np.arange(n_bins, dtype=np.float64) * rate / window_len
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(rate / 2.0), n_banks + 2))

    weights = np.zeros((n_banks, n_bins), dtype=np.float64)
    for b in range(n_banks):
        left, center, right = edges[b], edges[b + 1], edges[b + 2]
        rise = (bin_freqs - left) / max(center - left, 1e-12)
        fall = (right - bin_freqs) / max(right - center, 1e-12)
        weights[b] = np.clip(np.minimum(rise, fall), 0.0, 1.0)

    mel_power = weights @ power
    return Spectrogram(np.log(np.maximum(mel_power, LOG_FLOOR)))


def waveform_to_spectrogram(
    wave: np.ndarray, rate: int, n_banks: int, params: StftParams
) -> Spectrogram:
    """Convenience chain: stft then mel_filterbank at the given rate."""
    return mel_filterbank(stft(wave, params.window, params.hop), n_banks, rate)
