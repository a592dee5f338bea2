"""Time-frequency transforms: resampling, STFT, magnitude and ISTFT.

All transforms run in float64. Frames are centred (reflect padding of half a
window on each side) and use a periodic Hann window at 50% overlap, which
satisfies the constant-overlap-add condition and gives exact reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.signal import resample_poly


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 2:
            # multi-channel input is averaged down to mono
            x = x.mean(axis=1)
        if x.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {x.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    bins: np.ndarray  # F x N complex
    window_len: int
    hop: int
    sample_rate: int
    length: int | None = None  # original waveform length, when known

    @property
    def shape(self):
        return self.bins.shape

    def with_bins(self, bins: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(bins, self.window_len, self.hop, self.sample_rate, self.length)


@dataclass(frozen=True)
class MagnitudeSpectrogram:
    mags: np.ndarray  # F x N, non-negative
    window_len: int
    hop: int
    sample_rate: int
    length: int | None = None

    @property
    def shape(self):
        return self.mags.shape


def hann(window_len: int) -> np.ndarray:
    """Periodic Hann window (sums to a constant at hop = window_len / 2)."""
    n = np.arange(window_len)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window_len)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited (polyphase windowed-sinc) resampling to ``target_rate``."""
    if len(w) == 0:
        raise ValueError("empty waveform")
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(int(target_rate), int(w.sample_rate))
    y = resample_poly(w.samples, ratio.numerator, ratio.denominator)
    n_out = int(round(len(w) * target_rate / w.sample_rate))
    return Waveform(y[:n_out], int(target_rate))


def _check_framing(window_len: int, hop: int):
    if window_len <= 0 or window_len % 2:
        raise ValueError(f"window_len must be a positive even number, got {window_len}")
    if hop != window_len // 2:
        raise ValueError(f"hop must equal window_len/2 ({window_len // 2}), got {hop}")


def n_frames(length: int, hop: int) -> int:
    return length // hop + 1


def stft(w: Waveform, window_len: int, hop: int) -> ComplexSpectrogram:
    _check_framing(window_len, hop)
    x = w.samples
    if len(x) < hop:
        raise ValueError(f"waveform shorter than one hop ({len(x)} < {hop} samples)")
    pad = window_len // 2
    xp = np.pad(x, pad, mode="reflect")
    n = n_frames(len(x), hop)
    frames = np.lib.stride_tricks.sliding_window_view(xp, window_len)[::hop][:n]
    bins = np.fft.rfft(frames * hann(window_len), axis=1).T
    return ComplexSpectrogram(np.ascontiguousarray(bins), window_len, hop, w.sample_rate, len(x))


def istft(s: ComplexSpectrogram, length: int | None = None) -> Waveform:
    """Weighted overlap-add inverse with Hann synthesis window.

    The output is trimmed to ``length`` (or the length recorded on the
    spectrogram); otherwise it spans ``(N - 1) * hop`` samples.
    """
    window_len, hop = s.window_len, s.hop
    _check_framing(window_len, hop)
    n_bins, n = s.bins.shape
    if n_bins != window_len // 2 + 1:
        raise ValueError(f"spectrogram has {n_bins} bins, expected {window_len // 2 + 1} "
                         f"for window_len={window_len}")
    win = hann(window_len)
    frames = np.fft.irfft(s.bins.T, n=window_len, axis=1) * win
    total = (n - 1) * hop + window_len
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n):
        out[i * hop:i * hop + window_len] += frames[i]
        norm[i * hop:i * hop + window_len] += win ** 2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    pad = window_len // 2
    if length is None:
        length = s.length if s.length is not None else (n - 1) * hop
    y = out[pad:pad + length]
    if len(y) < length:
        y = np.pad(y, (0, length - len(y)))
    return Waveform(y, s.sample_rate)


def magnitude(s: ComplexSpectrogram) -> MagnitudeSpectrogram:
    return MagnitudeSpectrogram(np.abs(s.bins), s.window_len, s.hop, s.sample_rate, s.length)
