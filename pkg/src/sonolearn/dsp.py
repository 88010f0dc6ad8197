"""Signal-processing front end: waveforms to mel spectrograms and envelopes.

Everything here is a pure function of its inputs. The pipeline rate is
11025 Hz (44100 / 4, exact integer decimation); the default clip length is
4 s, so a preprocessed channel is 44100 samples long, which an STFT of
window 400 / hop 160 turns into 274 frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_positive_int, check_spectrogram_batch

RAW_RATE = 44100
DECIMATION = 4
PIPELINE_RATE = RAW_RATE // DECIMATION  # 11025 Hz
CLIP_SECONDS = 4.0
STFT_WINDOW = 400
STFT_HOP = 160
N_MELS = 16
ENVELOPE_FRAME = 256
STD_FLOOR = 1e-6

_FIR_TAPS = 127
_FIR_CUTOFF_FRAC = 0.45  # of the output Nyquist


@dataclass
class AudioClip:
    """Multichannel waveform: samples is (channels, n), amplitudes in [-1, 1].

    Raw audio is stored float32 (matching the on-disk WAV format); float64 is
    preserved so the decimated pipeline signal keeps full precision, which
    the mel power-scaling law relies on.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.dtype not in (np.float32, np.float64):
            self.samples = self.samples.astype(np.float32)
        if self.samples.ndim == 1:
            self.samples = self.samples[None, :]
        if self.samples.ndim != 2 or self.samples.shape[0] == 0:
            raise ValueError(
                f"clip samples must be (channels, n) with >= 1 channel, "
                f"got shape {self.samples.shape}"
            )
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def channels(self):
        return self.samples.shape[0]

    @property
    def n_samples(self):
        return self.samples.shape[1]


@dataclass
class MelSpectrogram:
    """Per-channel mel power spectrogram: values is (channels, n_mels, n_frames)."""

    values: np.ndarray
    n_mels: int
    frame_hop: int
    source_rate: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError(f"values must be 3-d, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("spectrogram contains non-finite values")


@dataclass
class ChannelStats:
    """Per-channel scalar mean/std of mel power values over a fitting set."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("channel std must be strictly positive")


@dataclass
class Envelope:
    """Per-channel amplitude envelope: values is (channels, n_frames), >= 0."""

    values: np.ndarray
    frame_len: int


def pad_clip(clip: AudioClip, target_len: int) -> AudioClip:
    """Truncate or zero-pad every channel at the end to exactly target_len."""
    target_len = check_positive_int(target_len, "target_len")
    x = clip.samples
    if x.shape[1] >= target_len:
        out = x[:, :target_len]
    else:
        out = np.zeros((x.shape[0], target_len), dtype=x.dtype)
        out[:, : x.shape[1]] = x
    return AudioClip(out.copy(), clip.sample_rate)


def design_antialias_fir(factor: int) -> np.ndarray:
    """Windowed-sinc low-pass for decimation by ``factor``.

    127 taps, Hamming window, cutoff at 0.45x the output Nyquist, normalized
    to unit DC gain. Linear phase, so ``same``-mode convolution is delay-free.
    """
    factor = check_positive_int(factor, "factor")
    n = np.arange(_FIR_TAPS, dtype=np.float64)
    center = (_FIR_TAPS - 1) / 2.0
    # cutoff as a fraction of the input sample rate
    fc = _FIR_CUTOFF_FRAC * (0.5 / factor)
    h = 2.0 * fc * np.sinc(2.0 * fc * (n - center))
    h *= np.hamming(_FIR_TAPS)
    return h / h.sum()


def resample_down(clip: AudioClip, factor: int) -> AudioClip:
    """Anti-alias low-pass then keep every factor-th sample.

    Output length is floor(n / factor); the trailing remainder is dropped.
    """
    factor = check_positive_int(factor, "factor")
    h = design_antialias_fir(factor)
    x = clip.samples.astype(np.float64)
    filtered = fftconvolve(x, h[None, :], mode="same", axes=1)
    out_len = x.shape[1] // factor
    # keep float64: quantizing here would bury the stopband residue under
    # rounding noise and break the mel power-scaling law
    out = np.ascontiguousarray(filtered[:, : out_len * factor : factor])
    return AudioClip(out, clip.sample_rate // factor)


def stft_power(channel: np.ndarray, window_len: int = STFT_WINDOW, hop: int = STFT_HOP) -> np.ndarray:
    """Hann-windowed magnitude-squared STFT, no center padding.

    Returns (window_len // 2 + 1, 1 + floor((n - window_len) / hop)).
    """
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 1:
        raise ValueError(f"channel must be 1-d, got shape {channel.shape}")
    window_len = check_positive_int(window_len, "window_len")
    hop = check_positive_int(hop, "hop")
    n = channel.shape[0]
    if n < window_len:
        raise ValueError(f"signal length {n} is shorter than window_len {window_len}")
    n_frames = 1 + (n - window_len) // hop
    # periodic Hann
    w = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(window_len) / window_len))
    idx = np.arange(window_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = channel[idx] * w[None, :]
    spec = np.fft.rfft(frames, axis=1)
    return (spec.real**2 + spec.imag**2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft_bins: int = STFT_WINDOW // 2 + 1,
                   sample_rate: int = PIPELINE_RATE) -> np.ndarray:
    """Triangular mel filters, peak 1, on FFT bin frequencies.

    Centers are equally spaced on the mel scale between 0 and Nyquist.
    Raises if any filter would cover no FFT bin.
    """
    n_mels = check_positive_int(n_mels, "n_mels")
    if sample_rate <= 0:
        raise ValueError(f"sample_rate must be positive, got {sample_rate}")
    n_fft = 2 * (n_fft_bins - 1)
    freqs = np.arange(n_fft_bins, dtype=np.float64) * sample_rate / n_fft
    mel_pts = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_fft_bins))
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (freqs - lo) / (ctr - lo)
        falling = (hi - freqs) / (hi - ctr)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
        if not np.any(fb[m] > 0):
            raise ValueError(
                f"mel filter {m} is empty: {n_mels} filters exceed the "
                f"resolution of {n_fft_bins} FFT bins at {sample_rate} Hz"
            )
    return fb


def mel_spectrogram(clip: AudioClip, n_mels: int = N_MELS,
                    window_len: int = STFT_WINDOW, hop: int = STFT_HOP) -> MelSpectrogram:
    """Mel power spectrogram per channel: filterbank @ stft_power."""
    fb = mel_filterbank(n_mels, window_len // 2 + 1, clip.sample_rate)
    values = np.stack([fb @ stft_power(ch, window_len, hop) for ch in clip.samples])
    return MelSpectrogram(values, n_mels=n_mels, frame_hop=hop, source_rate=clip.sample_rate)


def preprocess_clip(clip: AudioClip, duration_s: float = CLIP_SECONDS,
                    factor: int = DECIMATION) -> AudioClip:
    """Standard front end: pad/clip at the raw rate, then decimate."""
    padded = pad_clip(clip, int(round(duration_s * clip.sample_rate)))
    return resample_down(padded, factor)


def fit_channel_stats(specs) -> ChannelStats:
    """Channel-wise scalar mean/std over a collection of spectrograms.

    Degenerate channels get their std floored at 1e-6 so normalization of a
    silent channel collapses to zero instead of exploding.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("cannot fit channel stats on an empty collection")
    values = np.stack([s.values if isinstance(s, MelSpectrogram) else np.asarray(s) for s in specs])
    mean = values.mean(axis=(0, 2, 3), dtype=np.float64)
    std = values.std(axis=(0, 2, 3), dtype=np.float64)
    return ChannelStats(mean=mean, std=np.maximum(std, STD_FLOOR))


def apply_normalization(spec: MelSpectrogram, stats: ChannelStats) -> MelSpectrogram:
    """Per-channel (x - mean) / std."""
    values = (spec.values - stats.mean[:, None, None]) / stats.std[:, None, None]
    return MelSpectrogram(values, spec.n_mels, spec.frame_hop, spec.source_rate)


def amplitude_envelope(clip: AudioClip, frame_len: int = ENVELOPE_FRAME) -> Envelope:
    """Per-channel max |s| over non-overlapping frames; partial tail dropped."""
    frame_len = check_positive_int(frame_len, "frame_len")
    n = clip.n_samples
    if frame_len > n:
        raise ValueError(f"frame_len {frame_len} exceeds clip length {n}")
    n_frames = n // frame_len
    x = np.abs(clip.samples[:, : n_frames * frame_len])
    values = x.reshape(clip.channels, n_frames, frame_len).max(axis=2)
    return Envelope(values=values.astype(np.float64), frame_len=frame_len)


class SpectrogramNormalizer(BaseEstimator, TransformerMixin):
    """Channel-wise standardizer for batched mel spectrograms.

    Fit on the training split only; transform maps (n, channels, mels, frames)
    batches to roughly zero-mean/unit-std per channel.
    """

    def __init__(self, std_floor=STD_FLOOR):
        self.std_floor = std_floor

    def fit(self, X, y=None):
        X = check_spectrogram_batch(X)
        self.mean_ = X.mean(axis=(0, 2, 3), dtype=np.float64)
        self.std_ = np.maximum(X.std(axis=(0, 2, 3), dtype=np.float64), self.std_floor)
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_spectrogram_batch(X)
        if X.shape[1] != self.mean_.shape[0]:
            raise ValueError(
                f"X has {X.shape[1]} channels, normalizer was fit on {self.mean_.shape[0]}"
            )
        return (X - self.mean_[None, :, None, None]) / self.std_[None, :, None, None]

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_spectrogram_batch(X)
        return X * self.std_[None, :, None, None] + self.mean_[None, :, None, None]

    @property
    def stats_(self):
        check_is_fitted(self, "mean_")
        return ChannelStats(mean=self.mean_, std=self.std_)
