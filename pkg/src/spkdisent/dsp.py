"""Framed STFT log-power features and log-mel reconstruction targets."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

POWER_FLOOR = 1e-10


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FrameParams:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    def check(self, sample_rate: int) -> None:
        win, hop = self.window_samples(sample_rate), self.hop_samples(sample_rate)
        if self.fft_size < win:
            raise ValueError(f"fft_size {self.fft_size} shorter than window {win}")
        if not 0 < hop <= win:
            raise ValueError(f"hop {hop} must be in (0, window={win}]")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


def num_frames(n_samples: int, sample_rate: int, params: FrameParams) -> int:
    win, hop = params.window_samples(sample_rate), params.hop_samples(sample_rate)
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def power_spectrogram(w: Waveform, params: FrameParams = FrameParams()) -> np.ndarray:
    """One-sided power spectrum per frame, shape ``(frames, fft_size // 2 + 1)``.

    Scaled so that summing a row over bins gives the energy of the windowed
    frame: interior bins carry ``2 |X|^2 / N``, DC and Nyquist ``|X|^2 / N``.
    """
    params.check(w.sample_rate)
    win = params.window_samples(w.sample_rate)
    hop = params.hop_samples(w.sample_rate)
    n = num_frames(len(w), w.sample_rate, params)
    if n < 1:
        raise ValueError(f"waveform of {len(w)} samples shorter than one {win}-sample window")
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    frames = w.samples[idx] * np.hamming(win)[None, :]
    spec = np.fft.rfft(frames, n=params.fft_size, axis=1)
    power = (spec.real ** 2 + spec.imag ** 2) / params.fft_size
    power[:, 1:-1] *= 2.0
    return power


def stft_log_magnitude(w: Waveform, params: FrameParams = FrameParams()) -> np.ndarray:
    """Log power spectrogram floored at ``1e-10`` (the encoder input)."""
    return np.log(np.maximum(power_spectrogram(w, params), POWER_FLOOR))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(n_mels: int = 64, fft_size: int = 512, sample_rate: int = 16000,
                         fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """HTK-scale triangular filters without area normalization, ``(n_mels, bins)``."""
    if fmax is None:
        fmax = sample_rate / 2.0
    if not 0.0 <= fmin < fmax <= sample_rate / 2.0:
        raise ValueError(f"invalid band edges fmin={fmin}, fmax={fmax} at sr={sample_rate}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (center - lo)
    falling = (hi - freqs[None, :]) / (hi - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(power: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """``log(max(fb @ p, 1e-10))`` for every frame of a power spectrogram."""
    power = np.asarray(power, dtype=np.float64)
    if power.shape[-1] != fb.shape[1]:
        raise ValueError(f"power has {power.shape[-1]} bins, filterbank expects {fb.shape[1]}")
    return np.log(np.maximum(power @ fb.T, POWER_FLOOR))


def slice_segment(w: Waveform, duration_s: float, offset: int | None = None,
                  rng: np.random.Generator | None = None) -> Waveform:
    """Contiguous slice of ``duration_s`` seconds.

    ``offset`` is in samples; when omitted it is drawn uniformly from the
    valid range using ``rng``.
    """
    n = int(round(duration_s * w.sample_rate))
    if n > len(w):
        raise ValueError(f"utterance of {w.duration:.3f}s shorter than requested {duration_s}s")
    if offset is None:
        if rng is None:
            raise ValueError("either offset or rng is required")
        offset = int(rng.integers(0, len(w) - n + 1))
    if not 0 <= offset <= len(w) - n:
        raise ValueError(f"offset {offset} out of range for a {n}-sample slice")
    return Waveform(w.samples[offset:offset + n], w.sample_rate)


def read_wav(path: str | Path) -> Waveform:
    sr, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(sr))


def write_wav(path: str | Path, w: Waveform, float32: bool = True) -> None:
    if float32:
        wavfile.write(str(path), w.sample_rate, w.samples.astype(np.float32))
    else:
        pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
        wavfile.write(str(path), w.sample_rate, pcm)


class FeatureExtractor:
    """Computes both encoder inputs and log-mel targets from one STFT pass."""

    def __init__(self, sample_rate: int = 16000, params: FrameParams = FrameParams(),
                 n_mels: int = 64):
        self.sample_rate = sample_rate
        self.params = params
        self.fb = build_mel_filterbank(n_mels, params.fft_size, sample_rate)

    def __call__(self, w: Waveform) -> tuple[np.ndarray, np.ndarray]:
        if w.sample_rate != self.sample_rate:
            raise ValueError(f"expected {self.sample_rate} Hz audio, got {w.sample_rate}")
        power = power_spectrogram(w, self.params)
        return np.log(np.maximum(power, POWER_FLOOR)), log_mel(power, self.fb)

    def frames_for(self, seconds: float) -> int:
        return num_frames(int(round(seconds * self.sample_rate)), self.sample_rate, self.params)


def write_feature_csv(path: str | Path, feats: np.ndarray) -> None:
    np.savetxt(str(path), feats, delimiter=",", fmt="%.8g")
