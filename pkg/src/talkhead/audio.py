"""Log-mel filterbank (fbank) features for 16 kHz mono speech."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
WINDOW = 320  # 20 ms
HOP = 160  # 10 ms
N_FFT = 512
N_MELS = 80
LOG_FLOOR = 1e-10


class AudioError(ValueError):
    pass


class InputLengthError(AudioError):
    pass


class UnsupportedFormatError(AudioError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate_hz != SAMPLE_RATE:
            raise UnsupportedFormatError(
                f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))


@dataclass(frozen=True)
class FbankSequence:
    frames: np.ndarray  # T x n_mels
    frame_shift_ms: int = 10
    frame_length_ms: int = 20

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]


def num_frames(num_samples: int, window: int = WINDOW, hop: int = HOP) -> int:
    if num_samples < window:
        raise InputLengthError(f"need at least {window} samples, got {num_samples}")
    return (num_samples - window) // hop + 1


def frame_signal(samples: np.ndarray, window: int = WINDOW, hop: int = HOP) -> np.ndarray:
    n = num_frames(len(samples), window, hop)
    idx = np.arange(window)[None, :] + hop * np.arange(n)[:, None]
    return samples[idx]


def stft_power(w: Waveform, window: int = WINDOW, hop: int = HOP, n_fft: int = N_FFT) -> np.ndarray:
    """Hann-windowed |FFT|^2 per frame, shape ``T x (n_fft//2 + 1)``."""
    frames = frame_signal(w.samples, window, hop) * np.hanning(window + 1)[:-1]
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, f_min: float = 0.0, f_max: float = 8000.0) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int = N_MELS, f_min: float = 0.0, f_max: float = 8000.0,
                   n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters with centres uniform on the mel scale.

    Neighbouring triangles share edges, so every FFT bin falls under at most
    two filters.  Filters too narrow to contain a bin centre fall back to the
    nearest bin so that no row is empty.
    """
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, bins.size))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
        if fb[i].sum() == 0.0:
            fb[i, int(np.argmin(np.abs(bins - mid)))] = 1.0
    return fb


def fbank(w: Waveform, n_mels: int = N_MELS, floor: float = LOG_FLOOR, n_fft: int = N_FFT) -> FbankSequence:
    power = stft_power(w, n_fft=n_fft)
    mel = power @ mel_filterbank(n_mels, n_fft=n_fft).T
    return FbankSequence(np.log(mel + floor))


def read_wav(path) -> Waveform:
    """Read a RIFF PCM16 mono 16 kHz file, scaled by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise UnsupportedFormatError(f"{path}: {exc}") from exc
    if channels != 1 or width != 2 or rate != SAMPLE_RATE:
        raise UnsupportedFormatError(
            f"{path}: need PCM16 mono {SAMPLE_RATE} Hz, got {channels} ch, {8 * width}-bit, {rate} Hz")
    if len(raw) != 2 * n:
        raise UnsupportedFormatError(f"{path}: truncated data chunk")
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())
