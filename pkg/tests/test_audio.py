import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from talkhead import audio
from talkhead.audio import Waveform


def sine(freq, n=16000, amp=0.5):
    t = np.arange(n) / audio.SAMPLE_RATE
    return Waveform(amp * np.sin(2 * np.pi * freq * t))


def test_rejects_other_rates():
    with pytest.raises(audio.UnsupportedFormatError):
        Waveform(np.zeros(400), sample_rate_hz=8000)


def test_short_input_rejected():
    with pytest.raises(audio.InputLengthError):
        audio.stft_power(Waveform(np.zeros(319)))


def test_zero_signal_zero_power():
    p = audio.stft_power(Waveform(np.zeros(1600)))
    assert p.shape == (9, 257) and not p.any()


def test_sine_peak_bin_matches_direct_dft():
    p = audio.stft_power(sine(1000.0))
    assert (p.argmax(axis=1) == 32).all()
    # direct DFT of the first windowed frame, no FFT
    x = sine(1000.0).samples[:320] * np.hanning(321)[:-1]
    n = np.arange(320)
    k = np.arange(257)[:, None]
    direct = np.abs((x * np.exp(-2j * np.pi * k * n / 512)).sum(axis=1)) ** 2
    assert np.allclose(p[0], direct, rtol=1e-9, atol=1e-9)


def test_parseval():
    rng = np.random.default_rng(0)
    w = Waveform(rng.uniform(-1, 1, 2000))
    p = audio.stft_power(w)
    frames = audio.frame_signal(w.samples) * np.hanning(321)[:-1]
    full = p[:, 0] + 2 * p[:, 1:-1].sum(axis=1) + p[:, -1]
    energy = (frames ** 2).sum(axis=1) * 512
    assert np.allclose(full, energy, rtol=1e-6)


def test_filterbank_properties():
    fb = audio.mel_filterbank()
    assert fb.shape == (80, 257)
    assert (fb >= 0).all() and (fb.sum(axis=1) > 0).all()
    assert ((fb > 0).sum(axis=0) <= 2).all()
    centres = audio.mel_center_frequencies()
    assert (np.diff(centres) > 0).all()
    mels = audio.hz_to_mel(centres)
    assert np.allclose(np.diff(mels), np.diff(mels)[0])


def test_filter_nearest_1khz_peaks_near_bin_32():
    centres = audio.mel_center_frequencies()
    ch = int(np.argmin(np.abs(centres - 1000.0)))
    peak = int(audio.mel_filterbank()[ch].argmax())
    assert abs(peak - 32) <= 1


def test_mel_formula():
    assert audio.hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0))
    f = np.array([0.0, 440.0, 8000.0])
    assert np.allclose(audio.mel_to_hz(audio.hz_to_mel(f)), f)


def test_fbank_silence_and_homogeneity():
    silent = audio.fbank(Waveform(np.zeros(3200)))
    assert np.array_equal(silent.frames, np.full(silent.frames.shape, np.log(1e-10)))
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.4, 0.4, 3200)
    a, b = audio.fbank(Waveform(x)).frames, audio.fbank(Waveform(2 * x)).frames
    mel_a = np.exp(a) - 1e-10
    # where the floor is negligible the shift is exactly log 4
    strong = mel_a > 1e-3
    assert np.allclose((b - a)[strong], np.log(4.0), atol=1e-9)


def test_fbank_sine_argmax_channel():
    frames = audio.fbank(sine(1000.0)).frames
    centres = audio.mel_center_frequencies()
    assert (frames.argmax(axis=1) == int(np.argmin(np.abs(centres - 1000.0)))).all()


def test_fbank_deterministic_and_finite():
    rng = np.random.default_rng(2)
    w = Waveform(rng.uniform(-1, 1, 4000))
    a, b = audio.fbank(w), audio.fbank(w)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert np.isfinite(a.frames).all()
    assert a.frame_shift_ms == 10 and a.frame_length_ms == 20 and a.n_mels == 80


def test_frame_count_formula_random_lengths():
    rng = np.random.default_rng(3)
    for n in rng.integers(320, 20000, size=100):
        expected = (int(n) - 320) // 160 + 1
        assert audio.num_frames(int(n)) == expected
        assert len(audio.fbank(Waveform(np.zeros(int(n))))) == expected


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=320, max_size=800))
def test_fbank_always_finite(values):
    assert np.isfinite(audio.fbank(Waveform(np.array(values))).frames).all()


def test_wav_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    x = np.round(rng.uniform(-0.9, 0.9, 1000) * 32768) / 32768
    path = tmp_path / "a.wav"
    audio.write_wav(path, Waveform(x))
    assert np.array_equal(audio.read_wav(path).samples, x)


def test_wav_rejects_stereo_and_garbage(tmp_path):
    path = tmp_path / "stereo.wav"
    with wave.open(str(path), "wb") as f:
        f.setnchannels(2)
        f.setsampwidth(2)
        f.setframerate(16000)
        f.writeframes(b"\0" * 400)
    with pytest.raises(audio.UnsupportedFormatError):
        audio.read_wav(path)
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"RIFF0000WAVEjunk")
    with pytest.raises(audio.UnsupportedFormatError, match="bad.wav"):
        audio.read_wav(bad)
    rate = tmp_path / "rate.wav"
    with wave.open(str(rate), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(8000)
        f.writeframes(b"\0" * 400)
    with pytest.raises(audio.UnsupportedFormatError):
        audio.read_wav(rate)
