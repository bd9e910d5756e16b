import io
import struct

import numpy as np
import pytest
from scipy.signal import stft

from msm_mae.frontend import (FrontendConfig, FrontendError, NormStats, PcmSignal, compute_and_apply_norm,
                              compute_norm_stats, hz_to_mel, log_mel_spectrogram, mel_filterbank, mel_to_hz,
                              read_wav, read_wav_file, write_wav)


def _wav_bytes(pcm, rate=16000, channels=1, tag=1, bits=16):
    data = pcm.tobytes()
    fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * channels * bits // 8, channels * bits // 8, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


# -- WAV ----------------------------------------------------------------------

def test_one_second_pcm16_gives_16000_samples():
    sig = read_wav(write_wav(np.zeros(16000)))
    assert isinstance(sig, PcmSignal)
    assert len(sig) == 16000 and sig.duration == 1.0


def test_stereo_opposite_channels_average_to_silence():
    x = np.stack([np.full(800, 0.5), np.full(800, -0.5)], axis=1)
    sig = read_wav(write_wav(x))
    assert np.all(sig.samples == 0.0)


def test_44k_rejected():
    with pytest.raises(FrontendError, match="unsupported sample rate"):
        read_wav(write_wav(np.zeros(100), sample_rate=44100))
    with pytest.raises(FrontendError, match="unsupported sample rate"):
        PcmSignal(np.zeros(10), 44100)


def test_pcm16_scaling_and_float32():
    pcm = np.array([0, 16384, -32768, 32767], dtype="<i2")
    sig = read_wav(_wav_bytes(pcm))
    np.testing.assert_array_equal(sig.samples, pcm / 32768.0)
    f = np.array([0.25, -0.5, 1.0], dtype="<f4")
    sig = read_wav(io.BytesIO(_wav_bytes(f, tag=3, bits=32)))
    np.testing.assert_array_equal(sig.samples, f.astype(np.float64))


def test_bad_headers_and_codecs():
    with pytest.raises(FrontendError):
        read_wav(b"not a wav at all")
    with pytest.raises(FrontendError, match="unsupported codec"):
        read_wav(_wav_bytes(np.zeros(4, dtype="u1"), bits=8))


def test_read_wav_file(tmp_path):
    p = tmp_path / "a.wav"
    p.write_bytes(write_wav(0.1 * np.ones(320)))
    assert len(read_wav_file(p)) == 320


def test_signal_validation():
    with pytest.raises(FrontendError):
        PcmSignal(np.array([]))
    with pytest.raises(FrontendError):
        PcmSignal(np.array([0.0, np.nan]))


# -- mel filterbank ---------------------------------------------------------------

def test_filterbank_shape_and_shape_properties():
    fb = mel_filterbank()
    assert fb.shape == (80, 257)
    assert np.all(fb >= 0)
    for row in fb:
        nz = row[row > 0]
        peak = np.argmax(nz)
        assert np.all(np.diff(nz[: peak + 1]) >= 0) and np.all(np.diff(nz[peak:]) <= 0)


def test_mel_700hz():
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2), abs=1e-9)
    assert hz_to_mel(700.0) == pytest.approx(781.17, abs=5e-3)
    assert mel_to_hz(hz_to_mel(1234.5)) == pytest.approx(1234.5)


def test_first_filter_support():
    cfg = FrontendConfig()
    fb = mel_filterbank(cfg)
    freqs = np.arange(257) * 16000 / 512
    centers = mel_to_hz(np.linspace(hz_to_mel(50), hz_to_mel(8000), 82))[1:-1]
    support = freqs[fb[0] > 0]
    assert support.min() >= 50.0 and support.max() <= centers[1]


def test_too_many_mels_rejected():
    with pytest.raises(FrontendError, match="empty"):
        mel_filterbank(FrontendConfig(n_mels=400))


# -- spectrogram ------------------------------------------------------------------

@pytest.mark.parametrize("n, T", [(15360, 96), (81920, 512), (16000, 100), (159 + 160, 1)])
def test_frame_counts(n, T):
    assert log_mel_spectrogram(np.random.default_rng(0).standard_normal(n)).shape == (80, T)


def test_silence_hits_floor():
    spec = log_mel_spectrogram(np.zeros(1600))
    assert np.all(spec == np.log(1e-6))


def test_shorter_than_hop_rejected():
    with pytest.raises(FrontendError):
        log_mel_spectrogram(np.zeros(100))


def test_deterministic():
    x = np.random.default_rng(3).standard_normal(4000)
    assert np.array_equal(log_mel_spectrogram(x), log_mel_spectrogram(x.copy()))


def test_matches_scipy_stft_oracle():
    # independent framing: scipy's STFT with a periodic Hann window and reflect-padded input
    x = np.random.default_rng(1).standard_normal(4800)
    padded = np.pad(x, 200, mode="reflect")
    _, _, Z = stft(padded, fs=16000, window="hann", nperseg=400, noverlap=240, nfft=512,
                   boundary=None, padded=False, detrend=False, scaling="spectrum")
    power = np.abs(Z * 400 * np.hanning(401)[:-1].mean()) ** 2  # undo scipy's 1/sum(window) scaling
    ref = np.log(mel_filterbank() @ power[:, :30] + 1e-6)
    np.testing.assert_allclose(log_mel_spectrogram(x), ref, rtol=1e-9, atol=1e-9)


def test_tone_energy_lands_near_its_mel_band():
    t = np.arange(16000) / 16000
    spec = log_mel_spectrogram(np.sin(2 * np.pi * 1000 * t))
    centers = mel_to_hz(np.linspace(hz_to_mel(50), hz_to_mel(8000), 82))[1:-1]
    assert abs(int(np.argmax(spec.mean(axis=1))) - int(np.argmin(np.abs(centers - 1000)))) <= 1


# -- normalization ----------------------------------------------------------------

def test_constant_corpus_rejected():
    with pytest.raises(FrontendError):
        compute_norm_stats([np.ones((80, 10))])


def test_hand_computed_stats():
    stats, out = compute_and_apply_norm([np.zeros((2, 3)), np.full((2, 3), 2.0)])
    assert (stats.mean, stats.std) == (1.0, 1.0)
    assert np.all(out[0] == -1.0) and np.all(out[1] == 1.0)


def test_renormalizing_is_idempotent():
    rng = np.random.default_rng(0)
    _, out = compute_and_apply_norm([rng.normal(3, 2, (80, 50)) for _ in range(3)])
    stats, again = compute_and_apply_norm(out)
    assert abs(stats.mean) < 1e-6 and abs(stats.std - 1) < 1e-6
    np.testing.assert_allclose(again[0], out[0], atol=1e-6)


def test_normstats_validation():
    with pytest.raises(FrontendError):
        NormStats(0.0, 0.0)
