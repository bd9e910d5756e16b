"""Log-mel frontend: WAV reading, mel filterbank, framing and dataset normalization."""

import io
import struct
import wave
from dataclasses import dataclass

import numpy as np


class FrontendError(ValueError):
    pass


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    win_length: int = 400
    hop: int = 160
    n_fft: int = 512
    n_mels: int = 80
    f_min: float = 50.0
    f_max: float = 8000.0
    log_floor: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise FrontendError(f"need 0 <= f_min < f_max <= sr/2, got {self.f_min}, {self.f_max}")
        if self.n_fft < self.win_length:
            raise FrontendError("n_fft must be >= win_length")
        if self.hop <= 0 or self.n_mels <= 0 or self.log_floor <= 0:
            raise FrontendError("hop, n_mels and log_floor must be positive")


@dataclass(frozen=True)
class PcmSignal:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise FrontendError("signal must be a non-empty 1-D array")
        if self.sample_rate != 16000:
            raise FrontendError(f"unsupported sample rate {self.sample_rate} (expected 16000)")
        if not np.all(np.isfinite(s)):
            raise FrontendError("signal contains non-finite samples")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise FrontendError("NormStats.std must be > 0")

    def apply(self, spec):
        return (spec - self.mean) / self.std


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def _parse_riff(data):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FrontendError("malformed header: not a RIFF/WAVE stream")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid, size = data[pos:pos + 4], struct.unpack("<I", data[pos + 4:pos + 8])[0]
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise FrontendError("malformed header: short fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise FrontendError("malformed header: missing fmt or data chunk")
    return fmt, payload


def read_wav(data):
    """Decode a RIFF/WAVE byte stream (PCM16 or float32) into a mono PcmSignal."""
    if hasattr(data, "read"):
        data = data.read()
    (tag, channels, rate, _, _, bits), payload = _parse_riff(bytes(data))
    if tag == 0xFFFE:  # WAVE_FORMAT_EXTENSIBLE: trust the bit depth
        tag = 3 if bits == 32 else 1
    if tag == 1 and bits == 16:
        x = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        x = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise FrontendError(f"unsupported codec (format tag {tag}, {bits} bits)")
    if channels < 1:
        raise FrontendError("malformed header: zero channels")
    if rate != 16000:
        raise FrontendError(f"unsupported sample rate {rate}")
    x = x[: x.size // channels * channels].reshape(-1, channels).mean(axis=1)
    return PcmSignal(x, rate)


def read_wav_file(path):
    with open(path, "rb") as fh:
        return read_wav(fh.read())


def write_wav(samples, sample_rate=16000):
    """Encode samples in [-1, 1] as PCM16 WAV bytes. ``samples`` is (n,) or (n, channels)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(x.shape[1])
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# spectrogram
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg=FrontendConfig()):
    """Triangular filters on the HTK mel scale, shape ``(n_mels, n_fft // 2 + 1)``, peak 1."""
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    lo, ctr, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs - lo) / (ctr - lo)
    down = (hi - freqs) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise FrontendError(f"n_mels={cfg.n_mels} too large for n_fft={cfg.n_fft}: filter {empty[0]} is empty")
    return fb


_FB_CACHE = {}


def _cached_fb(cfg):
    if cfg not in _FB_CACHE:
        _FB_CACHE[cfg] = mel_filterbank(cfg)
    return _FB_CACHE[cfg]


def n_frames(n_samples, cfg=FrontendConfig()):
    return n_samples // cfg.hop


def log_mel_spectrogram(signal, cfg=FrontendConfig()):
    """Natural-log mel power spectrogram of shape ``(n_mels, len // hop)``.

    The signal is reflect-padded by ``win_length // 2`` on both sides, framed
    with a Hann window, and the trailing frame is dropped so that exactly
    ``len // hop`` frames (100 per second at the defaults) come out.
    """
    x = signal.samples if isinstance(signal, PcmSignal) else np.asarray(signal, dtype=np.float64)
    if x.size < cfg.hop:
        raise FrontendError(f"signal shorter than one hop ({x.size} < {cfg.hop} samples)")
    T = n_frames(x.size, cfg)
    half = cfg.win_length // 2
    padded = np.pad(x, half, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.win_length)[::cfg.hop][:T]
    window = np.hanning(cfg.win_length + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    mel = _cached_fb(cfg) @ power.T
    return np.log(mel + cfg.log_floor)


def compute_norm_stats(specs):
    specs = list(specs)
    if not specs:
        raise FrontendError("need at least one spectrogram")
    total = sum(s.size for s in specs)
    mean = sum(float(np.sum(s, dtype=np.float64)) for s in specs) / total
    var = sum(float(np.sum((s - mean) ** 2, dtype=np.float64)) for s in specs) / total
    if not var > 0:
        raise FrontendError("corpus has zero variance; cannot normalize")
    return NormStats(mean, float(np.sqrt(var)))


def compute_and_apply_norm(specs):
    """Pooled mean/std over every element of every spectrogram, and the normalized corpus."""
    specs = list(specs)
    stats = compute_norm_stats(specs)
    return stats, [stats.apply(s) for s in specs]
