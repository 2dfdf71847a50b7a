"""WAV decoding, resampling and log-mel / MFCC features."""

from __future__ import annotations

import struct
from dataclasses import dataclass, asdict
from functools import lru_cache
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE

FEATURE_MAGIC = b"MRFE"
FEATURE_VERSION = 1


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class DspConfig:
    target_rate_hz: int = 16000
    frame_len_s: float = 0.025
    frame_shift_s: float = 0.010
    fft_size: int = 512
    n_mels: int = 40
    n_mfcc: int = 13
    feature_kind: str = "log-mel"

    @property
    def frame_len(self) -> int:
        return int(round(self.frame_len_s * self.target_rate_hz))

    @property
    def frame_shift(self) -> int:
        return int(round(self.frame_shift_s * self.target_rate_hz))

    @property
    def dim(self) -> int:
        return self.n_mels if self.feature_kind == "log-mel" else self.n_mfcc

    def validate(self) -> None:
        if self.target_rate_hz <= 0:
            raise ValueError("target_rate_hz must be positive")
        if self.frame_len < 1 or self.frame_shift < 1:
            raise ValueError("frame length and shift must cover at least one sample")
        _check_pow2(self.fft_size)
        if self.fft_size < self.frame_len:
            raise ValueError(f"fft_size {self.fft_size} < frame length {self.frame_len} samples")
        if not 1 <= self.n_mfcc <= self.n_mels:
            raise ValueError("need 1 <= n_mfcc <= n_mels")
        if self.feature_kind not in ("log-mel", "mfcc"):
            raise ValueError(f"unknown feature kind {self.feature_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray  # T x D
    frame_shift_s: float
    feature_kind: str


# ---------------------------------------------------------------------------
# WAV I/O


def decode_wav(path: str | Path) -> Waveform:
    """Decode PCM16 or float32 RIFF/WAVE into a mono waveform in [-1, 1]."""
    return parse_wav(Path(path).read_bytes(), str(path))


def parse_wav(data: bytes, path: str = "<bytes>") -> Waveform:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise AudioError(f"{path}: truncated fmt chunk")
            fmt = body
        elif chunk_id == b"data":
            if len(body) < size:
                raise AudioError(f"{path}: truncated file (data chunk declares {size} bytes, {len(body)} present)")
            payload = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise AudioError(f"{path}: missing fmt chunk")
    if payload is None:
        raise AudioError(f"{path}: truncated file (no data chunk)")

    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == _WAVE_FORMAT_EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels not in (1, 2):
        raise AudioError(f"{path}: unsupported channel count {channels}")
    if rate <= 0:
        raise AudioError(f"{path}: invalid sample rate {rate}")
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise AudioError(f"{path}: unsupported codec (format tag {tag:#06x}, {bits} bits)")

    frame_bytes = dtype.itemsize * channels
    n = len(payload) // frame_bytes
    if n == 0:
        raise AudioError(f"{path}: zero-length audio")
    x = np.frombuffer(payload[: n * frame_bytes], dtype=dtype).astype(np.float64) / scale
    x = x.reshape(n, channels).mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise AudioError(f"{path}: non-finite samples")
    return Waveform(np.clip(x, -1.0, 1.0), int(rate))


def encode_pcm16(samples: np.ndarray) -> np.ndarray:
    """Quantize to int16 such that k/32768 decodes back exactly."""
    q = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(q, -32768, 32767).astype("<i2")


def wav_bytes(w: Waveform) -> bytes:
    """Serialize as a mono PCM16 RIFF/WAVE file."""
    pcm = encode_pcm16(w.samples).tobytes()
    return struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, _WAVE_FORMAT_PCM, 1, w.sample_rate_hz, w.sample_rate_hz * 2, 2, 16,
        b"data", len(pcm),
    ) + pcm


def write_wav(path: str | Path, w: Waveform) -> None:
    Path(path).write_bytes(wav_bytes(w))


def resample(w: Waveform, target_hz: int) -> Waveform:
    """Linear-interpolation resampler; identity when the rates match."""
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    if target_hz == w.sample_rate_hz:
        return w
    n_in = len(w.samples)
    n_out = int(round(n_in * target_hz / w.sample_rate_hz))
    pos = np.arange(n_out) * (w.sample_rate_hz / target_hz)
    out = np.interp(pos, np.arange(n_in), w.samples)
    return Waveform(out, target_hz)


# ---------------------------------------------------------------------------
# spectra


def _check_pow2(n: int) -> None:
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT size must be a power of two, got {n}")


@lru_cache(maxsize=32)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    _check_pow2(n)
    lead = x.shape[:-1]
    y = x[..., _bit_reverse(n)].reshape(-1, n)
    m = 2
    while m <= n:
        half = m // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = y.reshape(y.shape[0], n // m, m)
        u = blocks[..., :half].copy()
        t = blocks[..., half:] * twiddle
        blocks[..., :half] = u + t
        blocks[..., half:] = u - t
        y = blocks.reshape(-1, n)
        m *= 2
    return y.reshape(*lead, n)


def fft_magnitude(frame: np.ndarray, fft_size: int) -> np.ndarray:
    """|FFT| bins 0..fft_size/2 of a zero-padded frame (or stack of frames)."""
    _check_pow2(fft_size)
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] > fft_size:
        raise ValueError(f"frame length {frame.shape[-1]} exceeds fft_size {fft_size}")
    pad = [(0, 0)] * (frame.ndim - 1) + [(0, fft_size - frame.shape[-1])]
    spec = fft(np.pad(frame, pad))
    return np.abs(spec[..., : fft_size // 2 + 1])


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges_hz(cfg: DspConfig) -> np.ndarray:
    """n_mels + 2 edge frequencies equally spaced on the mel axis, 0 Hz to Nyquist."""
    top = hz_to_mel(cfg.target_rate_hz / 2.0)
    return mel_to_hz(np.linspace(0.0, top, cfg.n_mels + 2))


def mel_centers_hz(cfg: DspConfig) -> np.ndarray:
    return mel_edges_hz(cfg)[1:-1]


def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """Triangular filters with unit peak, shape n_mels x (fft_size/2 + 1)."""
    return _filterbank(cfg.target_rate_hz, cfg.fft_size, cfg.n_mels).copy()


@lru_cache(maxsize=16)
def _filterbank(rate: int, fft_size: int, n_mels: int) -> np.ndarray:
    cfg = DspConfig(target_rate_hz=rate, fft_size=fft_size, n_mels=n_mels)
    edges = mel_edges_hz(cfg)
    freqs = np.arange(fft_size // 2 + 1) * rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if empty.size:
        raise ValueError(f"fft_size {fft_size} too small: mel filters {empty.tolist()} cover no FFT bin")
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=16)
def _dct_matrix(n_in: int, n_out: int) -> np.ndarray:
    # orthonormal DCT-II
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    m = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in)) * np.sqrt(2.0 / n_in)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def num_frames(n_samples: int, cfg: DspConfig) -> int:
    if n_samples < cfg.frame_len:
        return 0
    return 1 + (n_samples - cfg.frame_len) // cfg.frame_shift


def extract_features(w: Waveform, cfg: DspConfig = DspConfig()) -> FeatureSequence:
    cfg.validate()
    if w.sample_rate_hz != cfg.target_rate_hz:
        raise ValueError(f"waveform at {w.sample_rate_hz} Hz; resample to {cfg.target_rate_hz} Hz first")
    x = np.asarray(w.samples, dtype=np.float64)
    t = num_frames(len(x), cfg)
    if t == 0:
        raise AudioError(f"audio too short: {len(x)} samples < one {cfg.frame_len}-sample frame")
    idx = np.arange(cfg.frame_len)[None, :] + cfg.frame_shift * np.arange(t)[:, None]
    frames = x[idx] * np.hamming(cfg.frame_len)
    power = fft_magnitude(frames, cfg.fft_size) ** 2
    fb = _filterbank(cfg.target_rate_hz, cfg.fft_size, cfg.n_mels)
    logmel = np.log(power @ fb.T + LOG_FLOOR)
    if cfg.feature_kind == "mfcc":
        feats = logmel @ _dct_matrix(cfg.n_mels, cfg.n_mfcc).T
    else:
        feats = logmel
    return FeatureSequence(feats, cfg.frame_shift_s, cfg.feature_kind)


def load_features(path: str | Path, cfg: DspConfig = DspConfig()) -> FeatureSequence:
    """Decode, resample and featurize one audio file."""
    w = resample(decode_wav(path), cfg.target_rate_hz)
    return extract_features(w, cfg)


# ---------------------------------------------------------------------------
# feature cache


def save_feature_cache(fs: FeatureSequence, path: str | Path) -> None:
    frames = np.ascontiguousarray(fs.frames, dtype="<f4")
    t, d = frames.shape
    shift_us = int(round(fs.frame_shift_s * 1e6))
    header = struct.pack("<4sIIII", FEATURE_MAGIC, FEATURE_VERSION, t, d, shift_us)
    Path(path).write_bytes(header + frames.tobytes())


def load_feature_cache(path: str | Path, feature_kind: str = "log-mel") -> FeatureSequence:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    _, version, t, d, shift_us = struct.unpack_from("<4sIIII", data)
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: feature cache version {version}, supported: {FEATURE_VERSION}")
    body = data[20:]
    if len(body) != 4 * t * d:
        raise ValueError(f"{path}: truncated feature cache")
    frames = np.frombuffer(body, dtype="<f4").reshape(t, d).astype(np.float64)
    return FeatureSequence(frames, shift_us / 1e6, feature_kind)
