"""Audio buffers, WAV I/O, FFT/STFT and mel analysis.

The FFT is an iterative radix-2 transform vectorised over leading axes.
Spectral frames use a periodic Hann window and reflect padding chosen so a
signal of length ``n`` yields ``ceil(n / hop)`` frames.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import numerics as nx

N_MELS = 64
MEL_WINDOWS = (32, 64, 128, 256, 512, 1024, 2048)
STFT_WINDOWS = (2048, 1024, 512, 256, 128)
LOG_FLOOR = 1e-5


class WavError(ValueError):
    pass


class MalformedHeaderError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


class UnsupportedChannelCountError(WavError):
    pass


class ConfigError(ValueError):
    """Invalid transform configuration (window, hop, or signal length)."""


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.isfinite(self.samples).all():
            raise ValueError("audio samples must be finite")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


# -- WAV -----------------------------------------------------------------


def load_wav(path) -> AudioBuffer:
    """Read a mono 16-bit PCM WAV file; samples are scaled by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (EOFError, wave.Error) as exc:
        msg = str(exc) or "truncated RIFF header"
        if "unknown format" in msg:
            raise UnsupportedEncodingError(f"{path}: {msg}") from exc
        raise MalformedHeaderError(f"{path}: {msg}") from exc
    if channels != 1:
        raise UnsupportedChannelCountError(f"{path}: expected 1 channel, found {channels}")
    if width != 2:
        raise UnsupportedEncodingError(f"{path}: expected 16-bit PCM, found {8 * width}-bit")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.round(clipped * 32768.0), -32768, 32767).astype("<i2")


def save_wav(path, audio: AudioBuffer) -> None:
    """Write ``audio`` as mono 16-bit PCM, clamping to [-1, 1]."""
    if len(audio) == 0:
        raise ValueError("refusing to write an empty buffer")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(audio.sample_rate))
        w.writeframes(to_pcm16(audio.samples).tobytes())


# -- FFT -----------------------------------------------------------------


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(m // 2) / m)


_BASE = 16


@lru_cache(maxsize=None)
def _base_dft(m: int) -> np.ndarray:
    # DFT matrix acting on a block already in bit-reversed order, transposed for right-multiplication
    k = np.arange(m)
    mat = np.exp(-2j * np.pi * np.outer(k, k) / m)
    return np.ascontiguousarray(mat[:, _bit_reverse(m)].T)


def fft(x) -> np.ndarray:
    """Radix-2 decimation-in-time DFT along the last axis.

    Blocks of up to 16 points are transformed with a dense DFT matrix; the
    remaining stages are vectorised butterflies.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ConfigError(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    base = min(n, _BASE)
    y = (x[..., _bit_reverse(n)].reshape(*lead, n // base, base) @ _base_dft(base)).reshape(*lead, n)
    m = base * 2
    while m <= n:
        half = m // 2
        blocks = y.reshape(*lead, n // m, m)
        odd = blocks[..., half:] * _twiddles(m)
        out = np.empty_like(blocks)
        np.add(blocks[..., :half], odd, out=out[..., :half])
        np.subtract(blocks[..., :half], odd, out=out[..., half:])
        y = out.reshape(*lead, n)
        m *= 2
    return y


@lru_cache(maxsize=None)
def _rfft_twiddles(n: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(n // 2 + 1) / n)


def rfft(x) -> np.ndarray:
    """Non-negative-frequency half of :func:`fft` for real input.

    Packs even and odd samples into one complex transform of half length.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 4:
        return fft(x)[..., : n // 2 + 1]
    z =fft(x[..., 0::2] + 1j * x[..., 1::2])
    zk = np.concatenate([z, z[..., :1]], axis=-1)  # Z_k for k = 0..half, periodic
    zr = np.conj(zk[..., ::-1])  # conj(Z_{half-k})
    even = 0.5 * (zk + zr)
    odd = -0.5j * (zk - zr)
    return even + _rfft_twiddles(n) * odd


# -- framing -------------------------------------------------------------


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_frames(length: int, hop_length: int) -> int:
    return -(-length // hop_length)


@lru_cache(maxsize=64)
def frame_indices(length: int, window_length: int, hop_length: int) -> np.ndarray:
    """Indices into the unpadded signal for each (frame, tap), with reflect padding folded in."""
    if not _is_pow2(window_length):
        raise ConfigError(f"window_length must be a power of two, got {window_length}")
    if not 1 <= hop_length <= window_length:
        raise ConfigError(f"need window_length >= hop_length >= 1, got {window_length}, {hop_length}")
    frames = n_frames(length, hop_length)
    left = window_length // 2
    right = (frames - 1) * hop_length + window_length - length - left
    if left > length - 1 or right > length - 1:
        raise ConfigError(f"window {window_length} too long for a signal of {length} samples")
    pos = np.arange(frames)[:, None] * hop_length + np.arange(window_length)[None, :] - left
    pos = np.where(pos < 0, -pos, pos)
    pos = np.where(pos >= length, 2 * (length - 1) - pos, pos)
    pos.setflags(write=False)
    return pos


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)


def stft(x, window_length: int, hop_length: int, window: str = "hann") -> np.ndarray:
    """Complex spectrogram with shape (frames, window_length // 2 + 1).

    ``window`` is ``"hann"`` or ``"rect"``. Accepts an :class:`AudioBuffer`
    or a raw array whose last axis is time.
    """
    s = _samples(x)
    idx = frame_indices(s.shape[-1], window_length, hop_length)
    w = hann_window(window_length) if window == "hann" else np.ones(window_length)
    return rfft(s[..., idx] * w)


# -- mel -----------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _triangle_integral(f, left, center, right):
    # antiderivative of a unit-peak triangle, evaluated elementwise
    f = np.clip(f, left, right)
    rise = (np.minimum(f, center) - left) ** 2 / (2.0 * (center - left))
    fall_part = np.where(f > center, (right - center) / 2.0 - (right - f) ** 2 / (2.0 * (right - center)), 0.0)
    return rise + fall_part


@lru_cache(maxsize=32)
def mel_filterbank(n_fft: int, sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    """HTK-scale triangular filters, shape (n_mels, n_fft // 2 + 1).

    Each weight is the mean height of the triangle over the frequency cell
    of that FFT bin, so narrow filters on short windows still cover at least
    one bin.
    """
    n_bins = n_fft // 2 + 1
    spacing = sample_rate / n_fft
    centers = np.arange(n_bins) * spacing
    lo, hi = centers - spacing / 2.0, centers + spacing / 2.0
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.empty((n_mels, n_bins))
    for m in range(n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        fb[m] = (_triangle_integral(hi, left, center, right) - _triangle_integral(lo, left, center, right)) / spacing
    fb[fb < 1e-12] = 0.0
    fb.setflags(write=False)
    return fb


@dataclass(frozen=True)
class MelConfig:
    window_length: int
    sample_rate: int
    n_mels: int = N_MELS
    hop_length: int | None = None

    @property
    def hop(self) -> int:
        return self.hop_length if self.hop_length is not None else self.window_length // 8


def mel_spectrogram(x, cfg: MelConfig) -> np.ndarray:
    """Mel-weighted STFT magnitudes, shape (frames, n_mels). No log compression."""
    fb = mel_filterbank(cfg.window_length, cfg.sample_rate, cfg.n_mels)
    return np.abs(stft(x, cfg.window_length, cfg.hop)) @ fb.T


# -- differentiable spectral path ----------------------------------------


def frame_signal(x: nx.Tensor, window_length: int, hop_length: int) -> nx.Tensor:
    """Gather reflect-padded frames from a (B, T) tensor -> (B, frames, window_length)."""
    x = nx.tensor(x)
    batch, length = x.value.shape
    idx = frame_indices(length, window_length, hop_length)
    flat = (idx[None, :, :] + (np.arange(batch) * length)[:, None, None]).reshape(-1)

    def bw(out):
        g = np.bincount(flat, weights=out.adjoint.reshape(-1), minlength=batch * length)
        nx.accumulate(x, g.reshape(batch, length))

    return nx.record(x.value[:, idx], (x,), "frame", bw)


def rfft_magnitude(frames: nx.Tensor) -> nx.Tensor:
    """|rfft| along the last axis; subgradient 0 where the magnitude is 0."""
    frames = nx.tensor(frames)
    n = frames.value.shape[-1]
    spec = rfft(frames.value)
    mag = np.abs(spec)

    def bw(out):
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(mag > 0, spec / mag, 0.0)
        g = out.adjoint * unit  # complex: (g_re + i g_im)
        full = np.zeros(frames.value.shape, dtype=np.complex128)
        full[..., : n // 2 + 1] = g
        nx.accumulate(frames, fft(np.conj(full)).real)

    return nx.record(mag, (frames,), "rfft_abs", bw)


def log_mel(x: nx.Tensor, window_length: int, sample_rate: int, hop_length: int | None = None) -> nx.Tensor:
    """log(1e-5 + mel magnitude) for a (B, T) tensor -> (B, frames, n_mels)."""
    hop = hop_length or window_length // 8
    frames = frame_signal(x, window_length, hop) * hann_window(window_length)
    fb = mel_filterbank(window_length, sample_rate)
    return nx.log(nx.matmul(rfft_magnitude(frames), fb.T) + LOG_FLOOR)


def log_mel_np(x: np.ndarray, window_length: int, sample_rate: int, hop_length: int | None = None) -> np.ndarray:
    hop = hop_length or window_length // 8
    fb = mel_filterbank(window_length, sample_rate)
    return np.log(np.abs(stft(x, window_length, hop)) @ fb.T + LOG_FLOOR)


def usable_windows(length: int, windows=MEL_WINDOWS) -> list[int]:
    return [w for w in windows if w <= length]

