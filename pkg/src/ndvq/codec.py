"""Toy convolutional encoder/decoder, bandwidth arithmetic and the .ndvc bitstream."""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .signal import AudioBuffer

BITS_PER_CODE = 10
MAX_CODEBOOK_SIZE = 1 << BITS_PER_CODE

STREAM_MAGIC = b"NDVC"
STREAM_VERSION = 1
WEIGHTS_MAGIC = b"NDVM"
WEIGHTS_VERSION = 1


class CodecError(ValueError):
    pass


class ConfigError(CodecError):
    pass


class SampleRateMismatchError(CodecError):
    pass


class InputTooShortError(CodecError):
    pass


class BitstreamError(CodecError):
    pass


class BadMagicError(BitstreamError):
    pass


class VersionMismatchError(BitstreamError):
    pass


class TruncatedPayloadError(BitstreamError):
    pass


class IndexRangeError(BitstreamError):
    pass


@dataclass
class CodecConfig:
    sample_rate: int = 8000
    strides: tuple[int, ...] = (2, 2, 2)
    latent_dim: int = 32
    channels: int = 32
    codebook_size: int = 1024
    n_layers: int = 32
    kernel_size: int = 7

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if not self.strides or any(s < 1 or s > 255 for s in self.strides):
            raise ConfigError(f"strides must be integers in [1, 255], got {self.strides}")
        if not 1 <= self.codebook_size <= MAX_CODEBOOK_SIZE:
            raise ConfigError(f"codebook_size must be in [1, {MAX_CODEBOOK_SIZE}]")
        if not 1 <= self.n_layers <= 32:
            raise ConfigError("n_layers must be in [1, 32]")
        if self.latent_dim < 1 or self.channels < 1:
            raise ConfigError("latent_dim and channels must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")

    @property
    def hop(self) -> int:
        return math.prod(self.strides)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d


def full_scale_config() -> CodecConfig:
    """24 kHz, strides (2, 4, 5, 8): 75 frames per second."""
    return CodecConfig(sample_rate=24000, strides=(2, 4, 5, 8), latent_dim=128, channels=32)


def n_latent_frames(n_samples: int, cfg: CodecConfig) -> int:
    return -(-n_samples // cfg.hop)


# -- bandwidth -----------------------------------------------------------


def bandwidth_to_nq(bandwidth_kbps: float, frame_rate: float, bits_per_code: int = BITS_PER_CODE, max_layers: int = 32) -> int:
    """Number of residual layers needed to hit ``bandwidth_kbps`` exactly."""
    exact = bandwidth_kbps * 1000.0 / (frame_rate * bits_per_code)
    n_q = round(exact)
    valid = ", ".join(f"{b:g}" for b in valid_bandwidths(frame_rate, bits_per_code, max_layers))
    if abs(exact - n_q) > 1e-9 * max(1.0, exact):
        raise ConfigError(f"{bandwidth_kbps:g} kbps is not a whole number of layers at {frame_rate:g} Hz; valid: {valid}")
    if not 1 <= n_q <= max_layers:
        raise ConfigError(f"{bandwidth_kbps:g} kbps needs {n_q} layers, outside [1, {max_layers}]; valid: {valid}")
    return n_q


def valid_bandwidths(frame_rate: float, bits_per_code: int = BITS_PER_CODE, max_layers: int = 32) -> list[float]:
    return [n * frame_rate * bits_per_code / 1000.0 for n in range(1, max_layers + 1)]


# -- model ---------------------------------------------------------------


def _init(rng: np.random.Generator, shape: tuple, fan_in: int) -> nx.Tensor:
    bound = math.sqrt(3.0 / fan_in)
    return nx.Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class ToyCodecModel:
    """Strided Conv1d/ELU encoder with a mirrored ConvTranspose1d decoder.

    Encoder: conv(1->C, k) then one conv(C->C, 2s, stride s) per stride, then
    conv(C->D, 3). Decoder runs the strides in reverse with transposed
    convolutions whose outputs are trimmed on the right.
    """

    def __init__(self, cfg: CodecConfig, seed: int | np.random.Generator = 0):
        self.cfg = cfg
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        c, d, k = cfg.channels, cfg.latent_dim, cfg.kernel_size
        p: dict[str, nx.Tensor] = {}
        p["enc.in.w"] = _init(rng, (c, 1, k), k)
        p["enc.in.b"] = nx.Tensor(np.zeros(c), requires_grad=True)
        for i, s in enumerate(cfg.strides):
            p[f"enc.down{i}.w"] = _init(rng, (c, c, 2 * s), c * 2 * s)
            p[f"enc.down{i}.b"] = nx.Tensor(np.zeros(c), requires_grad=True)
        p["enc.out.w"] = _init(rng, (d, c, 3), c * 3)
        p["enc.out.b"] = nx.Tensor(np.zeros(d), requires_grad=True)
        p["dec.in.w"] = _init(rng, (c, d, 3), d * 3)
        p["dec.in.b"] = nx.Tensor(np.zeros(c), requires_grad=True)
        for i, s in enumerate(reversed(cfg.strides)):
            p[f"dec.up{i}.w"] = _init(rng, (c, c, 2 * s), c * 2)
            p[f"dec.up{i}.b"] = nx.Tensor(np.zeros(c), requires_grad=True)
        p["dec.out.w"] = _init(rng, (1, c, k), c * k)
        p["dec.out.b"] = nx.Tensor(np.zeros(1), requires_grad=True)
        self.params = p

    def parameters(self) -> dict[str, nx.Tensor]:
        return self.params

    # -- tensor-level passes --

    def encode_tensor(self, x) -> nx.Tensor:
        """(B, T) waveform -> (B, D, ceil(T / hop)) latents."""
        cfg, p = self.cfg, self.params
        x = nx.tensor(x)
        batch, length = x.shape
        frames = n_latent_frames(length, cfg)
        h = nx.pad1d(nx.reshape(x, (batch, 1, length)), 0, frames * cfg.hop - length)
        half = cfg.kernel_size // 2
        h = nx.elu(nx.conv1d(nx.pad1d(h, half, half), p["enc.in.w"], p["enc.in.b"]))
        for i, s in enumerate(cfg.strides):
            h = nx.elu(nx.conv1d(nx.pad1d(h, (s + 1) // 2, s // 2), p[f"enc.down{i}.w"], p[f"enc.down{i}.b"], stride=s))
        return nx.conv1d(nx.pad1d(h, 1, 1), p["enc.out.w"], p["enc.out.b"])

    def decode_tensor(self, z, length: int | None = None) -> nx.Tensor:
        """(B, D, F) latents -> (B, F * hop) waveform, trimmed to ``length`` if given."""
        cfg, p = self.cfg, self.params
        z = nx.tensor(z)
        if z.shape[1] != cfg.latent_dim:
            raise ConfigError(f"latent dimension {z.shape[1]} does not match config D={cfg.latent_dim}")
        h = nx.elu(nx.conv1d(nx.pad1d(z, 1, 1), p["dec.in.w"], p["dec.in.b"]))
        for i, s in enumerate(reversed(cfg.strides)):
            n = h.shape[-1] * s
            h = nx.conv_transpose1d(h, p[f"dec.up{i}.w"], p[f"dec.up{i}.b"], stride=s)
            h = nx.elu(h[:, :, :n])
        half = cfg.kernel_size // 2
        y = nx.conv1d(nx.pad1d(h, half, half), p["dec.out.w"], p["dec.out.b"])
        y = nx.reshape(y, (y.shape[0], y.shape[-1]))
        if length is not None:
            y = y[:, :length]
        return y


def latents_to_frames(z: np.ndarray) -> np.ndarray:
    """(B, D, F) -> (B * F, D)."""
    b, d, f = z.shape
    return z.transpose(0, 2, 1).reshape(b * f, d)


def frames_to_latents(frames: np.ndarray, batch: int) -> np.ndarray:
    """(B * F, D) -> (B, D, F)."""
    n, d = frames.shape
    return frames.reshape(batch, n // batch, d).transpose(0, 2, 1)


def encode(model: ToyCodecModel, x: AudioBuffer) -> np.ndarray:
    """Latent sequence of shape (frames, D) for one clip."""
    cfg = model.cfg
    if x.sample_rate != cfg.sample_rate:
        raise SampleRateMismatchError(f"input is {x.sample_rate} Hz, codec expects {cfg.sample_rate} Hz")
    if len(x) < cfg.hop:
        raise InputTooShortError(f"input has {len(x)} samples, need at least {cfg.hop}")
    z = model.encode_tensor(x.samples[None, :]).value
    return latents_to_frames(z)


def decode(model: ToyCodecModel, latents: np.ndarray, length: int | None = None) -> AudioBuffer:
    """Waveform for a (frames, D) latent sequence."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[1] != model.cfg.latent_dim:
        raise ConfigError(f"latents of shape {latents.shape} do not match D={model.cfg.latent_dim}")
    y = model.decode_tensor(latents.T[None], length).value[0]
    return AudioBuffer(y, model.cfg.sample_rate)


# -- model weight file ---------------------------------------------------


def weights_to_bytes(params: dict[str, nx.Tensor]) -> bytes:
    """NDVM, version, tensor count; per tensor: name, shape, float32 data."""
    parts = [struct.pack("<4sII", WEIGHTS_MAGIC, WEIGHTS_VERSION, len(params))]
    for name in sorted(params):
        value = params[name].value
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        parts.append(value.astype("<f4").tobytes())
    return b"".join(parts)


def weights_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 12:
        raise BitstreamError("weight file shorter than its header")
    magic, version, count = struct.unpack_from("<4sII", data)
    if magic != WEIGHTS_MAGIC:
        raise BadMagicError(f"bad weight-file magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise VersionMismatchError(f"unsupported weight-file version {version}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            size = math.prod(shape)
            if pos + 4 * size > len(data):
                raise TruncatedPayloadError(f"tensor {name} truncated")
            out[name] = np.frombuffer(data, "<f4", size, pos).astype(np.float64).reshape(shape)
            pos += 4 * size
    except struct.error as exc:
        raise TruncatedPayloadError(str(exc)) from exc
    return out


def save_model(path, model: ToyCodecModel) -> None:
    Path(path).write_bytes(weights_to_bytes(model.params))


def load_model(path, cfg: CodecConfig) -> ToyCodecModel:
    weights = weights_from_bytes(Path(path).read_bytes())
    model = ToyCodecModel(cfg, seed=0)
    if set(weights) != set(model.params):
        raise ConfigError(f"weight file tensors {sorted(set(weights) ^ set(model.params))} do not match the config")
    for name, value in weights.items():
        if value.shape != model.params[name].shape:
            raise ConfigError(f"tensor {name}: file shape {value.shape}, config expects {model.params[name].shape}")
        model.params[name].value = value
    return model


# -- bitstream -----------------------------------------------------------


@dataclass
class StreamHeader:
    sample_rate: int
    strides: tuple[int, ...]
    latent_dim: int
    codebook_size: int
    n_q: int
    frame_count: int
    version: int = STREAM_VERSION
    extra: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)

    def to_bytes(self) -> bytes:
        return b"".join(
            [
                STREAM_MAGIC,
                struct.pack("<HIB", self.version, self.sample_rate, len(self.strides)),
                bytes(self.strides),
                struct.pack("<HHBI", self.latent_dim, self.codebook_size, self.n_q, self.frame_count),
            ]
        )

    @property
    def size(self) -> int:
        return 4 + 7 + len(self.strides) + 9

    @property
    def payload_bits(self) -> int:
        return self.frame_count * self.n_q * BITS_PER_CODE


def pack_bitstream(indices, header: StreamHeader) -> bytes:
    """Header followed by 10-bit big-endian code fields, layer-major within each frame."""
    grid = np.asarray(indices, dtype=np.int64)
    if grid.ndim != 2 or grid.shape != (header.frame_count, header.n_q):
        raise BitstreamError(f"index grid shape {grid.shape} does not match header ({header.frame_count}, {header.n_q})")
    if grid.size and (grid.min() < 0 or grid.max() >= header.codebook_size):
        raise IndexRangeError(f"indices must lie in [0, {header.codebook_size})")
    shifts = np.arange(BITS_PER_CODE - 1, -1, -1)
    bits = ((grid.reshape(-1, 1) >> shifts) & 1).astype(np.uint8)
    return header.to_bytes() + np.packbits(bits.reshape(-1)).tobytes()


def unpack_bitstream(data: bytes) -> tuple[StreamHeader, np.ndarray]:
    if len(data) < 4 or data[:4] != STREAM_MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}")
    try:
        version, sample_rate, n_strides = struct.unpack_from("<HIB", data, 4)
        if version != STREAM_VERSION:
            raise VersionMismatchError(f"stream version {version}, reader supports {STREAM_VERSION}")
        strides = tuple(data[11 : 11 + n_strides])
        if len(strides) != n_strides:
            raise struct.error("strides cut short")
        d, k, n_q, frames = struct.unpack_from("<HHBI", data, 11 + n_strides)
    except struct.error as exc:
        raise TruncatedPayloadError(f"truncated header: {exc}") from exc
    header = StreamHeader(sample_rate, strides, d, k, n_q, frames, version)
    payload = np.frombuffer(data, dtype=np.uint8, offset=header.size)
    need = -(-header.payload_bits // 8)
    if payload.size < need:
        raise TruncatedPayloadError(f"payload has {payload.size} bytes, header implies {need}")
    if payload.size > need:
        raise BitstreamError(f"{payload.size - need} trailing bytes after payload")
    bits = np.unpackbits(payload)[: header.payload_bits].reshape(-1, BITS_PER_CODE).astype(np.int64)
    values = bits @ (1 << np.arange(BITS_PER_CODE - 1, -1, -1))
    grid = values.reshape(frames, n_q)
    if grid.size and grid.max() >= k:
        raise IndexRangeError(f"index {int(grid.max())} >= K={k}")
    return header, grid


def achieved_bitrate(header: StreamHeader, frame_rate: float) -> float:
    return frame_rate * header.n_q * BITS_PER_CODE
