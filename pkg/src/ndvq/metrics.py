"""Signal-level evaluation: SI-SDR, mel and STFT distances, usage entropy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import codec
from .quantizer import ResidualQuantizer, UsageHistogram, quantize_infer, quantize_train
from .signal import LOG_FLOOR, MEL_WINDOWS, STFT_WINDOWS, AudioBuffer, log_mel_np, stft, usable_windows

SI_SDR_CAP = 100.0
NOISE_FLOOR = 1e-20


def _arr(x) -> np.ndarray:
    return x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)


def _rate(*xs) -> int | None:
    rates = {x.sample_rate for x in xs if isinstance(x, AudioBuffer)}
    if len(rates) > 1:
        raise ValueError(f"sample rate mismatch: {sorted(rates)}")
    return rates.pop() if rates else None


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, capped at +100 dB when the residual vanishes."""
    x, y = _arr(reference), _arr(estimate)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    ref_energy = float(np.dot(x, x))
    if ref_energy == 0.0:
        raise ValueError("reference signal is all zeros")
    target = (np.dot(y, x) / ref_energy) * x
    noise = y - target
    noise_energy = float(np.dot(noise, noise))
    if noise_energy < NOISE_FLOOR:
        return SI_SDR_CAP
    target_energy = float(np.dot(target, target))
    if target_energy == 0.0:
        return -SI_SDR_CAP
    return float(min(SI_SDR_CAP, 10.0 * np.log10(target_energy / noise_energy)))


def mel_distance(x, x_hat, sample_rate: int | None = None) -> float:
    """Mean |log-mel difference|, averaged over the usable mel window scales."""
    a, b = _arr(x), _arr(x_hat)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    sr = sample_rate or _rate(x, x_hat)
    if sr is None:
        raise ValueError("sample_rate is required for raw arrays")
    scales = usable_windows(a.size, MEL_WINDOWS)
    if not scales:
        raise ValueError("signal shorter than the smallest mel window")
    return float(np.mean([np.mean(np.abs(log_mel_np(a, w, sr) - log_mel_np(b, w, sr))) for w in scales]))


def stft_distance(x, x_hat) -> float:
    """Mean |log(1e-5 + |STFT|) difference| over the usable discriminator scales (hop = window/4)."""
    a, b = _arr(x), _arr(x_hat)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    scales = usable_windows(a.size, STFT_WINDOWS)
    if not scales:
        raise ValueError("signal shorter than the smallest STFT window")
    dists = []
    for w in scales:
        la = np.log(LOG_FLOOR + np.abs(stft(a, w, w // 4)))
        lb = np.log(LOG_FLOOR + np.abs(stft(b, w, w // 4)))
        dists.append(np.mean(np.abs(la - lb)))
    return float(np.mean(dists))


@dataclass
class EvalReport:
    si_sdr: float
    mel_distance: float
    stft_distance: float
    entropy: list[float]
    bandwidth_kbps: float
    n_q: int
    n_clips: int
    mode: str = "mean"
    per_clip_si_sdr: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_clip_si_sdr")
        return d

    def to_text(self) -> str:
        lines = [
            f"bandwidth_kbps={self.bandwidth_kbps:.6g}",
            f"n_q={self.n_q}",
            f"n_clips={self.n_clips}",
            f"mode={self.mode}",
            f"si_sdr={self.si_sdr:.6f}",
            f"mel_distance={self.mel_distance:.6f}",
            f"stft_distance={self.stft_distance:.6f}",
        ]
        lines += [f"entropy_layer_{i + 1}={h:.6f}" for i, h in enumerate(self.entropy)]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def reconstruct(model: codec.ToyCodecModel, rq: ResidualQuantizer, clip: AudioBuffer, rng: np.random.Generator | None = None):
    """Encode, quantize (mean-only unless ``rng`` is given), decode. Returns (audio, indices)."""
    z = codec.encode(model, clip)
    result = quantize_infer(rq, z) if rng is None else quantize_train(rq, z, rng)
    return codec.decode(model, result.quantized, len(clip)), result.indices


def evaluate(
    model: codec.ToyCodecModel,
    rq: ResidualQuantizer,
    dataset: list[AudioBuffer],
    n_q: int | None = None,
    sampling_seed: int | None = None,
) -> EvalReport:
    """Per-clip metrics averaged over ``dataset``; entropies come from the pooled usage histogram.

    ``sampling_seed`` switches decoding from mean-only to reparameterized sampling.
    """
    if not dataset:
        raise ValueError("empty evaluation dataset")
    previous = rq.active_layers
    rq.active_layers = n_q or previous
    rng = None if sampling_seed is None else np.random.default_rng(sampling_seed)
    try:
        hist = UsageHistogram.empty(rq.active_layers, rq.codebook_size)
        sdrs, mels, stfts = [], [], []
        for clip in dataset:
            out, indices = reconstruct(model, rq, clip, rng)
            hist.add(indices)
            sdrs.append(si_sdr(clip, out))
            mels.append(mel_distance(clip, out))
            stfts.append(stft_distance(clip, out))
        n = rq.active_layers
    finally:
        rq.active_layers = previous
    return EvalReport(
        si_sdr=float(np.mean(sdrs)),
        mel_distance=float(np.mean(mels)),
        stft_distance=float(np.mean(stfts)),
        entropy=hist.entropies(),
        bandwidth_kbps=model.cfg.frame_rate * n * codec.BITS_PER_CODE / 1000.0,
        n_q=n,
        n_clips=len(dataset),
        mode="mean" if sampling_seed is None else "sampled",
        per_clip_si_sdr=sdrs,
    )
