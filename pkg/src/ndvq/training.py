"""Synthetic data, the training loop, checkpoints and the quantizer comparison."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec, losses, metrics
from . import numerics as nx
from . import quantizer as qz
from .signal import AudioBuffer

log = logging.getLogger(__name__)

QUANTIZER_KINDS = {"ndvq": qz.KIND_NORMAL, "euclidean": qz.KIND_EUCLIDEAN}
LOSS_COLUMNS = ("time", "freq", "adversarial", "feature_matching", "codebook", "total", "discriminator")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, step: int):
        super().__init__(f"non-finite {term} loss at step {step}")
        self.term = term
        self.step = step


# -- configuration -------------------------------------------------------


@dataclass
class SyntheticDatasetConfig:
    n_clips: int = 40
    clip_length: int = 4000
    sample_rate: int = 8000
    min_components: int = 2
    max_components: int = 5
    noise_level: float = 0.0
    min_freq: float = 60.0
    max_freq: float = 3000.0

    def __post_init__(self):
        if self.n_clips < 1 or self.clip_length < 1:
            raise ValueError("n_clips and clip_length must be positive")
        if not 1 <= self.min_components <= self.max_components:
            raise ValueError("need 1 <= min_components <= max_components")
        if not 0 < self.min_freq < self.max_freq <= self.sample_rate / 2:
            raise ValueError("need 0 < min_freq < max_freq <= sample_rate / 2")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 4
    clip_length: int = 1024
    learning_rate: float = 3e-4
    quantizer: str = "ndvq"
    gan_enabled: bool = False
    discriminator_warmup_steps: int | None = None
    reconstruction_to_codebook: bool = False
    clip_norm: float = 1.0
    checkpoint_interval: int = 0
    holdout_fraction: float = 0.1
    dead_code_threshold: float = 0.0
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    codec: codec.CodecConfig = field(default_factory=codec.CodecConfig)
    data: SyntheticDatasetConfig = field(default_factory=SyntheticDatasetConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.clip_length < self.codec.hop:
            raise ValueError(f"clip_length {self.clip_length} is shorter than the stride product {self.codec.hop}")
        if self.clip_length > self.data.clip_length:
            raise ValueError("clip_length exceeds the dataset clip length")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.quantizer not in QUANTIZER_KINDS:
            raise ValueError(f"quantizer must be one of {sorted(QUANTIZER_KINDS)}")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in (0, 1)")
        if self.data.sample_rate != self.codec.sample_rate:
            raise ValueError("data.sample_rate must match codec.sample_rate")

    @property
    def warmup(self) -> int:
        if not self.gan_enabled:
            return 0
        if self.discriminator_warmup_steps is not None:
            return self.discriminator_warmup_steps
        return self.steps // 10

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["codec"]["strides"] = list(self.codec.strides)
        return d


_NESTED = {"weights": losses.LossWeights, "codec": codec.CodecConfig, "data": SyntheticDatasetConfig}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ValueError(f"{where or 'config'} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for key, value in values.items():
        if cls is TrainConfig and key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, f"{key}.")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(values: dict) -> TrainConfig:
    """Build a :class:`TrainConfig`, rejecting unknown keys at any level."""
    return _build(TrainConfig, values, "")


# -- data ----------------------------------------------------------------


def generate_clip(cfg: SyntheticDatasetConfig, rng: np.random.Generator) -> AudioBuffer:
    n = int(rng.integers(cfg.min_components, cfg.max_components + 1))
    freqs = rng.uniform(cfg.min_freq, cfg.max_freq, n)
    phases = rng.uniform(0.0, 2.0 * np.pi, n)
    amps = rng.uniform(0.2, 1.0, n)
    t = np.arange(cfg.clip_length) / cfg.sample_rate
    x = np.sum(amps[:, None] * np.sin(2.0 * np.pi * freqs[:, None] * t + phases[:, None]), axis=0)
    if cfg.noise_level > 0:
        x = x + cfg.noise_level * rng.standard_normal(cfg.clip_length)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (0.95 / peak)
    return AudioBuffer(x, cfg.sample_rate)


def generate_dataset(cfg: SyntheticDatasetConfig, seed: int) -> list[AudioBuffer]:
    """Sums of random sinusoids, each clip peak-normalised to 0.95."""
    rng = np.random.default_rng(seed)
    return [generate_clip(cfg, rng) for _ in range(cfg.n_clips)]


def split_dataset(dataset: list[AudioBuffer], holdout_fraction: float = 0.1) -> tuple[list, list]:
    """(train, held-out); the held-out part is the last ``holdout_fraction`` of clips."""
    n_hold = max(1, int(round(len(dataset) * holdout_fraction)))
    if n_hold >= len(dataset):
        raise ValueError(f"dataset of {len(dataset)} clips is too small to hold out {n_hold}")
    return dataset[:-n_hold], dataset[-n_hold:]


# -- one step ------------------------------------------------------------


@dataclass
class LossRecord:
    time: float
    freq: float
    adversarial: float
    feature_matching: float
    codebook: float
    total: float
    discriminator: float = 0.0

    def weighted_sum(self, w: losses.LossWeights) -> float:
        return losses.generator_total(self.time, self.freq, self.adversarial, self.feature_matching, self.codebook, w)


@dataclass
class Trainer:
    """Mutable training state: model, codebooks, optimizers and RNG streams."""

    cfg: TrainConfig
    model: codec.ToyCodecModel
    rq: qz.ResidualQuantizer
    optimizer: nx.Adam
    eps_rng: np.random.Generator
    data_rng: np.random.Generator
    disc: losses.StftDiscriminatorStub | None = None
    disc_optimizer: nx.Adam | None = None
    step: int = 0


def _check_finite(name: str, t, step: int) -> None:
    if not np.all(np.isfinite(nx.tensor(t).value)):
        raise NonFiniteLossError(name, step)


def train_step(tr: Trainer, batch: np.ndarray) -> LossRecord:
    """One generator update (and, with the GAN stub past warm-up, one discriminator update)."""
    cfg, model, rq, w = tr.cfg, tr.model, tr.rq, tr.cfg.weights
    batch = np.asarray(batch, dtype=np.float64)
    n_clips, length = batch.shape
    sr = cfg.codec.sample_rate
    tr.optimizer.zero_grad()

    z = model.encode_tensor(batch)
    frames = nx.reshape(nx.transpose(z, (0, 2, 1)), (-1, cfg.codec.latent_dim))
    result = qz.quantize_train(rq, frames.value, tr.eps_rng)
    q_frames, l_c = qz.training_graph(rq, frames, result, w.beta, w.gamma, cfg.reconstruction_to_codebook)
    q = nx.transpose(nx.reshape(q_frames, (n_clips, -1, cfg.codec.latent_dim)), (0, 2, 1))
    x_hat = model.decode_tensor(q, length)

    l_t = losses.time_l1(batch, x_hat)
    l_f = losses.multiscale_mel_loss(batch, x_hat, sr)
    l_a = l_fm = nx.Tensor(0.0)
    if cfg.gan_enabled:
        fake = tr.disc(x_hat)
        real = tr.disc(batch)
        l_a = losses.adversarial_gen_loss(fake.logits)
        l_fm = losses.feature_matching_loss(real, fake)
    total = losses.generator_total(l_t, l_f, l_a, l_fm, l_c, w)
    for name, term in (("time", l_t), ("freq", l_f), ("adversarial", l_a), ("feature_matching", l_fm), ("codebook", l_c), ("total", total)):
        _check_finite(name, term, tr.step)
    total.backward()
    tr.optimizer.step()
    rq.clamp()

    if cfg.quantizer == "euclidean" and cfg.dead_code_threshold > 0:
        for i, cb in enumerate(rq.layers[: rq.active_layers]):
            cb.update_usage(result.indices[:, i])
            cb.replace_dead(result.residuals[i], cfg.dead_code_threshold, tr.eps_rng)

    l_d = 0.0
    if cfg.gan_enabled:
        tr.disc_optimizer.zero_grad()
        if tr.step >= cfg.warmup:
            d_loss = losses.discriminator_total(
                losses.discriminator_hinge_loss(tr.disc(batch).logits, tr.disc(nx.stop_gradient(x_hat)).logits), w
            )
            _check_finite("discriminator", d_loss, tr.step)
            d_loss.backward()
            tr.disc_optimizer.step()
            l_d = d_loss.item()
    tr.step += 1
    return LossRecord(l_t.item(), l_f.item(), l_a.item(), l_fm.item(), l_c.item(), total.item(), l_d)


# -- checkpoints ---------------------------------------------------------

CODEBOOK_FILE = "codebooks.ndvq"
MODEL_FILE = "model.ndvm"
CONFIG_FILE = "config.json"


def config_json(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def save_checkpoint(directory, cfg: TrainConfig, model: codec.ToyCodecModel, rq: qz.ResidualQuantizer) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    qz.save_codebooks(directory / CODEBOOK_FILE, rq)
    codec.save_model(directory / MODEL_FILE, model)
    (directory / CONFIG_FILE).write_text(config_json(cfg))
    return directory


def load_checkpoint(directory) -> tuple[TrainConfig, codec.ToyCodecModel, qz.ResidualQuantizer]:
    directory = Path(directory)
    cfg = config_from_dict(json.loads((directory / CONFIG_FILE).read_text()))
    model = codec.load_model(directory / MODEL_FILE, cfg.codec)
    rq = qz.load_codebooks(directory / CODEBOOK_FILE)
    expected = (cfg.codec.codebook_size, cfg.codec.latent_dim, cfg.codec.n_layers)
    found = (rq.codebook_size, rq.dim, len(rq.layers))
    if expected != found:
        raise codec.ConfigError(f"codebook file (K, D, layers)={found} does not match config {expected}")
    return cfg, model, rq


# -- full run ------------------------------------------------------------


@dataclass
class TrainResult:
    model: codec.ToyCodecModel
    rq: qz.ResidualQuantizer
    history: list[LossRecord]
    train_clips: list[AudioBuffer]
    holdout: list[AudioBuffer]
    initial_report: metrics.EvalReport | None = None


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("data", "model", "codebooks", "eps", "disc")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(s) for name, s in zip(names, children)}


def build_trainer(cfg: TrainConfig, train_clips: list[AudioBuffer]) -> Trainer:
    rngs = _streams(cfg.seed)
    model = codec.ToyCodecModel(cfg.codec, rngs["model"])
    k = cfg.codec.codebook_size
    latents, n = [], 0
    for clip in train_clips:
        latents.append(codec.encode(model, clip))
        n += len(latents[-1])
        if n >= 4 * k:
            break
    rq = qz.init_codebooks(cfg.codec.n_layers, k, np.concatenate(latents), rngs["codebooks"], QUANTIZER_KINDS[cfg.quantizer])
    optimizer = nx.Adam({**model.params, **rq.parameters()}, cfg.learning_rate, cfg.clip_norm)
    disc = disc_opt = None
    if cfg.gan_enabled:
        disc = losses.StftDiscriminatorStub(rngs["disc"])
        disc_opt = nx.Adam(disc.params, cfg.learning_rate, cfg.clip_norm)
    return Trainer(cfg, model, rq, optimizer, rngs["eps"], rngs["data"], disc, disc_opt)


def sample_batch(tr: Trainer, clips: list[AudioBuffer]) -> np.ndarray:
    """Random crops of ``clip_length`` samples from randomly chosen clips."""
    n = tr.cfg.clip_length
    picks = tr.data_rng.integers(0, len(clips), tr.cfg.batch_size)
    out = np.empty((tr.cfg.batch_size, n))
    for row, i in enumerate(picks):
        start = int(tr.data_rng.integers(0, len(clips[i]) - n + 1))
        out[row] = clips[i].samples[start : start + n]
    return out


def train(
    cfg: TrainConfig,
    dataset: list[AudioBuffer],
    out_dir=None,
    evaluate_initial: bool = False,
) -> TrainResult:
    """Run ``cfg.steps`` updates. With ``out_dir``, writes checkpoint/, checkpoints/step_*/ and losses.csv."""
    train_clips, holdout = split_dataset(dataset, cfg.holdout_fraction)
    tr = build_trainer(cfg, train_clips)
    initial = metrics.evaluate(tr.model, tr.rq, holdout) if evaluate_initial else None
    writer = csv_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / CONFIG_FILE).write_text(config_json(cfg))
        csv_file = open(out_dir / "losses.csv", "w", newline="")
        writer = csv.writer(csv_file, lineterminator="\n")
        writer.writerow(("step",) + LOSS_COLUMNS)
        if cfg.checkpoint_interval:
            save_checkpoint(out_dir / "checkpoints" / "step_000000", cfg, tr.model, tr.rq)
    history = []
    try:
        for step in range(cfg.steps):
            record = train_step(tr, sample_batch(tr, train_clips))
            history.append(record)
            if writer is not None:
                writer.writerow([step + 1] + [repr(getattr(record, c)) for c in LOSS_COLUMNS])
                csv_file.flush()
                if cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
                    save_checkpoint(out_dir / "checkpoints" / f"step_{step + 1:06d}", cfg, tr.model, tr.rq)
            if (step + 1) % max(1, cfg.steps // 10) == 0:
                log.info("step %d/%d total=%.4f", step + 1, cfg.steps, record.total)
    finally:
        if csv_file is not None:
            csv_file.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint", cfg, tr.model, tr.rq)
    return TrainResult(tr.model, tr.rq, history, train_clips, holdout, initial)


# -- comparison ----------------------------------------------------------


@dataclass
class Comparison:
    ndvq: metrics.EvalReport
    baseline: metrics.EvalReport
    ndvq_run: TrainResult = field(repr=False)
    baseline_run: TrainResult = field(repr=False)

    @property
    def deltas(self) -> dict:
        """NDVQ minus baseline for every scalar metric and per-layer entropy."""
        d = {
            "si_sdr": self.ndvq.si_sdr - self.baseline.si_sdr,
            "mel_distance": self.ndvq.mel_distance - self.baseline.mel_distance,
            "stft_distance": self.ndvq.stft_distance - self.baseline.stft_distance,
        }
        for i, (a, b) in enumerate(zip(self.ndvq.entropy, self.baseline.entropy)):
            d[f"entropy_layer_{i + 1}"] = a - b
        return d

    def to_json(self) -> str:
        return json.dumps(
            {"ndvq": self.ndvq.to_dict(), "baseline": self.baseline.to_dict(), "deltas": self.deltas}, indent=2, sort_keys=True
        ) + "\n"


def compare_quantizers(
    cfg: TrainConfig,
    dataset: list[AudioBuffer],
    seed: int | None = None,
    baseline_kind: str = "euclidean",
    out_dir=None,
) -> Comparison:
    """Train NDVQ and a baseline with identical seeds, data order, backbone init and steps."""
    seed = cfg.seed if seed is None else seed
    runs = {}
    for label, kind in (("ndvq", "ndvq"), ("baseline", baseline_kind)):
        run_cfg = dataclasses.replace(cfg, seed=seed, quantizer=kind)
        sub = None if out_dir is None else Path(out_dir) / label
        runs[label] = train(run_cfg, dataset, sub)
    reports = {k: metrics.evaluate(r.model, r.rq, r.holdout) for k, r in runs.items()}
    return Comparison(reports["ndvq"], reports["baseline"], runs["ndvq"], runs["baseline"])


def toy_config(**overrides) -> TrainConfig:
    """The desk-scale configuration used by the acceptance run."""
    base = TrainConfig(
        seed=0,
        steps=2000,
        batch_size=4,
        clip_length=1024,
        codec=codec.CodecConfig(sample_rate=8000, strides=(2, 2, 2), latent_dim=32, channels=32, codebook_size=256, n_layers=4),
        data=SyntheticDatasetConfig(n_clips=40, clip_length=4000, sample_rate=8000),
    )
    return dataclasses.replace(base, **overrides)


def window_means(history: list[LossRecord], fraction: float = 0.1) -> tuple[float, float]:
    """Mean total loss over the first and last ``fraction`` of steps."""
    n = max(1, int(math.ceil(len(history) * fraction)))
    totals = [r.total for r in history]
    return float(np.mean(totals[:n])), float(np.mean(totals[-n:]))
