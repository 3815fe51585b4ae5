"""Training objective: reconstruction, adversarial, feature-matching and totals.

All reconstruction losses take (B, T) or (T,) inputs as arrays, tensors or
:class:`~ndvq.signal.AudioBuffer` and return scalar tensors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .signal import MEL_WINDOWS, STFT_WINDOWS, AudioBuffer, frame_signal, hann_window, log_mel, rfft_magnitude, usable_windows

FM_FLOOR = 1e-8


class LossShapeError(ValueError):
    pass


@dataclass
class LossWeights:
    time: float = 0.5
    freq: float = 0.5
    codebook: float = 0.5
    feature_matching: float = 5.0
    adversarial: float = 1.0
    discriminator: float = 1.0
    beta: float = 0.25
    gamma: float = 1e-5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")


@dataclass
class DiscriminatorOutput:
    logits: list
    features: list = field(default_factory=list)  # features[k][l]

    def __post_init__(self):
        if not self.logits:
            raise LossShapeError("discriminator output has no logits")


def _signal(x):
    if isinstance(x, AudioBuffer):
        return nx.Tensor(x.samples), x.sample_rate
    return nx.tensor(x), None


def _pair(x, x_hat):
    (xt, sr_a), (yt, sr_b) = _signal(x), _signal(x_hat)
    if xt.shape != yt.shape:
        raise LossShapeError(f"length mismatch: {xt.shape} vs {yt.shape}")
    if sr_a and sr_b and sr_a != sr_b:
        raise LossShapeError(f"sample rate mismatch: {sr_a} vs {sr_b}")
    return xt, yt, sr_a or sr_b


def time_l1(x, x_hat) -> nx.Tensor:
    """Mean absolute sample difference."""
    xt, yt, _ = _pair(x, x_hat)
    return nx.absolute(xt - yt).mean()


def multiscale_mel_loss(x, x_hat, sample_rate: int | None = None, windows: Sequence[int] = MEL_WINDOWS) -> nx.Tensor:
    """Average over usable scales of mean-|diff| + RMS(diff) between log-mel spectrograms.

    Scales are the windows no longer than the signal, each with hop window/8.
    """
    xt, yt, sr = _pair(x, x_hat)
    sr = sample_rate or sr
    if sr is None:
        raise ValueError("sample_rate is required for raw arrays")
    if xt.value.ndim == 1:
        xt, yt = nx.reshape(xt, (1, -1)), nx.reshape(yt, (1, -1))
    scales = usable_windows(xt.shape[-1], windows)
    if not scales:
        raise LossShapeError(f"signal of {xt.shape[-1]} samples is shorter than the smallest window {min(windows)}")
    total = None
    for w in scales:
        diff = log_mel(xt, w, sr) - log_mel(yt, w, sr)
        term = nx.absolute(diff).mean() + nx.rms(diff)
        total = term if total is None else total + term
    return total * (1.0 / len(scales))


def _hinge(t) -> nx.Tensor:
    # mean of max(0, t) over the entries of t
    return nx.maximum(t, 0.0).mean()


def adversarial_gen_loss(fake_logits: Sequence) -> nx.Tensor:
    """(1/N) sum_k max(0, 1 - D_k(x_hat)); a logit map is averaged over its entries."""
    if len(fake_logits) == 0:
        raise LossShapeError("no discriminator logits")
    terms = [_hinge(1.0 - nx.tensor(l)) for l in fake_logits]
    return sum(terms[1:], terms[0]) * (1.0 / len(terms))


def discriminator_hinge_loss(real_logits: Sequence, fake_logits: Sequence) -> nx.Tensor:
    """(1/N) sum_k [max(0, 1 - D_k(x)) + max(0, 1 + D_k(x_hat))]."""
    if len(real_logits) != len(fake_logits):
        raise LossShapeError(f"{len(real_logits)} real logits vs {len(fake_logits)} fake logits")
    if len(real_logits) == 0:
        raise LossShapeError("no discriminator logits")
    terms = [_hinge(1.0 - nx.tensor(r)) + _hinge(1.0 + nx.tensor(f)) for r, f in zip(real_logits, fake_logits)]
    return sum(terms[1:], terms[0]) * (1.0 / len(terms))


def feature_matching_loss(real: DiscriminatorOutput, fake: DiscriminatorOutput) -> nx.Tensor:
    """Relative L1 between discriminator features, averaged over sub-discriminators and layers.

    Real features are treated as constants.
    """
    if len(real.features) != len(fake.features):
        raise LossShapeError("real and fake outputs have different sub-discriminator counts")
    terms = []
    for k, (fr, ff) in enumerate(zip(real.features, fake.features)):
        if len(fr) != len(ff):
            raise LossShapeError(f"sub-discriminator {k}: {len(fr)} vs {len(ff)} feature maps")
        for l, (a, b) in enumerate(zip(fr, ff)):
            a_val = nx.tensor(a).value
            b = nx.tensor(b)
            if a_val.shape != b.shape:
                raise LossShapeError(f"feature ({k}, {l}) shape {a_val.shape} vs {b.shape}")
            scale = max(float(np.mean(np.abs(a_val))), FM_FLOOR)
            terms.append(nx.absolute(nx.Tensor(a_val) - b).mean() * (1.0 / scale))
    if not terms:
        raise LossShapeError("no feature maps to match")
    return sum(terms[1:], terms[0]) * (1.0 / len(terms))


def generator_total(l_t, l_f, l_a, l_fm, l_c, w: LossWeights):
    return w.time * l_t + w.freq * l_f + w.adversarial * l_a + w.feature_matching * l_fm + w.codebook * l_c


def discriminator_total(l_d, w: LossWeights):
    return w.discriminator * l_d


class StftDiscriminatorStub:
    """Multi-scale STFT "discriminator" made of fixed-shape linear projections.

    Each scale maps log-magnitude frames through one hidden projection and
    an ELU to a scalar logit (averaged over frames). The two feature maps per
    scale are the pre- and post-activation hidden values. The projections
    are parameters, so the stub can be updated with the discriminator loss.
    """

    def __init__(self, seed: int | np.random.Generator, windows: Sequence[int] = STFT_WINDOWS, hidden: int = 16):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.windows = tuple(windows)
        self.params: dict[str, nx.Tensor] = {}
        for w in self.windows:
            bins = w // 2 + 1
            self.params[f"disc.{w}.proj"] = nx.Tensor(rng.normal(0, 1 / np.sqrt(bins), (bins, hidden)), requires_grad=True)
            self.params[f"disc.{w}.out"] = nx.Tensor(rng.normal(0, 1 / np.sqrt(hidden), (hidden,)), requires_grad=True)

    def __call__(self, x) -> DiscriminatorOutput:
        x = nx.tensor(x)
        if x.value.ndim == 1:
            x = nx.reshape(x, (1, -1))
        logits, features = [], []
        for w in usable_windows(x.shape[-1], self.windows):
            frames = frame_signal(x, w, w // 4) * hann_window(w)
            mag = nx.log(rfft_magnitude(frames) + 1e-5)
            hidden = nx.matmul(mag, self.params[f"disc.{w}.proj"])
            act = nx.elu(hidden)
            out = nx.reshape(self.params[f"disc.{w}.out"], (-1, 1))
            logits.append(nx.matmul(act, out).mean())
            features.append([hidden, act])
        if not logits:
            raise LossShapeError(f"signal of {x.shape[-1]} samples shorter than every discriminator window")
        return DiscriminatorOutput(logits, features)
