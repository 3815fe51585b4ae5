"""Normal-distribution codebooks, the residual stack, and the Euclidean baseline.

Each NDVQ code is a diagonal normal distribution. A latent vector picks the
code under which it has the highest log density; training replaces the code
by a reparameterized sample ``mu + eps * sigma`` while inference uses ``mu``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx

SIGMA_MIN = 1e-4
SIGMA_MAX = 10.0
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

CODEBOOK_MAGIC = b"NDVQ"
CODEBOOK_VERSION = 1
KIND_NORMAL = 0
KIND_EUCLIDEAN = 1


class DecodeError(ValueError):
    pass


class InitError(ValueError):
    pass


class CodebookFormatError(ValueError):
    pass


# -- codebooks -----------------------------------------------------------


class NormalCodebook:
    """K diagonal normals over R^D, stored as means and log standard deviations."""

    kind = KIND_NORMAL

    def __init__(self, means, log_sigmas=None):
        means = np.asarray(means, dtype=np.float64)
        if means.ndim != 2:
            raise ValueError(f"means must be K x D, got shape {means.shape}")
        if log_sigmas is None:
            log_sigmas = np.zeros_like(means)
        log_sigmas = np.asarray(log_sigmas, dtype=np.float64)
        if log_sigmas.shape != means.shape:
            raise ValueError("means and log_sigmas must have the same shape")
        self.means = nx.Tensor(means.copy(), requires_grad=True)
        self.log_sigmas = nx.Tensor(log_sigmas.copy(), requires_grad=True)
        self.clamp()

    @classmethod
    def from_sigmas(cls, means, sigmas) -> NormalCodebook:
        return cls(means, np.log(np.asarray(sigmas, dtype=np.float64)))

    @property
    def size(self) -> int:
        return self.means.value.shape[0]

    @property
    def dim(self) -> int:
        return self.means.value.shape[1]

    @property
    def mu(self) -> np.ndarray:
        return self.means.value

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigmas.value)

    def clamp(self) -> None:
        self.log_sigmas.value = np.clip(self.log_sigmas.value, math.log(SIGMA_MIN), math.log(SIGMA_MAX))

    def parameters(self) -> dict[str, nx.Tensor]:
        return {"means": self.means, "log_sigmas": self.log_sigmas}

    def select(self, z: np.ndarray) -> np.ndarray:
        return select_codes(z, self)


class EuclideanCodebook:
    """Deterministic nearest-neighbour codebook used as the baseline."""

    kind = KIND_EUCLIDEAN

    def __init__(self, embeddings):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2:
            raise ValueError(f"embeddings must be K x D, got shape {embeddings.shape}")
        self.means = nx.Tensor(embeddings.copy(), requires_grad=True)
        self.usage_ema = np.ones(embeddings.shape[0])

    @property
    def size(self) -> int:
        return self.means.value.shape[0]

    @property
    def dim(self) -> int:
        return self.means.value.shape[1]

    @property
    def mu(self) -> np.ndarray:
        return self.means.value

    embeddings = mu

    def clamp(self) -> None:
        pass

    def parameters(self) -> dict[str, nx.Tensor]:
        return {"means": self.means}

    def select(self, z: np.ndarray) -> np.ndarray:
        return nearest_codes(z, self)

    def update_usage(self, indices: np.ndarray, decay: float = 0.99) -> None:
        counts = np.bincount(np.asarray(indices).reshape(-1), minlength=self.size)
        self.usage_ema = decay * self.usage_ema + (1.0 - decay) * counts

    def replace_dead(self, residuals: np.ndarray, threshold: float, rng: np.random.Generator) -> int:
        """Reset codes whose usage EMA fell below ``threshold`` to random residual frames."""
        dead = np.flatnonzero(self.usage_ema < threshold)
        if dead.size and len(residuals):
            picks = rng.integers(0, len(residuals), size=dead.size)
            self.means.value = self.means.value.copy()
            self.means.value[dead] = residuals[picks]
            self.usage_ema[dead] = 1.0
        return int(dead.size)


# -- selection -----------------------------------------------------------


def log_density_scores(z, cb: NormalCodebook) -> np.ndarray:
    """Log density of one D-vector under each of the K codes."""
    z = np.asarray(z, dtype=np.float64)
    sigma = cb.sigma
    return np.sum(-0.5 * ((z - cb.mu) / sigma) ** 2 - (np.log(sigma) + LOG_SQRT_2PI), axis=1)


def select_code(z, cb: NormalCodebook) -> int:
    """Index of the most likely code; ties go to the lowest index."""
    return int(np.argmax(log_density_scores(z, cb)))


def select_codes(z: np.ndarray, cb: NormalCodebook) -> np.ndarray:
    """Batched :func:`select_code` for an (N, D) array.

    Expands the quadratic form into matrix products, so scores agree with
    :func:`log_density_scores` only up to rounding.
    """
    z = np.asarray(z, dtype=np.float64)
    inv_var = np.exp(-2.0 * cb.log_sigmas.value)
    mu = cb.mu
    quad = (z**2) @ inv_var.T - 2.0 * z @ (mu * inv_var).T + np.sum(mu**2 * inv_var, axis=1)
    scores = -0.5 * quad - np.sum(cb.log_sigmas.value, axis=1)
    return np.argmax(scores, axis=1)


def nearest_neighbor(z, cb: EuclideanCodebook) -> int:
    z = np.asarray(z, dtype=np.float64)
    return int(np.argmin(np.sum((cb.mu - z) ** 2, axis=1)))


def nearest_codes(z: np.ndarray, cb: EuclideanCodebook) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    mu = cb.mu
    dist = np.sum(mu**2, axis=1) - 2.0 * z @ mu.T
    return np.argmin(dist, axis=1)


def reparameterize(mu, sigma, epsilon):
    """``mu + epsilon * sigma``; works on arrays or tensors."""
    if any(isinstance(a, nx.Tensor) for a in (mu, sigma, epsilon)):
        return nx.add(mu, nx.mul(epsilon, sigma))
    return np.asarray(mu) + np.asarray(epsilon) * np.asarray(sigma)


# -- residual stack ------------------------------------------------------


@dataclass
class QuantizationResult:
    quantized: np.ndarray
    indices: np.ndarray
    final_residual: np.ndarray
    # per-layer inputs and noise, kept so the training graph can be rebuilt
    residuals: list[np.ndarray] = field(default_factory=list, repr=False)
    noise: list[np.ndarray | None] = field(default_factory=list, repr=False)


class ResidualQuantizer:
    def __init__(self, layers: list, active_layers: int | None = None):
        if not layers:
            raise ValueError("need at least one codebook")
        dims = {cb.dim for cb in layers}
        if len(dims) != 1:
            raise ValueError(f"all layers must share D, got {sorted(dims)}")
        kinds = {cb.kind for cb in layers}
        if len(kinds) != 1:
            raise ValueError("mixed codebook kinds in one stack")
        self.layers = list(layers)
        self.active_layers = len(layers) if active_layers is None else active_layers

    @property
    def active_layers(self) -> int:
        return self._active

    @active_layers.setter
    def active_layers(self, n: int) -> None:
        if not 1 <= n <= len(self.layers):
            raise ValueError(f"active_layers must be in [1, {len(self.layers)}], got {n}")
        self._active = int(n)

    @property
    def kind(self) -> int:
        return self.layers[0].kind

    @property
    def codebook_size(self) -> int:
        return self.layers[0].size

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    def parameters(self) -> dict[str, nx.Tensor]:
        return {f"rvq.{i}.{name}": t for i, cb in enumerate(self.layers) for name, t in cb.parameters().items()}

    def clamp(self) -> None:
        for cb in self.layers:
            cb.clamp()


def quantize_train(rq: ResidualQuantizer, z, rng: np.random.Generator | None) -> QuantizationResult:
    """Residual quantization with reparameterized sampling.

    A fresh standard-normal vector is drawn per frame per layer. With
    ``rng=None`` the noise is zero, which is exactly inference mode.
    Euclidean stacks never sample.
    """
    z = np.asarray(z, dtype=np.float64)
    squeeze = z.ndim == 1
    z = np.atleast_2d(z)
    quantized = np.zeros_like(z)
    residual = z.copy()
    indices = np.empty((z.shape[0], rq.active_layers), dtype=np.int64)
    residuals, noise = [], []
    for i, cb in enumerate(rq.layers[: rq.active_layers]):
        residuals.append(residual.copy())
        idx = cb.select(residual)
        indices[:, i] = idx
        sample = cb.mu[idx]
        eps = None
        if rng is not None and cb.kind == KIND_NORMAL:
            eps = rng.standard_normal(z.shape)
            sample = reparameterize(sample, cb.sigma[idx], eps)
        noise.append(eps)
        quantized = quantized + sample
        residual = residual - sample
    if squeeze:
        return QuantizationResult(quantized[0], indices[0], residual[0], residuals, noise)
    return QuantizationResult(quantized, indices, residual, residuals, noise)


def quantize_infer(rq: ResidualQuantizer, z) -> QuantizationResult:
    """Mean-only residual quantization; deterministic."""
    return quantize_train(rq, z, None)


def decode_indices(rq: ResidualQuantizer, indices) -> np.ndarray:
    """Sum of the selected means over layers, per frame."""
    indices = np.atleast_2d(np.asarray(indices))
    n_frames, n_layers = indices.shape
    if n_layers > len(rq.layers):
        raise DecodeError(f"{n_layers} layers requested but the quantizer has {len(rq.layers)}")
    out = np.zeros((n_frames, rq.dim))
    for layer in range(n_layers):
        col = indices[:, layer]
        bad = np.flatnonzero((col < 0) | (col >= rq.layers[layer].size))
        if bad.size:
            f = int(bad[0])
            raise DecodeError(f"index {int(col[f])} out of range at frame {f}, layer {layer}")
        out = out + rq.layers[layer].mu[col]
    return out


# -- training-time pieces ------------------------------------------------


def codebook_loss(z, selected_mu, selected_sigma=None, beta: float = 0.25, gamma: float = 1e-5) -> nx.Tensor:
    """Commitment + codebook + variance penalty, averaged over frames.

    ``||sg[mu] - z||^2 + beta ||mu - sg[z]||^2 + gamma ||sigma||^2`` per vector.
    Pass ``selected_sigma=None`` for a Euclidean codebook.
    """
    z, mu = nx.tensor(z), nx.tensor(selected_mu)
    if z.shape != mu.shape:
        raise ValueError(f"shape mismatch: z {z.shape} vs mu {mu.shape}")
    n = 1 if z.value.ndim == 1 else z.shape[0]
    commit = nx.square(nx.stop_gradient(mu) - z).sum()
    code = nx.square(mu - nx.stop_gradient(z)).sum() * beta
    total = commit + code
    if selected_sigma is not None and gamma:
        total = total + nx.square(selected_sigma).sum() * gamma
    return total * (1.0 / n)


def straight_through(z, quantized) -> nx.Tensor:
    """Forward value ``quantized``; the incoming gradient goes to ``z`` unchanged.

    If ``quantized`` is itself a tensor the gradient is also passed to it.
    """
    z = nx.tensor(z)
    q = quantized if isinstance(quantized, nx.Tensor) else nx.Tensor(quantized)
    if z.shape != q.shape:
        raise ValueError(f"shape mismatch: z {z.shape} vs quantized {q.shape}")

    def bw(out):
        nx.accumulate(z, out.adjoint)
        nx.accumulate(q, out.adjoint)

    return nx.record(q.value.copy(), (z, q), "straight_through", bw)


def training_graph(
    rq: ResidualQuantizer,
    z: nx.Tensor,
    result: QuantizationResult,
    beta: float,
    gamma: float,
    reconstruction_to_codebook: bool = False,
) -> tuple[nx.Tensor, nx.Tensor]:
    """Differentiable decoder input and summed per-layer codebook loss for one quantization pass.

    Each layer's loss sees the residual ``z - sum of earlier samples`` with the
    earlier samples held constant.
    """
    total = None
    sampled = None
    consumed = np.zeros_like(z.value)
    for i, cb in enumerate(rq.layers[: rq.active_layers]):
        idx = result.indices[:, i]
        mu = nx.take_rows(cb.means, idx)
        sigma = nx.exp(nx.take_rows(cb.log_sigmas, idx)) if cb.kind == KIND_NORMAL else None
        residual = z - consumed
        term = codebook_loss(residual, mu, sigma, beta, gamma if sigma is not None else 0.0)
        total = term if total is None else total + term
        eps = result.noise[i]
        sample = mu if eps is None else reparameterize(mu, sigma, eps)
        consumed = consumed + sample.value
        if reconstruction_to_codebook:
            sampled = sample if sampled is None else sampled + sample
    quantized = sampled if reconstruction_to_codebook else result.quantized
    return straight_through(z, quantized), total


# -- usage statistics ----------------------------------------------------


@dataclass
class UsageHistogram:
    counts: np.ndarray  # (n_layers, K)

    @classmethod
    def empty(cls, n_layers: int, codebook_size: int) -> UsageHistogram:
        return cls(np.zeros((n_layers, codebook_size), dtype=np.int64))

    def add(self, indices: np.ndarray) -> None:
        indices = np.atleast_2d(indices)
        for layer in range(indices.shape[1]):
            self.counts[layer] += np.bincount(indices[:, layer], minlength=self.counts.shape[1])

    def merge(self, other: UsageHistogram) -> UsageHistogram:
        return UsageHistogram(self.counts + other.counts)

    def entropies(self) -> list[float]:
        return [usage_entropy(row) for row in self.counts]


def usage_entropy(counts) -> float:
    """Shannon entropy in bits of the empirical code distribution."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("usage histogram is empty")
    p = counts[counts > 0] / total
    return float(max(0.0, -np.sum(p * np.log2(p))))


# -- initialisation ------------------------------------------------------


def init_codebooks(
    n_layers: int,
    codebook_size: int,
    sample_latents,
    seed: int | np.random.Generator,
    kind: int = KIND_NORMAL,
) -> ResidualQuantizer:
    """Seed each layer's means with distinct frames of the residual left by earlier layers."""
    latents = np.asarray(sample_latents, dtype=np.float64)
    if latents.shape[0] < codebook_size:
        raise InitError(f"need at least {codebook_size} sample frames, got {latents.shape[0]}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    residual = latents.copy()
    layers = []
    for _ in range(n_layers):
        picks = rng.choice(residual.shape[0], size=codebook_size, replace=False)
        cb = NormalCodebook(residual[picks]) if kind == KIND_NORMAL else EuclideanCodebook(residual[picks])
        layers.append(cb)
        residual = residual - cb.mu[cb.select(residual)]
    return ResidualQuantizer(layers)


# -- checkpoint file -----------------------------------------------------

_HEADER = struct.Struct("<4sIIIII")


def codebooks_to_bytes(rq: ResidualQuantizer) -> bytes:
    """Serialise the stack; layout documented in docs/formats.md."""
    parts = [_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, rq.codebook_size, rq.dim, len(rq.layers), rq.kind)]
    for cb in rq.layers:
        parts.append(cb.mu.astype("<f4").tobytes())
        if cb.kind == KIND_NORMAL:
            parts.append(cb.log_sigmas.value.astype("<f4").tobytes())
    return b"".join(parts)


def codebooks_from_bytes(data: bytes) -> ResidualQuantizer:
    if len(data) < _HEADER.size:
        raise CodebookFormatError("codebook file shorter than its header")
    magic, version, k, d, n_layers, kind = _HEADER.unpack_from(data)
    if magic != CODEBOOK_MAGIC:
        raise CodebookFormatError(f"bad magic {magic!r}")
    if version != CODEBOOK_VERSION:
        raise CodebookFormatError(f"unsupported codebook version {version}")
    if kind not in (KIND_NORMAL, KIND_EUCLIDEAN):
        raise CodebookFormatError(f"unknown codebook kind {kind}")
    per_layer = k * d * (2 if kind == KIND_NORMAL else 1)
    expected = _HEADER.size + 4 * per_layer * n_layers
    if len(data) != expected:
        raise CodebookFormatError(f"expected {expected} bytes, found {len(data)}")
    floats = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    layers = []
    for layer in floats.reshape(n_layers, per_layer):
        if kind == KIND_NORMAL:
            layers.append(NormalCodebook(layer[: k * d].reshape(k, d), layer[k * d :].reshape(k, d)))
        else:
            layers.append(EuclideanCodebook(layer.reshape(k, d)))
    return ResidualQuantizer(layers)


def save_codebooks(path, rq: ResidualQuantizer) -> None:
    Path(path).write_bytes(codebooks_to_bytes(rq))


def load_codebooks(path) -> ResidualQuantizer:
    return codebooks_from_bytes(Path(path).read_bytes())
