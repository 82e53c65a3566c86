"""Variational Gaussian linear classification head.

The head is a linear layer whose flattened weights follow a diagonal
Gaussian q = N(mu, diag(sigma^2)) with sigma = softplus(rho). Weight
samples use the reparameterization mu + eps * sigma, predictions average
T sampled softmax outputs, and the training objective is the standard
ELBO in loss form (negative log-likelihood plus KL to the prior scaled
by 1/dataset size).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numcore import DimensionError, Var

MU_INIT_STD = 0.01
SIGMA_INIT = 0.05


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass
class PriorSpec:
    """Zero-mean isotropic Gaussian prior over head weights."""

    variance: float = 10.0

    def __post_init__(self):
        if not self.variance > 0.0:
            raise ValueError(f"prior variance must be positive, got {self.variance}")


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over the flattened (weights + bias) vector.

    Layout: the first n_features * n_classes entries are the weight matrix
    (n_classes, n_features) in row-major order, the last n_classes entries
    are the bias.
    """

    mu: np.ndarray
    rho: np.ndarray
    n_features: int
    n_classes: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        n = (self.n_features + 1) * self.n_classes
        if self.mu.shape != (n,) or self.rho.shape != (n,):
            raise DimensionError(
                f"posterior needs mu/rho of shape ({n},), got {self.mu.shape} and {self.rho.shape}"
            )

    @property
    def size(self) -> int:
        return self.mu.size

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    def unpack(self, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a flat weight vector into (weight matrix, bias)."""
        d, c = self.n_features, self.n_classes
        return flat[: d * c].reshape(c, d), flat[d * c :]

    def copy(self) -> "GaussianPosterior":
        return GaussianPosterior(self.mu.copy(), self.rho.copy(), self.n_features, self.n_classes)


def init_posterior(n_features: int, n_classes: int, rng: np.random.Generator) -> GaussianPosterior:
    """Small random means, sigma started near SIGMA_INIT."""
    n = (n_features + 1) * n_classes
    mu = rng.normal(0.0, MU_INIT_STD, size=n)
    rho = np.full(n, inv_softplus(SIGMA_INIT))
    return GaussianPosterior(mu, rho, n_features, n_classes)


@dataclass
class WeightSample:
    """One reparameterized draw: values = mu + noise * sigma."""

    values: np.ndarray
    noise: np.ndarray


def sample_weights(post: GaussianPosterior, noise) -> WeightSample:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != post.mu.shape:
        raise DimensionError(f"noise shape {noise.shape} != posterior shape {post.mu.shape}")
    return WeightSample(post.mu + noise * post.sigma, noise)


def _check_noise(post: GaussianPosterior, samples: int, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (samples, post.size):
        raise DimensionError(f"need noise of shape ({samples}, {post.size}), got {noise.shape}")
    return noise


def predict_proba(post: GaussianPosterior, z, samples: int, noise) -> np.ndarray:
    """Average of `samples` sampled softmax predictions for a feature batch.

    `noise` is a (samples, posterior size) array of standard normal draws;
    passing zeros gives the deterministic mean-weight prediction.
    """
    from .numcore import softmax

    if samples < 1:
        raise ValueError(f"sample count must be >= 1, got {samples}")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != post.n_features:
        raise DimensionError(f"features have dim {z.shape[1]}, head expects {post.n_features}")
    noise = _check_noise(post, samples, noise)
    acc = np.zeros((z.shape[0], post.n_classes))
    for t in range(samples):
        w, b = post.unpack(sample_weights(post, noise[t]).values)
        acc += softmax(z @ w.T + b)
    return acc / samples


def predict_distribution(post: GaussianPosterior, z, samples: int, noise) -> np.ndarray:
    """Prediction distribution for a single feature vector."""
    return predict_proba(post, np.asarray(z, dtype=np.float64).reshape(1, -1), samples, noise)[0]


def kl_gauss_prior(post: GaussianPosterior, prior: PriorSpec) -> float:
    """Closed-form KL(N(mu, sigma^2) || N(0, prior.variance)) summed over coords."""
    var = post.sigma**2
    ratio = var / prior.variance
    val = 0.5 * float(np.sum(ratio + post.mu**2 / prior.variance - 1.0 - np.log(ratio)))
    return max(val, 0.0)


def elbo_loss(
    post: GaussianPosterior,
    features,
    labels,
    prior: PriorSpec,
    samples: int,
    noise,
    dataset_size: int,
    include_kl: bool = True,
) -> tuple[float, np.ndarray, np.ndarray]:
    """ELBO in loss form with gradients for (mu, rho).

    Averages per-draw cross-entropy over `samples` reparameterized weight
    draws and adds KL to the prior scaled by 1/dataset_size. Returns
    (value, grad_mu, grad_rho). `include_kl=False` drops the prior term,
    which together with zero noise turns the head into a plain
    deterministic linear classifier.
    """
    z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if z.shape[0] == 0:
        raise ValueError("empty batch")
    if z.shape[0] != y.shape[0]:
        raise DimensionError(f"batch mismatch: {z.shape[0]} features vs {y.shape[0]} labels")
    if samples < 1:
        raise ValueError(f"sample count must be >= 1, got {samples}")
    noise = _check_noise(post, samples, noise)

    mu = Var(post.mu)
    rho = Var(post.rho)
    sigma = rho.softplus()
    d, c = post.n_features, post.n_classes

    nll_sum = None
    for t in range(samples):
        flat = mu + sigma * noise[t]
        w = flat[: d * c].reshape(c, d)
        b = flat[d * c :]
        logp = (Var(z) @ w.T + b).log_softmax()
        ce = -logp.pick(y).mean()
        nll_sum = ce if nll_sum is None else nll_sum + ce
    loss = nll_sum / float(samples)

    if include_kl:
        var_ratio = sigma.square() / prior.variance
        kl_term = (var_ratio + mu.square() / prior.variance - 1.0 - var_ratio.log()).sum() * 0.5
        loss = loss + kl_term / float(dataset_size)

    loss.backward()
    return float(loss.value), mu.grad, rho.grad


# ---------------------------------------------------------------------------
# Checkpoint section format, shared with trainer checkpoints
# ---------------------------------------------------------------------------


def write_posterior(buf, post: GaussianPosterior) -> None:
    """Binary section: (n_features, n_classes) header then mu and rho."""
    buf.write(struct.pack("<II", post.n_features, post.n_classes))
    buf.write(post.mu.astype("<f8").tobytes())
    buf.write(post.rho.astype("<f8").tobytes())


def read_posterior(buf) -> GaussianPosterior:
    header = buf.read(8)
    if len(header) != 8:
        raise ValueError("truncated posterior header")
    d, c = struct.unpack("<II", header)
    n = (d + 1) * c
    raw = buf.read(2 * 8 * n)
    if len(raw) != 2 * 8 * n:
        raise ValueError("truncated posterior payload")
    mu = np.frombuffer(raw[: 8 * n], dtype="<f8").copy()
    rho = np.frombuffer(raw[8 * n :], dtype="<f8").copy()
    return GaussianPosterior(mu, rho, d, c)
