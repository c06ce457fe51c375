"""Generator, discriminator and encoder containers plus Gaussian sampling helpers.

The generator defines p(x | z) = N(x | mu_eta(z), diag(sigma^2)) with a
standard normal prior on z. ``sigma`` is shared across z and stored as
``log_sigma``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    MlpSpec,
    ParamVector,
    as_tensor,
    check_finite,
    init_mlp,
    mlp_backward_trace,
    mlp_forward,
    mlp_forward_trace,
)
from .errors import ConfigError

LOG_2PI = float(np.log(2.0 * np.pi))
# discriminator outputs are clamped to [D_CLAMP, 1 - D_CLAMP] before logs
D_CLAMP = 1e-7


@dataclass(frozen=True)
class NoiseBounds:
    sigma_low: float
    sigma_high: float

    def __post_init__(self):
        if not (0.0 < self.sigma_low <= self.sigma_high):
            raise ConfigError(
                f"noise bounds need 0 < sigma_low <= sigma_high, got [{self.sigma_low}, {self.sigma_high}]"
            )


@dataclass
class GeneratorParams:
    spec: MlpSpec
    eta: ParamVector
    log_sigma: np.ndarray

    @property
    def latent_dim(self) -> int:
        return self.spec.in_dim

    @property
    def data_dim(self) -> int:
        return self.spec.out_dim

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(self.spec, self.eta.copy(), self.log_sigma.copy())


@dataclass
class DiscriminatorParams:
    spec: MlpSpec
    phi: ParamVector

    def __post_init__(self):
        if self.spec.output_activation != "sigmoid" or self.spec.out_dim != 1:
            raise ConfigError("the discriminator must end in a single sigmoid unit")

    def copy(self) -> "DiscriminatorParams":
        return DiscriminatorParams(self.spec, self.phi.copy())


@dataclass
class EncoderParams:
    """Gaussian encoder q(z | x); the network emits ``[mean, log_var]``."""

    spec: MlpSpec
    gamma_params: ParamVector = field(repr=False)

    def __post_init__(self):
        if self.spec.out_dim % 2:
            raise ConfigError("encoder output width must be 2 * latent_dim")

    @property
    def latent_dim(self) -> int:
        return self.spec.out_dim // 2

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.spec, self.gamma_params.copy())


def make_generator(
    latent_dim: int,
    data_dim: int,
    hidden: tuple[int, ...],
    rng: np.random.Generator,
    log_sigma_init: float = 0.0,
    activation: str = "tanh",
) -> GeneratorParams:
    spec = MlpSpec((latent_dim, *hidden, data_dim), hidden_activation=activation)
    return GeneratorParams(spec, init_mlp(spec, rng), np.full(data_dim, float(log_sigma_init)))


def make_discriminator(
    data_dim: int,
    hidden: tuple[int, ...],
    rng: np.random.Generator,
    activation: str = "tanh",
) -> DiscriminatorParams:
    spec = MlpSpec((data_dim, *hidden, 1), hidden_activation=activation, output_activation="sigmoid")
    return DiscriminatorParams(spec, init_mlp(spec, rng))


def make_encoder(
    data_dim: int,
    latent_dim: int,
    hidden: tuple[int, ...],
    rng: np.random.Generator,
    activation: str = "tanh",
) -> EncoderParams:
    spec = MlpSpec((data_dim, *hidden, 2 * latent_dim), hidden_activation=activation)
    return EncoderParams(spec, init_mlp(spec, rng))


def generator_mean(gen: GeneratorParams, z) -> np.ndarray:
    return mlp_forward(gen.spec, gen.eta, as_tensor(z, "latent"))


def _match(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"{what}: shape {a.shape} does not match {b.shape}")


def reparam_sample(gen: GeneratorParams, z, eps) -> np.ndarray:
    """x(z, eps) = mu_eta(z) + sigma * eps."""
    mu = generator_mean(gen, z)
    eps = as_tensor(eps, "eps")
    _match(eps, mu, "eps")
    return mu + gen.sigma * eps


def noise_real_data(x, log_sigma, eps) -> np.ndarray:
    """Instance noise: x_hat = x + sigma * eps with the generator's sigma."""
    x = as_tensor(x, "data")
    eps = as_tensor(eps, "eps")
    _match(eps, x, "eps")
    sigma = np.exp(as_tensor(log_sigma, "log_sigma"))
    if sigma.shape != x.shape[-1:]:
        raise ConfigError(f"log_sigma shape {sigma.shape} does not match data width {x.shape[-1]}")
    return x + sigma * eps


def truncate_sigma(log_sigma, bounds: NoiseBounds) -> np.ndarray:
    """Project sigma onto [sigma_low, sigma_high], returned as log sigma."""
    return np.clip(np.asarray(log_sigma, dtype=np.float64), np.log(bounds.sigma_low), np.log(bounds.sigma_high))


def conditional_score_x(gen: GeneratorParams, x, z) -> np.ndarray:
    """grad_x log N(x | mu_eta(z), sigma^2 I) = -(x - mu_eta(z)) / sigma^2."""
    mu = generator_mean(gen, z)
    x = as_tensor(x, "data")
    _match(x, mu, "x")
    return -(x - mu) / gen.sigma ** 2


def diag_gaussian_logpdf(x, mean, log_var) -> np.ndarray:
    """Row-wise log N(x | mean, diag(exp(log_var)))."""
    x = np.asarray(x, dtype=np.float64)
    r2 = (x - mean) ** 2 / np.exp(log_var)
    return -0.5 * np.sum(r2 + log_var + LOG_2PI, axis=-1)


def conditional_logpdf(gen: GeneratorParams, x, z) -> np.ndarray:
    """log p_theta(x | z) per row."""
    mu = generator_mean(gen, z)
    return diag_gaussian_logpdf(x, mu, 2.0 * gen.log_sigma)


def prior_logpdf(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * np.sum(z * z + LOG_2PI, axis=-1)


def conditional_grads_theta(gen: GeneratorParams, x, z) -> tuple[ParamVector, np.ndarray]:
    """Gradient of sum_rows log p_theta(x | z) w.r.t. eta and log_sigma.

    Used by the score-identity checks; not on the training path.
    """
    trace = mlp_forward_trace(gen.spec, gen.eta, as_tensor(z, "latent"))
    mu = trace.output
    x = np.atleast_2d(as_tensor(x, "data"))
    _match(x, mu, "x")
    var = gen.sigma ** 2
    resid = x - mu
    grad_eta, _ = mlp_backward_trace(gen.spec, gen.eta, trace, resid / var)
    grad_log_sigma = np.sum(resid ** 2 / var - 1.0, axis=0)
    return grad_eta, grad_log_sigma


def encode(enc: EncoderParams, x) -> tuple[np.ndarray, np.ndarray]:
    out = mlp_forward(enc.spec, enc.gamma_params, as_tensor(x, "data"))
    k = enc.latent_dim
    mean, log_var = out[..., :k], out[..., k:]
    check_finite(np.exp(log_var), "encoder variance")
    return mean, log_var


def discriminate(disc: DiscriminatorParams, x) -> np.ndarray:
    """D_phi(x) for each row, clamped away from 0 and 1."""
    d = mlp_forward(disc.spec, disc.phi, as_tensor(x, "data"))
    return np.clip(d[..., 0], D_CLAMP, 1.0 - D_CLAMP)
