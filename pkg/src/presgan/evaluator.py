"""Log-likelihood evaluation and diversity metrics for a fitted generator.

log p(x*) is estimated by importance sampling with a Gaussian proposal whose
mean is the MAP latent (ascent started at a fitted encoder's mean) and whose
variance is the encoder variance inflated by an overdispersion factor.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .diffcore import (
    MlpSpec,
    ParamVector,
    as_tensor,
    check_finite,
    mlp_backward_trace,
    mlp_forward_trace,
)
from .errors import ConfigError, NumericError
from .hmc import posterior_logp_and_grad
from .models import (
    LOG_2PI,
    EncoderParams,
    GeneratorParams,
    diag_gaussian_logpdf,
    generator_mean,
    make_encoder,
    prior_logpdf,
)
from .trainer import AdamState, adam_step

log = logging.getLogger(__name__)

LABEL_SMOOTHING = 1e-8


# ---------------------------------------------------------------------------
# analytic linear-Gaussian model: mu(z) = A z + b, sigma diagonal


class LinearGaussianOracle:
    """Closed forms for p(x) = N(b, A A^T + diag(sigma^2)) with z ~ N(0, I)."""

    def __init__(self, A, b, sigma):
        self.A = np.atleast_2d(as_tensor(A, "A"))
        self.b = as_tensor(b, "b").reshape(-1)
        self.sigma = as_tensor(sigma, "sigma").reshape(-1)
        d, k = self.A.shape
        if self.b.shape != (d,) or self.sigma.shape != (d,):
            raise ConfigError("A, b and sigma have inconsistent sizes")
        self.cov = self.A @ self.A.T + np.diag(self.sigma ** 2)
        try:
            self._chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            raise NumericError("marginal covariance is singular") from None
        self.cov_inv = np.linalg.inv(self.cov)
        prec = np.eye(k) + self.A.T @ (self.A / self.sigma[:, None] ** 2)
        self.post_cov = np.linalg.inv(prec)
        self.post_cov = 0.5 * (self.post_cov + self.post_cov.T)

    @property
    def data_dim(self) -> int:
        return self.A.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.A.shape[1]

    def marginal_logpdf(self, x) -> np.ndarray:
        r = np.atleast_2d(x) - self.b
        sol = np.linalg.solve(self._chol, r.T)
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        out = -0.5 * (np.sum(sol * sol, axis=0) + logdet + self.data_dim * LOG_2PI)
        return out if np.ndim(x) > 1 else out[0]

    def entropy(self) -> float:
        _, logdet = np.linalg.slogdet(2.0 * np.pi * np.e * self.cov)
        return 0.5 * float(logdet)

    def entropy_grads(self) -> dict[str, np.ndarray]:
        """Gradients of the entropy w.r.t. A, b, sigma and log sigma."""
        d_sigma = np.diag(self.cov_inv) * self.sigma
        return {
            "A": self.cov_inv @ self.A,
            "b": np.zeros_like(self.b),
            "sigma": d_sigma,
            "log_sigma": d_sigma * self.sigma,
        }

    def marginal_logpdf_grads(self, x) -> dict[str, np.ndarray]:
        """Per-row gradients of log p(x) w.r.t. A, b and log sigma."""
        r = np.atleast_2d(x) - self.b
        u = r @ self.cov_inv  # rows of C^-1 (x - b)
        # d/dC log N = 0.5 (u u^T - C^-1)
        g_cov = 0.5 * (u[:, :, None] * u[:, None, :] - self.cov_inv[None])
        return {
            "A": 2.0 * g_cov @ self.A,
            "b": u,
            "log_sigma": 2.0 * np.einsum("nii->ni", g_cov) * self.sigma ** 2,
        }

    def posterior(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Mean rows and shared covariance of p(z | x)."""
        r = np.atleast_2d(x) - self.b
        mean = (r / self.sigma ** 2) @ self.A @ self.post_cov
        return (mean if np.ndim(x) > 1 else mean[0]), self.post_cov

    def sample_posterior(self, x, rng: np.random.Generator, n: int) -> np.ndarray:
        """n exact posterior draws per row of x, shape (n, B, latent_dim)."""
        mean, cov = self.posterior(np.atleast_2d(x))
        chol = np.linalg.cholesky(cov)
        noise = rng.standard_normal((n, *mean.shape))
        return mean[None] + noise @ chol.T

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Draw (z, eps, x) with x = A z + b + sigma * eps."""
        z = rng.standard_normal((n, self.latent_dim))
        eps = rng.standard_normal((n, self.data_dim))
        return z, eps, z @ self.A.T + self.b + self.sigma * eps

    def as_generator(self) -> GeneratorParams:
        spec = MlpSpec((self.latent_dim, self.data_dim))
        eta = ParamVector([("W0", self.A.T.copy()), ("b0", self.b.copy())])
        return GeneratorParams(spec, eta, np.log(self.sigma))

    def exact_sampler(self, n: int):
        """A drop-in replacement for HMC inside the entropy-gradient estimator."""

        def sampler(gen, x, z_init, rng):
            return self.sample_posterior(x, rng, n), np.ones(len(x), dtype=bool)

        return sampler


def oracle_linear_gaussian(A, b, sigma) -> LinearGaussianOracle:
    return LinearGaussianOracle(A, b, sigma)


# ---------------------------------------------------------------------------
# encoder


def _encoder_elbo_grad(gen, enc, x, rng):
    trace = mlp_forward_trace(enc.spec, enc.gamma_params, x)
    k = enc.latent_dim
    mean, log_var = trace.output[:, :k], trace.output[:, k:]
    u = rng.standard_normal(mean.shape)
    std = np.exp(0.5 * log_var)
    z = mean + std * u
    logp, gz = posterior_logp_and_grad(gen, x, z)
    # -log q(z|x) under the reparameterisation
    neg_logq = 0.5 * np.sum(u * u + log_var + LOG_2PI, axis=1)
    elbo = logp + neg_logq
    n = len(x)
    up = np.concatenate([-gz, -(gz * 0.5 * std * u + 0.5)], axis=1) / n
    grad, _ = mlp_backward_trace(enc.spec, enc.gamma_params, trace, up)
    return float(np.mean(elbo)), grad


def elbo(gen: GeneratorParams, enc: EncoderParams, x, rng: np.random.Generator, n_samples: int = 1) -> np.ndarray:
    """Monte Carlo ELBO per row of x."""
    x = np.atleast_2d(as_tensor(x, "data"))
    mean, log_var = encode_rows(enc, x)
    total = np.zeros(len(x))
    for _ in range(n_samples):
        z = mean + np.exp(0.5 * log_var) * rng.standard_normal(mean.shape)
        logp, _ = posterior_logp_and_grad(gen, x, z)
        total += logp - diag_gaussian_logpdf(z, mean, log_var)
    return total / n_samples


def encode_rows(enc: EncoderParams, x: np.ndarray):
    out = mlp_forward_trace(enc.spec, enc.gamma_params, x).output
    k = enc.latent_dim
    return out[:, :k], out[:, k:]


def fit_encoder(
    gen: GeneratorParams,
    dataset,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = (),
    batch_size: int = 100,
    beta1: float = 0.5,
    beta2: float = 0.999,
    encoder: EncoderParams | None = None,
) -> EncoderParams:
    """Fit q(z | x) to the frozen generator by maximising the ELBO.

    Uses one reparameterised sample per datapoint and Adam. With
    ``epochs == 0`` the (fresh or given) encoder is returned unchanged.
    """
    x = np.atleast_2d(as_tensor(getattr(dataset, "points", dataset), "dataset"))
    if epochs < 0:
        raise ConfigError("epochs must be non-negative")
    if encoder is None:
        encoder = make_encoder(gen.data_dim, gen.latent_dim, tuple(hidden), rng)
    enc = encoder.copy()
    if enc.spec.in_dim != gen.data_dim or enc.latent_dim != gen.latent_dim:
        raise ConfigError("encoder does not match generator dimensions")
    state = AdamState.zeros(enc.gamma_params.size)
    n = len(x)
    b = min(batch_size, n)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        for i in range(max(1, n // b)):
            batch = x[perm[i * b:(i + 1) * b]]
            value, grad = _encoder_elbo_grad(gen, enc, batch, rng)
            if not np.isfinite(value):
                raise NumericError(f"non-finite ELBO in encoder epoch {epoch}")
            flat, state = adam_step(state, enc.gamma_params.flatten(), grad.flatten(), lr, beta1, beta2)
            enc = EncoderParams(enc.spec, enc.gamma_params.unflatten(check_finite(flat, "encoder parameters")))
    return enc


# ---------------------------------------------------------------------------
# proposal and importance sampling


@dataclass
class ProposalParams:
    mean: np.ndarray
    diag_var: np.ndarray
    overdispersion_factor: float = 1.0

    def __post_init__(self):
        self.mean = as_tensor(self.mean, "proposal mean")
        self.diag_var = as_tensor(self.diag_var, "proposal variance")
        if self.mean.shape != self.diag_var.shape:
            raise ConfigError("proposal mean and variance shapes differ")
        if np.any(self.diag_var <= 0):
            raise ConfigError("proposal variance must be positive")
        if self.overdispersion_factor < 1.0:
            raise ConfigError("overdispersion factor must be >= 1")

    def row(self, i: int) -> "ProposalParams":
        return ProposalParams(self.mean[i], self.diag_var[i], self.overdispersion_factor)


def map_proposal(
    gen: GeneratorParams,
    encoder: EncoderParams,
    x_star,
    map_steps: int = 200,
    map_lr: float = 0.01,
    factor: float = 1.2,
    beta1: float = 0.5,
    beta2: float = 0.999,
) -> ProposalParams:
    """Gaussian proposal per row of ``x_star``.

    Mean: Adam ascent on log p(x* | z) + log p(z) from the encoder mean.
    Variance: ``factor`` times the encoder variance.
    """
    if factor < 1.0:
        raise ConfigError("overdispersion factor must be >= 1")
    if map_steps < 0:
        raise ConfigError("map_steps must be non-negative")
    x = as_tensor(x_star, "x_star")
    single = x.ndim == 1
    x = np.atleast_2d(x)
    mean, log_var = encode_rows(encoder, x)
    z = mean.copy()
    state = AdamState.zeros(z.size)
    failed = np.zeros(len(x), dtype=bool)
    for _ in range(map_steps):
        try:
            _, g = posterior_logp_and_grad(gen, x, z)
        except Exception as exc:  # NumericError or overflow from a diverging row
            log.warning("MAP ascent diverged (%s); using encoder means", exc)
            failed[:] = True
            break
        flat, state = adam_step(state, z.ravel(), -g.ravel(), map_lr, beta1, beta2)
        z = flat.reshape(z.shape)
        bad = ~np.all(np.isfinite(z), axis=1)
        if bad.any():
            failed |= bad
            z[bad] = mean[bad]
    if failed.any():
        log.warning("MAP ascent failed for %d rows; falling back to encoder mean", int(failed.sum()))
        z[failed] = mean[failed]
    var = factor * np.exp(log_var)
    if single:
        return ProposalParams(z[0], var[0], factor)
    return ProposalParams(z, var, factor)


def truncated_gaussian_logpdf(x, mean, sigma, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Sum over the last axis of log N(x | mean, sigma^2) / P(low <= X <= high)."""
    x = np.asarray(x, dtype=np.float64)
    a = (low - mean) / sigma
    b = (high - mean) / sigma
    lb, la = log_ndtr(b), log_ndtr(a)
    # log(Phi(b) - Phi(a)), stable when both tails are tiny
    log_mass = lb + np.log1p(-np.exp(la - lb))
    r = (x - mean) / sigma
    logpdf = -0.5 * (r * r + LOG_2PI) - np.log(sigma)
    return np.sum(logpdf - log_mass, axis=-1)


def log_mean_exp(log_w, axis: int = -1) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=np.float64)
    return logsumexp(log_w, axis=axis) - np.log(log_w.shape[axis])


def importance_loglik(
    gen: GeneratorParams,
    proposal: ProposalParams,
    x_star,
    S: int,
    rng: np.random.Generator,
    likelihood: str = "gaussian",
    interval: tuple[float, float] = (-1.0, 1.0),
):
    """Importance-sampling estimate of log p(x*) with S proposal draws.

    ``likelihood="truncated_gaussian"`` renormalises each output dimension
    to ``interval``. Returns a float for a single x*, else one value per row.
    """
    if S < 1:
        raise ConfigError("need at least one importance sample")
    if likelihood not in ("gaussian", "truncated_gaussian"):
        raise ConfigError(f"unknown likelihood {likelihood!r}")
    x = as_tensor(x_star, "x_star")
    single = x.ndim == 1
    x = np.atleast_2d(x)
    mean = np.atleast_2d(proposal.mean)
    var = np.atleast_2d(proposal.diag_var)
    if len(mean) != len(x):
        raise ConfigError("one proposal per test point is required")
    sigma = gen.sigma
    out = np.empty(len(x))
    for i in range(len(x)):
        z = mean[i] + np.sqrt(var[i]) * rng.standard_normal((S, mean.shape[1]))
        mu = generator_mean(gen, z)
        if likelihood == "gaussian":
            log_lik = diag_gaussian_logpdf(x[i], mu, 2.0 * gen.log_sigma)
        else:
            log_lik = truncated_gaussian_logpdf(x[i], mu, sigma, *interval)
        log_w = log_lik + prior_logpdf(z) - diag_gaussian_logpdf(z, mean[i], np.log(var[i]))
        if not np.all(np.isfinite(log_w)):
            raise NumericError("non-finite importance weights")
        out[i] = log_mean_exp(log_w)
    return float(out[0]) if single else out


def estimate_loglik(
    gen: GeneratorParams,
    encoder: EncoderParams,
    x_test,
    S: int,
    rng: np.random.Generator,
    map_steps: int = 200,
    map_lr: float = 0.01,
    factor: float = 1.2,
    likelihood: str = "gaussian",
) -> np.ndarray:
    proposal = map_proposal(gen, encoder, x_test, map_steps, map_lr, factor)
    return np.atleast_1d(importance_loglik(gen, proposal, x_test, S, rng, likelihood))


# ---------------------------------------------------------------------------
# diversity metrics


@dataclass
class ModeAssignment:
    labels: np.ndarray
    captured_mask: np.ndarray
    soft_probs: np.ndarray

    @property
    def modes_captured(self) -> int:
        return int(self.captured_mask.sum())


def assign_modes(samples, centers, mode_std: float) -> ModeAssignment:
    """Bayes-classify samples under an equal-weight isotropic Gaussian mixture.

    A mode counts as captured when at least one sample is labelled with it
    and lies within 3 * mode_std of its center.
    """
    if not mode_std > 0:
        raise ConfigError("mode_std must be positive")
    x = np.atleast_2d(as_tensor(samples, "samples"))
    c = np.atleast_2d(as_tensor(centers, "centers"))
    if len(c) < 1 or c.shape[1] != x.shape[1]:
        raise ConfigError("centers must be a non-empty (K, dim) array matching the samples")
    d2 = np.sum((x[:, None, :] - c[None, :, :]) ** 2, axis=-1)
    logits = -d2 / (2.0 * mode_std ** 2)
    labels = np.argmax(logits, axis=1)
    soft = np.exp(logits - logits.max(axis=1, keepdims=True))
    soft /= soft.sum(axis=1, keepdims=True)
    near = d2[np.arange(len(x)), labels] <= (3.0 * mode_std) ** 2
    captured = np.zeros(len(c), dtype=bool)
    captured[labels[near]] = True
    return ModeAssignment(labels, captured, soft)


def label_kl(gen_soft, real_soft, smoothing: float = LABEL_SMOOTHING) -> float:
    """KL(mean gen_soft || mean real_soft) after mixing both with uniform."""
    p = np.mean(np.atleast_2d(as_tensor(gen_soft, "gen_soft")), axis=0)
    q = np.mean(np.atleast_2d(as_tensor(real_soft, "real_soft")), axis=0)
    if p.shape != q.shape:
        raise ConfigError("label distributions have different numbers of classes")
    k = p.size
    p = (1.0 - smoothing) * p / p.sum() + smoothing / k
    q = (1.0 - smoothing) * q / q.sum() + smoothing / k
    return max(0.0, float(np.sum(p * (np.log(p) - np.log(q)))))


def sample_generator(gen: GeneratorParams, n: int, rng: np.random.Generator, mean_only: bool = False) -> np.ndarray:
    z = rng.standard_normal((n, gen.latent_dim))
    mu = generator_mean(gen, z)
    if mean_only:
        return mu
    return mu + gen.sigma * rng.standard_normal(mu.shape)


@dataclass
class EvalReport:
    loglik: list[float] = field(default_factory=list)
    mean_loglik: float | None = None
    num_importance_samples: int | None = None
    modes_captured: int | None = None
    num_modes: int | None = None
    label_kl: float | None = None
    label_kl_reverse: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label_kl is not None and self.label_kl < 0:
            raise ConfigError("label_kl must be non-negative")
        if self.modes_captured is not None and self.num_modes is not None:
            if not 0 <= self.modes_captured <= self.num_modes:
                raise ConfigError("modes_captured out of range")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def diversity_metrics(gen: GeneratorParams, centers, mode_std: float, real_points, n: int, rng) -> dict:
    """Modes captured and label KL (both directions) of generated samples."""
    fake = sample_generator(gen, n, rng)
    g = assign_modes(fake, centers, mode_std)
    r = assign_modes(real_points, centers, mode_std)
    return {
        "modes_captured": g.modes_captured,
        "num_modes": len(np.atleast_2d(centers)),
        "label_kl": label_kl(g.soft_probs, r.soft_probs),
        "label_kl_reverse": label_kl(r.soft_probs, g.soft_probs),
    }
