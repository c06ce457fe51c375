"""Hamiltonian Monte Carlo over the generator posterior p(z | x).

The target is log p(x | z) + log p(z) with a diagonal Gaussian likelihood and
a standard normal prior. Chains for different rows of ``x`` are independent;
the batched sampler advances all of them together and shares one step size.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .diffcore import as_tensor, check_finite, mlp_backward_trace, mlp_forward_trace
from .errors import ConfigError, NumericError
from .models import LOG_2PI, GeneratorParams

log = logging.getLogger(__name__)

ADAPT_GAIN = 0.05
THREADS_ENV = "PRESGAN_THREADS"


@dataclass(frozen=True)
class HmcConfig:
    burn_in: int = 2
    num_samples: int = 2
    leapfrog_steps: int = 5
    step_size: float = 0.02
    target_accept: float = 0.67
    adapt: bool = True

    def __post_init__(self):
        if self.burn_in < 0:
            raise ConfigError("burn_in must be non-negative")
        if self.num_samples < 1:
            raise ConfigError("num_samples must be positive")
        if self.leapfrog_steps < 1:
            raise ConfigError("leapfrog_steps must be positive")
        if not self.step_size > 0:
            raise ConfigError("step_size must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError("target_accept must lie in (0, 1)")


@dataclass
class HmcResult:
    samples: np.ndarray  # (M, latent_dim)
    accept_rate: float
    final_step_size: float


@dataclass
class BatchHmcResult:
    samples: np.ndarray  # (M, B, latent_dim)
    accept_rate: float
    chain_accept_rate: np.ndarray  # (B,)
    final_step_size: float
    valid: np.ndarray  # (B,) chains whose start state was finite


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


def _logp_grad(gen: GeneratorParams, x: np.ndarray, z: np.ndarray, check: bool):
    trace = mlp_forward_trace(gen.spec, gen.eta, z, check=check)
    var = np.exp(2.0 * gen.log_sigma)
    resid = x - trace.output
    logp = -0.5 * np.sum(resid * resid / var + 2.0 * gen.log_sigma + LOG_2PI, axis=-1)
    logp = logp - 0.5 * np.sum(z * z + LOG_2PI, axis=-1)
    _, gz = mlp_backward_trace(gen.spec, gen.eta, trace, resid / var, param_grads=False, check=check)
    return logp, gz - z


def posterior_logp_and_grad(gen: GeneratorParams, x, z) -> tuple[np.ndarray, np.ndarray]:
    """log p(x | z) + log p(z) and its gradient in z.

    Accepts a single pair (1-D ``x`` and ``z``) or matching batches of rows.
    """
    x = as_tensor(x, "data")
    z = as_tensor(z, "latent")
    single = z.ndim == 1
    x2, z2 = np.atleast_2d(x), np.atleast_2d(z)
    if x2.shape[0] != z2.shape[0]:
        raise ConfigError(f"{x2.shape[0]} data rows but {z2.shape[0]} latent rows")
    logp, grad = _logp_grad(gen, x2, z2, check=True)
    check_finite(logp, "posterior log density")
    if single:
        return float(logp[0]), grad[0]
    return logp, grad


def _leapfrog_raw(gen, x, z, p, grad, step, n_steps):
    """Leapfrog from (z, p) given grad log p at z; returns end state, logp, grad."""
    with np.errstate(over="ignore", invalid="ignore"):
        p = p + 0.5 * step * grad
        for i in range(n_steps):
            z = z + step * p
            logp, grad = _logp_grad(gen, x, z, check=False)
            if i < n_steps - 1:
                p = p + step * grad
        p = p + 0.5 * step * grad
    return z, p, logp, grad


def leapfrog(gen: GeneratorParams, x, z0, p0, step: float, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Integrate Hamiltonian dynamics with potential -log p(x, z), unit mass."""
    if not step > 0:
        raise ConfigError("leapfrog step must be positive")
    if n_steps < 1:
        raise ConfigError("need at least one leapfrog step")
    x = as_tensor(x, "data")
    z0 = as_tensor(z0, "latent")
    p0 = as_tensor(p0, "momentum")
    single = z0.ndim == 1
    x2, z2, p2 = np.atleast_2d(x), np.atleast_2d(z0), np.atleast_2d(p0)
    _, grad = _logp_grad(gen, x2, z2, check=True)
    z, p, _, _ = _leapfrog_raw(gen, x2, z2, p2, grad, step, n_steps)
    check_finite(z, "leapfrog position")
    check_finite(p, "leapfrog momentum")
    return (z[0], p[0]) if single else (z, p)


def _chunks(n: int, workers: int) -> list[slice]:
    bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _frozen_step(log_steps: list[float]) -> float:
    # geometric mean over the second half of burn-in; with a burn-in of one
    # or two iterations this is just the last adapted value
    tail = log_steps[len(log_steps) // 2:]
    return float(np.exp(np.mean(tail)))


def sample_posterior_batch(
    gen: GeneratorParams,
    x,
    z_init,
    config: HmcConfig,
    rng: np.random.Generator,
    step_size: float | None = None,
    workers: int | None = None,
) -> BatchHmcResult:
    """Run one Metropolis-adjusted HMC chain per row of ``x``.

    Each chain starts at the matching row of ``z_init``. ``config.burn_in``
    iterations are discarded, then ``config.num_samples`` are kept. With
    ``config.adapt`` the shared step size is nudged towards
    ``target_accept`` during burn-in only, using the batch mean acceptance
    indicator, and the step used afterwards is the geometric mean of the
    step sizes visited in the second half of burn-in. ``accept_rate`` counts
    the retained iterations.

    All random draws happen in this thread, so ``workers`` only changes how
    the leapfrog work is split, never the result.
    """
    x = np.atleast_2d(as_tensor(x, "data"))
    z = np.atleast_2d(np.asarray(z_init, dtype=np.float64)).copy()
    if x.shape[0] != z.shape[0]:
        raise ConfigError(f"{x.shape[0]} data rows but {z.shape[0]} initial latents")
    n_chains, latent_dim = z.shape
    step = float(config.step_size if step_size is None else step_size)
    workers = default_workers() if workers is None else int(workers)

    valid = np.all(np.isfinite(z), axis=1)
    if not valid.all():
        log.warning("%d HMC chains have a non-finite start and are skipped", int((~valid).sum()))
        z[~valid] = 0.0
    logp, grad = _logp_grad(gen, x, z, check=False)
    bad = ~(np.isfinite(logp) & np.all(np.isfinite(grad), axis=1))
    if bad.any():
        log.warning("%d HMC chains have a non-finite start density and are skipped", int(bad.sum()))
        valid &= ~bad
        z[bad] = 0.0
        logp[bad] = 0.0
        grad[bad] = 0.0
    if not valid.any():
        raise NumericError("every HMC chain failed to initialise")

    chunks = _chunks(n_chains, workers)
    pool = ThreadPoolExecutor(max_workers=len(chunks)) if len(chunks) > 1 else None

    def integrate(p0):
        if pool is None:
            return _leapfrog_raw(gen, x, z, p0, grad, step, config.leapfrog_steps)
        parts = list(pool.map(
            lambda s: _leapfrog_raw(gen, x[s], z[s], p0[s], grad[s], step, config.leapfrog_steps),
            chunks,
        ))
        return tuple(np.concatenate([part[i] for part in parts]) for i in range(4))

    samples = np.empty((config.num_samples, n_chains, latent_dim))
    accepted = np.zeros(n_chains)
    log_steps = []
    try:
        for it in range(config.burn_in + config.num_samples):
            p0 = rng.standard_normal((n_chains, latent_dim))
            log_u = np.log(rng.uniform(size=n_chains))
            z_new, p_new, logp_new, grad_new = integrate(p0)
            with np.errstate(over="ignore", invalid="ignore"):
                h_old = -logp + 0.5 * np.sum(p0 * p0, axis=1)
                h_new = -logp_new + 0.5 * np.sum(p_new * p_new, axis=1)
                delta = h_new - h_old
            finite = (
                np.isfinite(delta)
                & np.all(np.isfinite(z_new), axis=1)
                & np.all(np.isfinite(grad_new), axis=1)
            )
            accept = finite & valid & (log_u < -np.where(finite, delta, np.inf))
            z = np.where(accept[:, None], z_new, z)
            logp = np.where(accept, logp_new, logp)
            grad = np.where(accept[:, None], grad_new, grad)
            if it < config.burn_in:
                if config.adapt:
                    rate = accept[valid].mean()
                    step *= float(np.exp(ADAPT_GAIN * (rate - config.target_accept)))
                    log_steps.append(np.log(step))
                    if it == config.burn_in - 1:
                        step = _frozen_step(log_steps)
            else:
                samples[it - config.burn_in] = z
                accepted += accept
    finally:
        if pool is not None:
            pool.shutdown()

    chain_rate = accepted / config.num_samples
    return BatchHmcResult(
        samples=samples,
        accept_rate=float(chain_rate[valid].mean()),
        chain_accept_rate=chain_rate,
        final_step_size=step,
        valid=valid,
    )


def sample_posterior(
    gen: GeneratorParams,
    x,
    z_init,
    config: HmcConfig,
    rng: np.random.Generator,
    step_size: float | None = None,
) -> HmcResult:
    """Single-chain HMC for one observation ``x`` started at ``z_init``."""
    x = as_tensor(x, "data")
    z_init = as_tensor(z_init, "latent")
    if x.ndim != 1 or z_init.ndim != 1:
        raise ConfigError("sample_posterior takes one observation; use sample_posterior_batch for batches")
    res = sample_posterior_batch(gen, x[None], z_init[None], config, rng, step_size=step_size, workers=1)
    return HmcResult(res.samples[:, 0, :], res.accept_rate, res.final_step_size)
