"""Entropy-regularised adversarial training of a prescribed Gaussian generator.

Per iteration: noise the real minibatch with the generator's sigma, update the
discriminator, draw HMC samples from p(z | x) started at the z that produced
each fake x, then step eta and log sigma on

    mean log(1 - D(x(z, eps))) + lam * (-H(p_theta)),

and finally clamp sigma into its bounds.
"""
from __future__ import annotations

import logging
import math
from dataclasses import MISSING, asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import seeding
from .diffcore import ParamVector, as_tensor, check_finite, mlp_backward_trace, mlp_forward, mlp_forward_trace
from .errors import ConfigError, NumericError
from .hmc import HmcConfig, sample_posterior_batch
from .models import (
    D_CLAMP,
    DiscriminatorParams,
    GeneratorParams,
    NoiseBounds,
    noise_real_data,
    truncate_sigma,
)

log = logging.getLogger(__name__)

SCORE_VARIANTS = ("fixed", "literal")


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of the training loop.

    ``score_at="fixed"`` evaluates the conditional score at the generated x
    for every posterior sample; ``"literal"`` re-generates x from each
    posterior sample with the same eps (kept for comparison only).
    """

    lam: float
    sigma_low: float
    sigma_high: float
    hmc_samples: int
    burn_in: int
    leapfrog_steps: int
    hmc_step_size: float
    target_accept: float
    lr_gen: float
    lr_disc: float
    lr_sigma: float
    adam_beta1: float
    adam_beta2: float
    batch_size: int
    epochs: int
    disc_steps_per_gen_step: int
    seed: int
    non_saturating: bool = False
    score_at: str = "fixed"
    hmc_adapt: bool = True

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError("lam must be non-negative")
        for name in ("lr_gen", "lr_disc", "lr_sigma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        for name in ("batch_size", "epochs", "disc_steps_per_gen_step"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.score_at not in SCORE_VARIANTS:
            raise ConfigError(f"score_at must be one of {SCORE_VARIANTS}")
        self.bounds  # validates sigma bounds
        self.hmc  # validates HMC fields

    @property
    def bounds(self) -> NoiseBounds:
        return NoiseBounds(self.sigma_low, self.sigma_high)

    @property
    def hmc(self) -> HmcConfig:
        return HmcConfig(
            burn_in=self.burn_in,
            num_samples=self.hmc_samples,
            leapfrog_steps=self.leapfrog_steps,
            step_size=self.hmc_step_size,
            target_accept=self.target_accept,
            adapt=self.hmc_adapt,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        required = {f.name for f in fields(cls) if f.default is MISSING}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        missing = required - set(d)
        if missing:
            raise ConfigError(f"missing training keys: {sorted(missing)}")
        kw = dict(d)
        try:
            for f in fields(cls):
                if f.name not in kw:
                    continue
                if f.type == "int":
                    if isinstance(kw[f.name], bool) or float(kw[f.name]) != int(kw[f.name]):
                        raise ConfigError(f"{f.name} must be an integer")
                    kw[f.name] = int(kw[f.name])
                elif f.type == "float":
                    kw[f.name] = float(kw[f.name])
                elif f.type == "bool" and not isinstance(kw[f.name], bool):
                    raise ConfigError(f"{f.name} must be true or false")
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad training value: {exc}") from None
        return cls(**kw)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def adam_step(
    state: AdamState,
    params: np.ndarray,
    grads: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps_hat: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step; inputs are left untouched."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ConfigError(f"Adam shapes differ: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps_hat)
    return new, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# gradients


def _disc_loss_grad(disc: DiscriminatorParams, x_real: np.ndarray, x_fake: np.ndarray):
    n_real, n_fake = len(x_real), len(x_fake)
    trace = mlp_forward_trace(disc.spec, disc.phi, np.concatenate([x_real, x_fake]))
    d = trace.output[:, 0]
    dc = np.clip(d, D_CLAMP, 1.0 - D_CLAMP)
    loss = -np.mean(np.log(dc[:n_real])) - np.mean(np.log1p(-dc[n_real:]))
    inside = (d > D_CLAMP) & (d < 1.0 - D_CLAMP)
    up = np.empty_like(d)
    up[:n_real] = -1.0 / (n_real * dc[:n_real])
    up[n_real:] = 1.0 / (n_fake * (1.0 - dc[n_real:]))
    up = np.where(inside, up, 0.0)
    grad, _ = mlp_backward_trace(disc.spec, disc.phi, trace, up[:, None])
    return float(loss), grad


def disc_loss_and_grad(
    disc: DiscriminatorParams,
    gen: GeneratorParams,
    x_batch,
    rng: np.random.Generator,
) -> tuple[float, ParamVector]:
    """Discriminator loss on noised real data vs. fresh generated data.

    loss = -mean log D(x + sigma*eps) - mean log(1 - D(mu(z) + sigma*s)).
    """
    x = np.atleast_2d(as_tensor(x_batch, "data batch"))
    if len(x) == 0:
        raise ConfigError("empty minibatch")
    b, dim = x.shape
    x_hat = noise_real_data(x, gen.log_sigma, rng.standard_normal((b, dim)))
    z = rng.standard_normal((b, gen.latent_dim))
    s = rng.standard_normal((b, dim))
    x_fake = mlp_forward(gen.spec, gen.eta, z) + gen.sigma * s
    loss, grad = _disc_loss_grad(disc, x_hat, x_fake)
    if not math.isfinite(loss):
        raise NumericError("non-finite discriminator loss")
    return loss, grad


def _adversarial_upstream(disc: DiscriminatorParams, x: np.ndarray, non_saturating: bool):
    """Loss and dLoss/dx for the generator's adversarial term, batch-mean."""
    b = len(x)
    trace = mlp_forward_trace(disc.spec, disc.phi, x)
    d = trace.output[:, 0]
    dc = np.clip(d, D_CLAMP, 1.0 - D_CLAMP)
    inside = (d > D_CLAMP) & (d < 1.0 - D_CLAMP)
    if non_saturating:
        loss = -np.mean(np.log(dc))
        up = -1.0 / (b * dc)
    else:
        loss = np.mean(np.log1p(-dc))
        up = -1.0 / (b * (1.0 - dc))
    up = np.where(inside, up, 0.0)
    _, dx = mlp_backward_trace(disc.spec, disc.phi, trace, up[:, None], param_grads=False)
    return float(loss), dx


def gen_adversarial_grad(
    disc: DiscriminatorParams,
    gen: GeneratorParams,
    z_batch,
    eps_batch,
    non_saturating: bool = False,
) -> tuple[ParamVector, np.ndarray]:
    """Batch-mean gradient of log(1 - D(mu(z) + sigma*eps)) w.r.t. eta and log sigma."""
    z = np.atleast_2d(as_tensor(z_batch, "latent batch"))
    eps = np.atleast_2d(as_tensor(eps_batch, "eps batch"))
    trace = mlp_forward_trace(gen.spec, gen.eta, z)
    if eps.shape != trace.output.shape:
        raise ConfigError(f"eps shape {eps.shape} != generator output {trace.output.shape}")
    x = trace.output + gen.sigma * eps
    _, dx = _adversarial_upstream(disc, x, non_saturating)
    grad_eta, _ = mlp_backward_trace(gen.spec, gen.eta, trace, dx)
    grad_log_sigma = np.sum(dx * eps, axis=0) * gen.sigma
    return grad_eta, grad_log_sigma


@dataclass
class EntropyGrad:
    """Batch-mean estimate of the gradient of the NEGATIVE entropy."""

    grad_eta: ParamVector
    grad_log_sigma: np.ndarray
    accept_rate: float
    step_size: float
    n_used: int


# (gen, x, z_init, rng) -> samples of shape (M, B, latent_dim) and a validity mask
PosteriorSampler = Callable[[GeneratorParams, np.ndarray, np.ndarray, np.random.Generator], tuple]


def _entropy_grads(gen, trace, eps, samples, valid, score_at):
    """Batch-mean grad of -H w.r.t. eta and log sigma from posterior samples.

    ``trace`` is the generator forward pass at the original latents.
    """
    sigma = gen.sigma
    m, b, k = samples.shape
    samples = np.where(valid[None, :, None], samples, 0.0)
    w = (valid / valid.sum())[:, None]
    if score_at == "fixed":
        x = trace.output + sigma * eps
        mu_m = mlp_forward(gen.spec, gen.eta, samples.reshape(m * b, k)).reshape(m, b, -1)
        # mean over z_m of (x - mu(z_m)) / sigma^2 estimates -grad_x log p(x)
        neg_score = np.mean((x[None] - mu_m) / (sigma * sigma), axis=0)
        up = -np.where(valid[:, None], neg_score, 0.0) * w
        grad_eta, _ = mlp_backward_trace(gen.spec, gen.eta, trace, up)
    else:
        # x_m = mu(z_m) + sigma*eps makes (x_m - mu(z_m)) / sigma^2 = eps / sigma,
        # chained with d mu / d eta at z_m
        up = -np.where(valid[:, None], eps / sigma, 0.0) * w
        up_m = np.broadcast_to(up / m, (m, b, up.shape[1])).reshape(m * b, -1)
        t_m = mlp_forward_trace(gen.spec, gen.eta, samples.reshape(m * b, k))
        grad_eta, _ = mlp_backward_trace(gen.spec, gen.eta, t_m, up_m)
    grad_log_sigma = np.sum(up * eps, axis=0) * sigma
    return grad_eta, grad_log_sigma


def _draw_posterior(gen, x, z, hmc_cfg, rng, step_size, posterior_sampler):
    if posterior_sampler is None:
        res = sample_posterior_batch(gen, x, z, hmc_cfg, rng, step_size=step_size)
        return res.samples, res.valid, res.accept_rate, res.final_step_size
    samples, valid = posterior_sampler(gen, x, z, rng)
    return np.asarray(samples, dtype=np.float64), np.asarray(valid, dtype=bool), float("nan"), float("nan")


def entropy_grad(
    gen: GeneratorParams,
    z_batch,
    eps_batch,
    hmc_cfg: HmcConfig,
    rng: np.random.Generator,
    step_size: float | None = None,
    posterior_sampler: PosteriorSampler | None = None,
    score_at: str = "fixed",
) -> EntropyGrad:
    """Unbiased estimate of grad_theta(-H(p_theta)), averaged over the batch.

    For each row, x = mu(z) + sigma*eps is held fixed, M posterior samples
    z_m ~ p(z | x) are drawn by HMC started at z (an exact posterior draw),
    grad_x log p(x) is estimated by the mean conditional score over z_m, and
    the result is chained with dx/dtheta at the original (z, eps).
    ``posterior_sampler`` replaces HMC, e.g. by exact conjugate sampling.
    """
    if score_at not in SCORE_VARIANTS:
        raise ConfigError(f"score_at must be one of {SCORE_VARIANTS}")
    z = np.atleast_2d(as_tensor(z_batch, "latent batch"))
    eps = np.atleast_2d(as_tensor(eps_batch, "eps batch"))
    trace = mlp_forward_trace(gen.spec, gen.eta, z)
    if eps.shape != trace.output.shape:
        raise ConfigError(f"eps shape {eps.shape} != generator output {trace.output.shape}")
    x = trace.output + gen.sigma * eps
    samples, valid, rate, step = _draw_posterior(gen, x, z, hmc_cfg, rng, step_size, posterior_sampler)
    valid = _usable(samples, valid)
    grad_eta, grad_log_sigma = _entropy_grads(gen, trace, eps, samples, valid, score_at)
    return EntropyGrad(grad_eta, grad_log_sigma, rate, step, int(valid.sum()))


def _usable(samples, valid):
    valid = valid & np.all(np.isfinite(samples), axis=(0, 2))
    if not valid.any():
        raise NumericError("entropy gradient: every batch element was skipped")
    if not valid.all():
        log.warning("entropy gradient: skipping %d batch elements", int((~valid).sum()))
    return valid


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    """Everything beyond the parameters needed to resume a run exactly."""

    epochs_done: int
    adam_disc: AdamState
    adam_eta: AdamState
    adam_sigma: AdamState
    hmc_step_size: float

    @classmethod
    def fresh(cls, gen: GeneratorParams, disc: DiscriminatorParams, cfg: TrainConfig) -> "TrainState":
        return cls(
            0,
            AdamState.zeros(disc.phi.size),
            AdamState.zeros(gen.eta.size),
            AdamState.zeros(gen.log_sigma.size),
            cfg.hmc_step_size,
        )


@dataclass
class EpochRecord:
    epoch: int
    disc_loss: float
    gen_adv_loss: float
    entropy_grad_norm: float
    accept_rate: float
    sigma_min: float
    sigma_max: float


EPOCH_LOG_FIELDS = tuple(f.name for f in fields(EpochRecord))


@dataclass
class TrainResult:
    gen: GeneratorParams
    disc: DiscriminatorParams
    log: list[EpochRecord]
    state: TrainState


def _iteration_rng(seed: int, epoch: int, it: int) -> np.random.Generator:
    return seeding.stream(seed, seeding.ITERATION, epoch, it)


def _shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return seeding.stream(seed, seeding.SHUFFLE, epoch)


def _abort(gen, disc, cfg, state, out_dir, what):
    if out_dir is not None:
        from .data_io import save_checkpoint

        path = Path(out_dir) / "diagnostic_checkpoint.json"
        try:
            save_checkpoint(path, gen, disc, config={"train": cfg.to_dict()}, state=state)
        except Exception:  # the original failure matters more
            log.exception("could not write diagnostic checkpoint")
        else:
            what += f" (diagnostic checkpoint at {path})"
    raise NumericError(what)


def train(
    dataset,
    gen: GeneratorParams,
    disc: DiscriminatorParams,
    cfg: TrainConfig,
    callbacks: Sequence[Callable] = (),
    state: TrainState | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Run the training loop for ``cfg.epochs`` epochs in total.

    ``dataset`` is an (N, dim) array or anything with a ``points`` attribute.
    Parameters are copied, never mutated in place. Passing the ``state`` from
    a checkpoint continues a run from ``state.epochs_done``. Each callback is
    called as ``cb(record, gen, disc, state)`` after every epoch.
    """
    points = np.atleast_2d(as_tensor(getattr(dataset, "points", dataset), "dataset"))
    n = len(points)
    if n == 0:
        raise ConfigError("empty dataset")
    if points.shape[1] != gen.data_dim or disc.spec.in_dim != gen.data_dim:
        raise ConfigError("dataset, generator and discriminator widths disagree")
    gen = gen.copy()
    disc = disc.copy()
    gen.log_sigma = truncate_sigma(gen.log_sigma, cfg.bounds)
    state = TrainState.fresh(gen, disc, cfg) if state is None else state
    hmc_cfg = cfg.hmc
    b = min(cfg.batch_size, n)
    n_iter = max(1, n // b)
    history: list[EpochRecord] = []

    for epoch in range(state.epochs_done, cfg.epochs):
        perm = _shuffle_rng(cfg.seed, epoch).permutation(n)
        sums = dict(disc_loss=0.0, gen_adv_loss=0.0, entropy_grad_norm=0.0, accept_rate=0.0)
        for it in range(n_iter):
            rng = _iteration_rng(cfg.seed, epoch, it)
            x = points[perm[it * b:(it + 1) * b]]
            try:
                for _ in range(cfg.disc_steps_per_gen_step):
                    d_loss, g_phi = disc_loss_and_grad(disc, gen, x, rng)
                    flat, state.adam_disc = adam_step(
                        state.adam_disc, disc.phi.flatten(), g_phi.flatten(),
                        cfg.lr_disc, cfg.adam_beta1, cfg.adam_beta2,
                    )
                    disc.phi = disc.phi.unflatten(check_finite(flat, "discriminator parameters"))

                z = rng.standard_normal((b, gen.latent_dim))
                eps = rng.standard_normal((b, gen.data_dim))
                trace = mlp_forward_trace(gen.spec, gen.eta, z)
                sigma = gen.sigma
                x_gen = trace.output + sigma * eps
                adv_loss, up = _adversarial_upstream(disc, x_gen, cfg.non_saturating)
                g_eta, _ = mlp_backward_trace(gen.spec, gen.eta, trace, up)
                g_log_sigma = np.sum(up * eps, axis=0) * sigma
                if cfg.lam > 0:
                    res = sample_posterior_batch(gen, x_gen, z, hmc_cfg, rng, step_size=state.hmc_step_size)
                    state.hmc_step_size = res.final_step_size
                    valid = _usable(res.samples, res.valid)
                    e_eta, e_ls = _entropy_grads(gen, trace, eps, res.samples, valid, cfg.score_at)
                    g_eta = g_eta + cfg.lam * e_eta
                    g_log_sigma = g_log_sigma + cfg.lam * e_ls
                    sums["accept_rate"] += res.accept_rate
                    sums["entropy_grad_norm"] += math.sqrt(
                        float(np.sum(e_eta.flatten() ** 2)) + float(np.sum(e_ls ** 2))
                    )

                flat, state.adam_eta = adam_step(
                    state.adam_eta, gen.eta.flatten(), g_eta.flatten(),
                    cfg.lr_gen, cfg.adam_beta1, cfg.adam_beta2,
                )
                gen.eta = gen.eta.unflatten(check_finite(flat, "generator parameters"))
                new_ls, state.adam_sigma = adam_step(
                    state.adam_sigma, gen.log_sigma, g_log_sigma,
                    cfg.lr_sigma, cfg.adam_beta1, cfg.adam_beta2,
                )
                gen.log_sigma = truncate_sigma(check_finite(new_ls, "log sigma"), cfg.bounds)
            except NumericError as exc:
                _abort(gen, disc, cfg, state, out_dir, f"epoch {epoch} iteration {it}: {exc}")
            sums["disc_loss"] += d_loss
            sums["gen_adv_loss"] += adv_loss

        state.epochs_done = epoch + 1
        sigma = gen.sigma
        record = EpochRecord(
            epoch=epoch + 1,
            disc_loss=sums["disc_loss"] / n_iter,
            gen_adv_loss=sums["gen_adv_loss"] / n_iter,
            entropy_grad_norm=sums["entropy_grad_norm"] / n_iter if cfg.lam > 0 else 0.0,
            accept_rate=sums["accept_rate"] / n_iter if cfg.lam > 0 else float("nan"),
            sigma_min=float(sigma.min()),
            sigma_max=float(sigma.max()),
        )
        history.append(record)
        log.info(
            "epoch %d  D %.4f  G %.4f  accept %.3f  sigma [%.4f, %.4f]",
            record.epoch, record.disc_loss, record.gen_adv_loss, record.accept_rate,
            record.sigma_min, record.sigma_max,
        )
        for cb in callbacks:
            cb(record, gen, disc, state)

    return TrainResult(gen, disc, history, state)
