"""End-to-end runs built from a RunConfig: train, evaluate, sample."""
from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np

from . import seeding
from .data_io import (
    Checkpoint,
    Dataset,
    RunConfig,
    atomic_write_text,
    epoch_log_to_csv,
    load_checkpoint,
    read_epoch_log,
    sample_mixture,
    save_checkpoint,
    write_scatter_svg,
)
from .errors import ConfigError
from .evaluator import EvalReport, diversity_metrics, estimate_loglik, fit_encoder, sample_generator
from .models import make_discriminator, make_generator
from .trainer import TrainResult, train

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.json"
EPOCH_LOG_NAME = "epoch_log.csv"


def with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=int(seed)))


def build_dataset(cfg: RunConfig) -> Dataset:
    return sample_mixture(cfg.mixture, int(cfg.data["n"]))


def build_networks(cfg: RunConfig, data_dim: int = 2):
    rng = seeding.stream(cfg.train.seed, seeding.INIT)
    m = cfg.model
    gen = make_generator(
        int(m["latent_dim"]), data_dim, tuple(m["gen_hidden"]), rng,
        log_sigma_init=float(m["log_sigma_init"]), activation=m["activation"],
    )
    disc = make_discriminator(data_dim, tuple(m["disc_hidden"]), rng, activation=m["activation"])
    return gen, disc


def run_training(cfg: RunConfig, out_dir: str | Path | None = None, resume: Checkpoint | None = None) -> TrainResult:
    """Train from scratch (or from ``resume``) and write the run artefacts.

    ``out_dir`` receives epoch_log.csv, checkpoint.json and scatter.svg.
    Intermediate checkpoints overwrite checkpoint.json every
    ``cfg.checkpoint_every`` epochs.
    """
    dataset = build_dataset(cfg)
    if resume is not None:
        gen, disc, state = resume.gen, resume.disc, resume.state
        if state is None:
            raise ConfigError("checkpoint has no training state to resume from")
    else:
        gen, disc = build_networks(cfg, dataset.points.shape[1])
        state = None
    out = Path(out_dir) if out_dir is not None else None
    history = []
    if out is not None and resume is not None and (out / EPOCH_LOG_NAME).exists():
        history = [r for r in read_epoch_log(out / EPOCH_LOG_NAME) if r.epoch <= state.epochs_done]
    # where the run is written is not part of what it computes
    config_doc = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}

    def checkpoint_cb(record, g, d, st):
        history.append(record)
        if out is None:
            return
        atomic_write_text(out / EPOCH_LOG_NAME, epoch_log_to_csv(history))
        if cfg.checkpoint_every and record.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / CHECKPOINT_NAME, g, d, config=config_doc, state=st)

    result = train(dataset, gen, disc, cfg.train, callbacks=[checkpoint_cb], state=state, out_dir=out)
    result.log = history
    if out is not None:
        atomic_write_text(out / EPOCH_LOG_NAME, epoch_log_to_csv(history))
        save_checkpoint(out / CHECKPOINT_NAME, result.gen, result.disc, config=config_doc, state=result.state)
        rng = seeding.stream(cfg.train.seed, seeding.SAMPLE, 1)
        write_scatter_svg(out / "scatter.svg", dataset.points, sample_generator(result.gen, len(dataset), rng))
    return result


def run_metrics(cfg: RunConfig, ckpt: Checkpoint) -> EvalReport:
    spec = cfg.mixture
    real = build_dataset(cfg)
    rng = seeding.stream(cfg.train.seed, seeding.EVAL, 1)
    m = diversity_metrics(ckpt.gen, spec.centers, spec.component_std, real.points, int(cfg.eval["n_generated"]), rng)
    return EvalReport(metadata={"seed": cfg.train.seed, "n_generated": int(cfg.eval["n_generated"])}, **m)


def run_eval_ll(cfg: RunConfig, ckpt: Checkpoint) -> EvalReport:
    """Fit an encoder on training data, then IS log-likelihood of fresh test points."""
    ev = cfg.eval
    train_points = build_dataset(cfg).points
    spec = cfg.mixture
    test_rng = seeding.stream(spec.seed, seeding.DATA, 1)
    x_test = sample_mixture(spec, int(ev["n_test"]), test_rng).points
    rng = seeding.stream(cfg.train.seed, seeding.EVAL, 2)
    enc = fit_encoder(
        ckpt.gen, train_points, int(ev["encoder_epochs"]), float(ev["encoder_lr"]), rng,
        hidden=tuple(ev["encoder_hidden"]),
    )
    ll = estimate_loglik(
        ckpt.gen, enc, x_test, int(ev["num_importance_samples"]), rng,
        map_steps=int(ev["map_steps"]), map_lr=float(ev["map_lr"]), factor=float(ev["overdispersion"]),
        likelihood=ev["likelihood"],
    )
    return EvalReport(
        loglik=[float(v) for v in ll],
        mean_loglik=float(np.mean(ll)),
        num_importance_samples=int(ev["num_importance_samples"]),
        metadata={"seed": cfg.train.seed, "n_test": len(x_test), "likelihood": ev["likelihood"]},
    )


def run_sample(cfg: RunConfig, ckpt: Checkpoint, n: int) -> np.ndarray:
    if n < 1:
        raise ConfigError("--n must be positive")
    return sample_generator(ckpt.gen, n, seeding.stream(cfg.train.seed, seeding.SAMPLE))


def checkpoint_for(cfg: RunConfig, path: str | Path | None) -> Checkpoint:
    path = Path(path) if path is not None else Path(cfg.out_dir) / CHECKPOINT_NAME
    return load_checkpoint(path)
