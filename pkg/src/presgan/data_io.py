"""Synthetic ring datasets, file formats and run configuration."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import seeding
from .diffcore import MlpSpec, ParamVector
from .errors import CheckpointError, ConfigError
from .models import DiscriminatorParams, EncoderParams, GeneratorParams
from .trainer import EPOCH_LOG_FIELDS, AdamState, EpochRecord, TrainConfig, TrainState

CHECKPOINT_FORMAT = "presgan-checkpoint"
CHECKPOINT_VERSION = 1
MINORITY_PROPORTION = 1e-3


# ---------------------------------------------------------------------------
# datasets


def ring_centers(K: int, r: float) -> np.ndarray:
    if K < 1:
        raise ConfigError("need at least one mixture component")
    angles = np.arange(K) * (2.0 * np.pi / K)
    return np.stack([r * np.cos(angles), r * np.sin(angles)], axis=1)


def imbalanced_proportions(level: int, K: int = 10) -> np.ndarray:
    """Class proportions for imbalance level 1 (balanced) to K.

    The first ``level - 1`` classes get 1e-3 each and the rest share the
    remaining mass equally.
    """
    if not 1 <= level <= K:
        raise ConfigError(f"imbalance level must lie in [1, {K}], got {level}")
    n_minor = level - 1
    p = np.full(K, (1.0 - n_minor * MINORITY_PROPORTION) / (K - n_minor))
    p[:n_minor] = MINORITY_PROPORTION
    return p / p.sum()


@dataclass(frozen=True)
class MixtureSpec:
    K: int = 10
    radius: float = 3.0
    component_std: float = 0.05
    proportions: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be positive")
        if not self.component_std > 0:
            raise ConfigError("component_std must be positive")
        p = self.weights
        if np.any(p < 0) or abs(p.sum() - 1.0) >= 1e-9:
            raise ConfigError("proportions must be non-negative and sum to 1")

    @property
    def weights(self) -> np.ndarray:
        if self.proportions is None:
            return np.full(self.K, 1.0 / self.K)
        p = np.asarray(self.proportions, dtype=np.float64)
        if p.shape != (self.K,):
            raise ConfigError(f"expected {self.K} proportions, got {p.size}")
        return p

    @property
    def centers(self) -> np.ndarray:
        return ring_centers(self.K, self.radius)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "radius": self.radius,
            "component_std": self.component_std,
            "proportions": None if self.proportions is None else list(self.proportions),
            "seed": self.seed,
        }


@dataclass
class Dataset:
    points: np.ndarray
    labels: np.ndarray
    spec: MixtureSpec | None = None

    def __post_init__(self):
        if len(self.points) == 0:
            raise ConfigError("empty dataset")
        if len(self.labels) != len(self.points):
            raise ConfigError("labels and points differ in length")
        if self.spec is not None and (self.labels.min() < 0 or self.labels.max() >= self.spec.K):
            raise ConfigError("labels out of range")

    def __len__(self) -> int:
        return len(self.points)


def sample_mixture(spec: MixtureSpec, N: int, rng: np.random.Generator | None = None) -> Dataset:
    """Draw N labelled points; reproducible from ``spec.seed`` when no rng is given."""
    if N < 1:
        raise ConfigError("N must be positive")
    if rng is None:
        rng = seeding.stream(spec.seed, seeding.DATA)
    labels = rng.choice(spec.K, size=N, p=spec.weights)
    points = spec.centers[labels] + spec.component_std * rng.standard_normal((N, 2))
    return Dataset(points, labels, spec)


# ---------------------------------------------------------------------------
# files


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v: float) -> str:
    return repr(float(v))


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x0", "x1", "label"])
    for (a, b), lab in zip(ds.points, ds.labels):
        w.writerow([_fmt(a), _fmt(b), int(lab)])
    return buf.getvalue()


def write_dataset_csv(path, ds: Dataset) -> None:
    atomic_write_text(path, dataset_to_csv(ds))


def read_dataset_csv(path) -> Dataset:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from None
    if not rows or rows[0] != ["x0", "x1", "label"]:
        raise ConfigError(f"{path}: expected header x0,x1,label")
    try:
        pts = np.array([[float(r[0]), float(r[1])] for r in rows[1:]])
        labels = np.array([int(r[2]) for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: malformed row ({exc})") from None
    return Dataset(pts, labels)


def points_to_csv(points: np.ndarray) -> str:
    points = np.atleast_2d(points)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i}" for i in range(points.shape[1])])
    for row in points:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def epoch_log_to_csv(records: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPOCH_LOG_FIELDS)
    for rec in records:
        w.writerow([rec.epoch] + [_fmt(getattr(rec, f)) for f in EPOCH_LOG_FIELDS[1:]])
    return buf.getvalue()


def read_epoch_log(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EpochRecord(int(r["epoch"]), *(float(r[f]) for f in EPOCH_LOG_FIELDS[1:]))
        for r in rows
    ]


# ---------------------------------------------------------------------------
# checkpoints


def _seg(arr) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}


def _put_params(segments: dict, prefix: str, params: ParamVector) -> None:
    for name, value in params.items():
        segments[f"{prefix}/{name}"] = _seg(value)


def _get_array(segments: Mapping, name: str, shape=None) -> np.ndarray:
    if name not in segments:
        raise CheckpointError(f"checkpoint is missing segment {name!r}", segment=name)
    seg = segments[name]
    try:
        data = np.array(seg["data"], dtype=np.float64)
        seg_shape = tuple(int(s) for s in seg["shape"])
        arr = data.reshape(seg_shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"segment {name!r} is malformed: {exc}", segment=name) from None
    if shape is not None and tuple(shape) != seg_shape:
        raise CheckpointError(f"segment {name!r} has shape {seg_shape}, network expects {tuple(shape)}", segment=name)
    return arr


def _get_params(segments: Mapping, prefix: str, spec: MlpSpec) -> ParamVector:
    return ParamVector((name, _get_array(segments, f"{prefix}/{name}", shape)) for name, shape in spec.param_shapes())


def checkpoint_to_json(
    gen: GeneratorParams,
    disc: DiscriminatorParams,
    encoder: EncoderParams | None = None,
    config: Mapping | None = None,
    state: TrainState | None = None,
) -> str:
    segments: dict = {}
    _put_params(segments, "eta", gen.eta)
    segments["log_sigma"] = _seg(gen.log_sigma)
    _put_params(segments, "phi", disc.phi)
    networks = {"generator": gen.spec.to_dict(), "discriminator": disc.spec.to_dict()}
    if encoder is not None:
        _put_params(segments, "encoder", encoder.gamma_params)
        networks["encoder"] = encoder.spec.to_dict()
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "networks": networks,
        "config": dict(config or {}),
        "segments": segments,
    }
    if state is not None:
        for name, adam in (("disc", state.adam_disc), ("eta", state.adam_eta), ("sigma", state.adam_sigma)):
            segments[f"adam_{name}/m"] = _seg(adam.m)
            segments[f"adam_{name}/v"] = _seg(adam.v)
        doc["train_state"] = {
            "epochs_done": state.epochs_done,
            "hmc_step_size": state.hmc_step_size,
            "adam_steps": {"disc": state.adam_disc.t, "eta": state.adam_eta.t, "sigma": state.adam_sigma.t},
        }
    return json.dumps(doc, allow_nan=False)


def save_checkpoint(path, gen, disc, encoder=None, config=None, state=None) -> None:
    atomic_write_text(path, checkpoint_to_json(gen, disc, encoder, config, state))


@dataclass
class Checkpoint:
    gen: GeneratorParams
    disc: DiscriminatorParams
    encoder: EncoderParams | None = None
    config: dict = field(default_factory=dict)
    state: TrainState | None = None


def checkpoint_from_json(text: str, source: str = "<string>") -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise CheckpointError(f"{source}: invalid JSON at byte {offset}: {exc.msg}", offset=offset) from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{source}: not a {CHECKPOINT_FORMAT} file")
    try:
        networks = doc["networks"]
        segments = doc["segments"]
        gspec = MlpSpec.from_dict(networks["generator"])
        dspec = MlpSpec.from_dict(networks["discriminator"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{source}: missing section {exc}") from None
    gen = GeneratorParams(gspec, _get_params(segments, "eta", gspec), _get_array(segments, "log_sigma", (gspec.out_dim,)))
    disc = DiscriminatorParams(dspec, _get_params(segments, "phi", dspec))
    encoder = None
    if "encoder" in networks:
        espec = MlpSpec.from_dict(networks["encoder"])
        encoder = EncoderParams(espec, _get_params(segments, "encoder", espec))
    state = None
    if "train_state" in doc:
        ts = doc["train_state"]
        try:
            steps = ts["adam_steps"]
            state = TrainState(
                epochs_done=int(ts["epochs_done"]),
                adam_disc=AdamState(_get_array(segments, "adam_disc/m", (disc.phi.size,)),
                                    _get_array(segments, "adam_disc/v", (disc.phi.size,)), int(steps["disc"])),
                adam_eta=AdamState(_get_array(segments, "adam_eta/m", (gen.eta.size,)),
                                   _get_array(segments, "adam_eta/v", (gen.eta.size,)), int(steps["eta"])),
                adam_sigma=AdamState(_get_array(segments, "adam_sigma/m", (gspec.out_dim,)),
                                     _get_array(segments, "adam_sigma/v", (gspec.out_dim,)), int(steps["sigma"])),
                hmc_step_size=float(ts["hmc_step_size"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{source}: malformed train_state ({exc})") from None
    return Checkpoint(gen, disc, encoder, doc.get("config", {}), state)


def load_checkpoint(path) -> Checkpoint:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return checkpoint_from_json(text, str(path))


# ---------------------------------------------------------------------------
# run configuration

DATA_DEFAULTS = {"K": 10, "radius": 3.0, "component_std": 0.05, "n": 5000, "imbalance_level": 1, "seed": 0}
MODEL_DEFAULTS = {
    "latent_dim": 10,
    "gen_hidden": [128, 128, 128],
    "disc_hidden": [128, 128, 128],
    "activation": "tanh",
    "log_sigma_init": 0.0,
}
EVAL_DEFAULTS = {
    "num_importance_samples": 2000,
    "map_steps": 200,
    "map_lr": 0.01,
    "overdispersion": 1.2,
    "encoder_hidden": [128],
    "encoder_epochs": 20,
    "encoder_lr": 1e-3,
    "n_test": 200,
    "n_generated": 5000,
    "likelihood": "gaussian",
}
RUN_DEFAULTS = {"out_dir": "runs/default", "checkpoint_every": 0}


def _section(raw: Mapping, name: str, defaults: Mapping) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, Mapping):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(sec) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return {**defaults, **sec}


@dataclass
class RunConfig:
    train: TrainConfig
    data: dict
    model: dict
    eval: dict
    out_dir: str
    checkpoint_every: int

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RunConfig":
        if not isinstance(raw, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - {"train", "data", "model", "eval", *RUN_DEFAULTS}
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        if "train" not in raw:
            raise ConfigError("config needs a 'train' section")
        cfg = cls(
            train=TrainConfig.from_dict(raw["train"]),
            data=_section(raw, "data", DATA_DEFAULTS),
            model=_section(raw, "model", MODEL_DEFAULTS),
            eval=_section(raw, "eval", EVAL_DEFAULTS),
            out_dir=str(raw.get("out_dir", RUN_DEFAULTS["out_dir"])),
            checkpoint_every=int(raw.get("checkpoint_every", RUN_DEFAULTS["checkpoint_every"])),
        )
        cfg.mixture  # validate
        if cfg.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be non-negative")
        if cfg.eval["likelihood"] not in ("gaussian", "truncated_gaussian"):
            raise ConfigError("eval.likelihood must be gaussian or truncated_gaussian")
        return cfg

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "data": dict(self.data),
            "model": dict(self.model),
            "eval": dict(self.eval),
            "out_dir": self.out_dir,
            "checkpoint_every": self.checkpoint_every,
        }

    @property
    def mixture(self) -> MixtureSpec:
        d = self.data
        try:
            level = int(d["imbalance_level"])
            props = tuple(imbalanced_proportions(level, int(d["K"]))) if level > 1 else None
            return MixtureSpec(int(d["K"]), float(d["radius"]), float(d["component_std"]), props, int(d["seed"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad data section: {exc}") from None


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from None
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# SVG scatter


def scatter_svg(target: np.ndarray, generated: np.ndarray, size: int = 480, max_points: int = 5000) -> str:
    """Overlay of target (grey) and generated (red) 2-D points."""
    pts = [np.atleast_2d(target)[:max_points], np.atleast_2d(generated)[:max_points]]
    both = np.concatenate(pts)
    lo, hi = both.min(axis=0), both.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    pad = 0.05 * span
    lo = lo - pad
    scale = size / (span + 2 * pad)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for color, p in (("#888888", pts[0]), ("#d62728", pts[1])):
        out.append(f'<g fill="{color}" fill-opacity="0.5">')
        for x, y in p:
            cx = (x - lo[0]) * scale
            cy = size - (y - lo[1]) * scale
            if math.isfinite(cx) and math.isfinite(cy):
                out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="1.2"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_scatter_svg(path, target, generated) -> None:
    atomic_write_text(path, scatter_svg(target, generated))
