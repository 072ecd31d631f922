"""Experiment configuration, Adam, early stopping and the training loop."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from cifvi import autodiff as ad
from cifvi.autodiff import Module, Parameter
from cifvi.bijections import Compose, maf_flow
from cifvi.checkpoint import load_checkpoint, save_checkpoint
from cifvi.cif import AmortizedEncoder, CifLayer, CifStack, FlowPosterior, GaussianBase, NonFiniteError
from cifvi.data import BinarizedImageDataset, load_digits_dir
from cifvi.distributions import make_rng
from cifvi.targets import LatentBernoulliModel, mog_lattice

log = logging.getLogger("cifvi.train")

MAX_CONSECUTIVE_ABORTS = 100


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------


@dataclass
class TargetConfig:
    K: int = 9
    sigma0: float = 1.0
    sigma0_trainable: bool = False
    data_dir: str | None = None
    factor: int = 4
    n_z: int = 8
    decoder_hidden: list = field(default_factory=lambda: [64])
    dynamic: bool = True
    train_limit: int | None = None


@dataclass
class FlowConfig:
    layers: int = 5
    hidden: list = field(default_factory=lambda: [64, 64])
    batch_norm: bool = False
    encoder_hidden: list = field(default_factory=lambda: [64])


@dataclass
class CifConfig:
    enabled: bool = False
    u_dim: int = 1
    hidden: list = field(default_factory=lambda: [10, 10])
    r_feature_dim: int = 8
    r_feature_hidden: list = field(default_factory=list)
    share_qr: bool = False


@dataclass
class OptimConfig:
    lr: float = 1e-3
    clip_norm: float | None = None
    max_epochs: int = 20_000
    batch_size: int = 100
    samples_per_step: int = 1000
    patience: int = 50


@dataclass
class EvalConfig:
    N: int = 10_000
    M: int = 100
    S: int = 1000


@dataclass
class Config:
    kind: str = "mog"
    seed: int = 0
    target: TargetConfig = field(default_factory=TargetConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    cif: CifConfig = field(default_factory=CifConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> Config:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, value in raw.items():
            default = getattr(cls(), name)
            if dataclasses.is_dataclass(default):
                kwargs[name] = _section(type(default), value, name)
            else:
                kwargs[name] = value
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def from_json(cls, path) -> Config:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        if self.kind not in ("mog", "image"):
            raise ConfigError(f"kind must be 'mog' or 'image', not {self.kind!r}")
        if self.cif.enabled and self.flow.batch_norm:
            raise ConfigError("batch norm is for baseline flows only; disable it when cif.enabled")
        if self.kind == "image" and not self.target.data_dir:
            raise ConfigError("image experiments need target.data_dir")
        checks = {
            "target.sigma0": self.target.sigma0, "target.factor": self.target.factor,
            "target.n_z": self.target.n_z, "flow.layers": self.flow.layers + 1,
            "cif.u_dim": self.cif.u_dim, "optim.lr": self.optim.lr,
            "optim.max_epochs": self.optim.max_epochs, "optim.batch_size": self.optim.batch_size,
            "optim.samples_per_step": self.optim.samples_per_step,
            "optim.patience": self.optim.patience, "eval.N": self.eval.N,
            "eval.M": self.eval.M, "eval.S": self.eval.S,
        }
        for name, value in checks.items():
            if not value > 0:
                raise ConfigError(f"{name} must be positive")
        if self.optim.clip_norm is not None and not self.optim.clip_norm > 0:
            raise ConfigError("optim.clip_norm must be positive or null")
        widths = [*self.flow.hidden, *self.cif.hidden, *self.target.decoder_hidden,
                  *self.flow.encoder_hidden, *self.cif.r_feature_hidden]
        if any(int(w) < 1 for w in widths):
            raise ConfigError("layer widths must be positive")


def _section(kind, value, name):
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in dataclasses.fields(kind)}
    unknown = set(value) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return kind(**value)


# -- optimization -------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    aborted: int = 0
    consecutive_aborts: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Parameter]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(state: AdamState, params: Sequence[Parameter], grads: Sequence[np.ndarray],
              lr: float) -> bool:
    """One bias-corrected Adam update in place.  Returns False (and leaves
    everything untouched) when any gradient is non-finite."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    for p, g in zip(params, grads):
        if p.data.shape != np.shape(g):
            raise ad.ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.data.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.aborted += 1
        state.consecutive_aborts += 1
        log.warning("non-finite gradient, step skipped (%d so far)", state.aborted)
        return False
    state.consecutive_aborts = 0
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        return [g * (max_norm / norm) for g in grads]
    return list(grads)


class EarlyStopping:
    """Stop once ``patience`` epochs pass without a new best (higher) metric."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_metric = -math.inf
        self.best_epoch = -1

    def update(self, epoch: int, metric: float) -> bool:
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_epoch = epoch
        return epoch - self.best_epoch >= self.patience


# -- model construction -------------------------------------------------------


class Experiment(Module):
    """Posterior plus target; the target holds parameters for image runs."""

    def __init__(self, config: Config, posterior, target, dataset: BinarizedImageDataset | None = None):
        self.config = config
        self.posterior = posterior
        self.target = target
        self.dataset = dataset


def _flow_steps(config: Config, dim: int, rng, hidden=None):
    return maf_flow(dim, config.flow.layers, list(hidden or config.flow.hidden), rng,
                    batch_norm=config.flow.batch_norm)


def build_posterior(config: Config, dim: int, rng: np.random.Generator, x_dim: int | None = None,
                    hidden=None):
    amortized = x_dim is not None
    feature_dim = 0
    if amortized and config.cif.enabled and not config.cif.share_qr:
        feature_dim = config.cif.r_feature_dim
    if amortized:
        base = AmortizedEncoder(x_dim, dim, config.flow.encoder_hidden, rng, feature_dim=feature_dim,
                                feature_hidden=config.cif.r_feature_hidden)
    else:
        base = GaussianBase(dim, math.log(config.target.sigma0),
                            trainable_std=config.target.sigma0_trainable)
    steps = _flow_steps(config, dim, rng, hidden)
    if config.cif.enabled:
        layers = [CifLayer(g, config.cif.u_dim, rng, config.cif.hidden, r_extra_dim=feature_dim,
                           share_qr=config.cif.share_qr) for g in steps]
        return CifStack(base, layers)
    return FlowPosterior(base, Compose(steps, dim=dim))


def build_model(config: Config, rng: np.random.Generator | None = None) -> Experiment:
    """Deterministic in ``config.seed`` unless an explicit rng is given."""
    rng = make_rng(config.seed) if rng is None else rng
    if config.kind == "mog":
        target = mog_lattice(config.target.K)
        return Experiment(config, build_posterior(config, target.dim, rng), target)
    t = config.target
    dataset = load_digits_dir(t.data_dir, t.factor, t.dynamic, seed=config.seed)
    if t.train_limit:
        dataset.train_greys = dataset.train_greys[:t.train_limit]
        if dataset.train_fixed is not None:
            dataset.train_fixed = dataset.train_fixed[:t.train_limit]
    target = LatentBernoulliModel(t.n_z, dataset.dim, t.decoder_hidden, rng)
    posterior = build_posterior(config, t.n_z, rng, x_dim=dataset.dim)
    return Experiment(config, posterior, target, dataset)


def posterior_parameter_count(config: Config, hidden=None) -> int:
    """Trainable posterior parameters for ``config`` with optional flow widths."""
    x_dim = None
    dim = 2
    if config.kind == "image":
        side = 28 // config.target.factor
        x_dim, dim = side * side, config.target.n_z
    return build_posterior(config, dim, make_rng(0), x_dim, hidden).num_parameters()


def matched_flow_width(cif_config: Config, baseline_config: Config, depth: int | None = None) -> int:
    """Hidden width making the baseline posterior at least as large as the CIF one."""
    budget = posterior_parameter_count(cif_config)
    depth = depth or len(baseline_config.flow.hidden)
    width = 1
    while posterior_parameter_count(baseline_config, [width] * depth) < budget:
        width += 1
    return width


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    experiment: Experiment
    metrics: list[dict]
    optimizer: AdamState
    epoch: int
    best_metric: float | None


def _step(experiment: Experiment, params, state: AdamState, rng, x=None, n=None):
    config = experiment.config
    posterior, target = experiment.posterior, experiment.target
    try:
        with ad.Tape() as tape:
            values = posterior.elbo(target, x, rng=rng, n=n)
            loss = -ad.mean(values)
        grads = tape.gradient(loss, params)
    except (NonFiniteError, FloatingPointError) as exc:
        state.aborted += 1
        state.consecutive_aborts += 1
        log.warning("step aborted: %s", exc)
        values = None
    else:
        if config.optim.clip_norm is not None:
            grads = clip_global_norm(grads, config.optim.clip_norm)
        adam_step(state, params, grads, config.optim.lr)
    if state.consecutive_aborts > MAX_CONSECUTIVE_ABORTS:
        raise NonFiniteError(f"{state.consecutive_aborts} consecutive aborted steps",
                             np.zeros((0, posterior.dim)))
    return None if values is None else values.data


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    n = len(values)
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(values.mean()), se


def validation_elbo(experiment: Experiment, data: np.ndarray, rng) -> tuple[float, float]:
    experiment.eval()
    values = experiment.posterior.elbo(experiment.target, data, rng=rng).data
    experiment.train()
    return _mean_se(values)


def train(config: Config, out_dir=None, progress_every: int = 0,
          experiment: Experiment | None = None) -> TrainResult:
    """Fit the posterior (and the decoder for image runs) by maximizing the ELBO.

    Writes ``metrics.jsonl`` and ``checkpoint.json`` to ``out_dir`` if given.
    """
    root = make_rng(config.seed)
    init_rng, train_rng, eval_rng = root.spawn(3)
    experiment = experiment or build_model(config, init_rng)
    experiment.train()
    params = experiment.parameters()
    state = AdamState.for_params(params)
    metrics: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
    stopper = EarlyStopping(config.optim.patience) if config.kind == "image" else None
    best_state = None
    t0 = time.perf_counter()
    epoch = 0
    try:
        for epoch in range(1, config.optim.max_epochs + 1):
            if config.kind == "mog":
                values = _step(experiment, params, state, train_rng, n=config.optim.samples_per_step)
                batch_values = [] if values is None else [values]
            else:
                batch_values = []
                for xb in experiment.dataset.batches(config.optim.batch_size, train_rng):
                    values = _step(experiment, params, state, train_rng, x=xb)
                    if values is not None:
                        batch_values.append(values)
            pooled = np.concatenate(batch_values) if batch_values else np.array([np.nan])
            mean, se = _mean_se(pooled)
            record = {"epoch": epoch, "elbo_mean": mean, "elbo_se": se,
                      "wall_s": time.perf_counter() - t0}
            stop = False
            if stopper is not None:
                val, _ = validation_elbo(experiment, experiment.dataset.val, eval_rng)
                record["val_elbo"] = val
                if val > stopper.best_metric:
                    best_state = experiment.state_dict()
                stop = stopper.update(epoch, val)
            metrics.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
            if progress_every and epoch % progress_every == 0:
                log.info("epoch %d elbo %.4f", epoch, mean)
            if stop:
                break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    best_metric = None
    if stopper is not None and best_state is not None:
        experiment.load_state_dict(best_state)
        best_metric = stopper.best_metric
    experiment.eval()
    result = TrainResult(experiment, metrics, state, epoch, best_metric)
    if out is not None:
        write_checkpoint(out / "checkpoint.json", result)
    return result


def write_checkpoint(path, result: TrainResult) -> None:
    exp = result.experiment
    names = list(exp.named_parameters(include_frozen=False))
    state = result.optimizer
    optimizer = {"m": dict(zip(names, state.m)), "v": dict(zip(names, state.v)),
                 "step": state.step, "aborted": state.aborted}
    save_checkpoint(path, exp.config.to_dict(), exp.state_dict(), optimizer,
                    result.epoch, result.best_metric)


def restore(path) -> tuple[Experiment, dict]:
    """Rebuild the experiment a checkpoint was written from and load its weights."""
    doc = load_checkpoint(path)
    config = Config.from_dict(doc["config"])
    root = make_rng(config.seed)
    experiment = build_model(config, root.spawn(3)[0])
    experiment.load_state_dict(doc["parameters"])
    experiment.eval()
    return experiment, doc
