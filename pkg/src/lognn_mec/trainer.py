"""Training regimes for allocation models (LOGNN or MLP).

* ``train_unsupervised`` descends the batch-mean total delay directly
  through the projection and the network; no labels exist anywhere.
* ``train_supervised`` regresses projected allocations onto GA solutions
  that are regenerated every epoch (their cost is part of the epoch time).
* ``train_actor_critic`` fits a critic MLP to the true delay and moves the
  actor down the critic's prediction.

A model is anything with ``params`` (name -> array) and
``logits(tensors, batch)`` returning ``(x, p, scale, f)`` pair logits.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .baselines import GaConfig, ga_solve, mlp_features
from .core import FEAS_TOL, McInstance, PhysicalConstants, generate_instance
from .errors import ConfigurationError, NumericError
from .graph import GraphBatch, PairAllocation, pair_delays, pair_violation, project_pairs
from .lognn import glorot

log = logging.getLogger(__name__)

METHODS = ("unsupervised", "supervised", "actor_critic")
MIXED_SIZES = tuple((2 * m, m) for m in range(2, 11))


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    n_train_samples: int = 2048
    lr: float = 1e-4
    seed: int = 0
    size_distribution: list = field(default_factory=lambda: [list(s) for s in MIXED_SIZES])
    method: str = "unsupervised"
    held_out_samples: int = 256
    label_generations: int = 100
    label_population: int = 200
    critic_hidden: int = 64
    critic_layers: int = 4

    def __post_init__(self):
        self.size_distribution = [tuple(int(v) for v in s) for s in self.size_distribution]
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.n_train_samples < 1:
            raise ConfigurationError("epochs, batch_size and n_train_samples must be >= 1")
        if self.batch_size > self.n_train_samples:
            raise ConfigurationError("batch_size must not exceed n_train_samples")
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.size_distribution or any(n < 1 or m < 1 for n, m in self.size_distribution):
            raise ConfigurationError("size_distribution needs (N, M) pairs with N, M >= 1")
        if self.lr < 0 or self.held_out_samples < 1 or self.label_generations < 0:
            raise ConfigurationError("lr, held_out_samples, label_generations out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size_distribution"] = [list(s) for s in self.size_distribution]
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Dataset:
    """Unlabelled training instances."""

    instances: tuple[McInstance, ...]

    def __len__(self) -> int:
        return len(self.instances)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for inst in self.instances:
            h.update(json.dumps(inst.to_dict(), sort_keys=True).encode())
        return h.hexdigest()


def make_dataset(n: int, sizes: Sequence[tuple[int, int]], seed: int,
                 constants: PhysicalConstants | None = None) -> Dataset:
    """``n`` instances with sizes drawn uniformly from ``sizes``."""
    rng = np.random.default_rng(seed)
    picks = rng.integers(len(sizes), size=n)
    seeds = rng.integers(0, 2**62, size=n)
    return Dataset(tuple(generate_instance(*sizes[k], int(s), constants) for k, s in zip(picks, seeds)))


def held_out_dataset(config: TrainConfig) -> Dataset:
    # disjoint seed stream from the training data
    return make_dataset(config.held_out_samples, config.size_distribution, config.seed + 1_000_003)


@dataclass
class EpochRecord:
    epoch: int
    train_obj: float
    test_obj: float
    seconds: float


@dataclass
class TrainLog:
    config: TrainConfig
    records: list[EpochRecord] = field(default_factory=list)
    model: object = None
    skipped: int = 0
    aborted: str | None = None

    @property
    def train_curve(self) -> np.ndarray:
        return np.array([r.train_obj for r in self.records])

    @property
    def test_curve(self) -> np.ndarray:
        return np.array([r.test_obj for r in self.records])

    @property
    def epoch_seconds(self) -> np.ndarray:
        return np.array([r.seconds for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_obj", "test_obj", "seconds"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_obj), repr(r.test_obj), repr(r.seconds)])

    def write_manifest(self, path, dataset: Dataset | None = None) -> None:
        manifest = {
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "epochs_completed": len(self.records),
            "skipped": self.skipped,
            "aborted": self.aborted,
        }
        if dataset is not None:
            manifest["dataset_hash"] = dataset.content_hash()
        if self.model is not None and hasattr(self.model, "content_hash"):
            manifest["model_hash"] = self.model.content_hash()
        Path(path).write_text(json.dumps(manifest, indent=2))


def smoothed(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing moving average; the first entries average what exists."""
    values = np.asarray(values, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, values.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


# --- shared machinery ---------------------------------------------------------------

def _variables(tape: ad.Tape, params: dict[str, np.ndarray]) -> dict[str, ad.Tensor]:
    return {k: tape.variable(v, k) for k, v in params.items()}


def _grads(tape, root, tensors: dict[str, ad.Tensor]) -> dict[str, np.ndarray]:
    g = ad.backward(tape, root, list(tensors.values()))
    return {k: g[t] for k, t in tensors.items()}


def _checked(batch: GraphBatch, alloc: PairAllocation) -> None:
    worst = pair_violation(batch, alloc)
    if worst > FEAS_TOL:
        raise NumericError(f"infeasible allocation during training (violation {worst:.3g})")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def evaluate(model, dataset: Dataset, batch_size: int = 64) -> float:
    """Mean total delay of the model's (projected) allocations."""
    consts = {k: ad.Tensor(v) for k, v in model.params.items()}
    total = 0.0
    for lo in range(0, len(dataset), batch_size):
        batch = GraphBatch(dataset.instances[lo:lo + batch_size])
        alloc = project_pairs(batch, *model.logits(consts, batch))
        _checked(batch, alloc)
        total += float(pair_delays(batch, alloc).data.sum())
    return total / len(dataset)


def _loop(model, dataset: Dataset, config: TrainConfig, held_out: Dataset | None, epoch_step) -> TrainLog:
    """Run ``epoch_step(epoch, rng) -> (train_obj, extra_seconds)`` per epoch."""
    log_ = TrainLog(config, model=model)
    held_out = held_out if held_out is not None else held_out_dataset(config)
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        start = time.perf_counter()
        try:
            train_obj = epoch_step(epoch, rng, log_)
        except NumericError as exc:
            log_.aborted = f"epoch {epoch}: {exc}"
            log.warning("training aborted: %s", log_.aborted)
            exc.train_log = log_
            raise
        seconds = time.perf_counter() - start
        test_obj = evaluate(model, held_out)
        log_.records.append(EpochRecord(epoch, train_obj, test_obj, max(seconds, 1e-9)))
        log.debug("epoch %d train %.4f test %.4f (%.2fs)", epoch, train_obj, test_obj, seconds)
    return log_


# --- unsupervised ---------------------------------------------------------------------

def unsupervised_step(model, batch: GraphBatch, adam: ad.AdamState) -> np.ndarray:
    """One descent step on the batch-mean delay; returns the per-instance delays."""
    tape = ad.Tape()
    tensors = _variables(tape, model.params)
    alloc = project_pairs(batch, *model.logits(tensors, batch))
    _checked(batch, alloc)
    delays = pair_delays(batch, alloc)
    loss = ad.mean(delays)
    model.params = ad.adam_step(adam, model.params, _grads(tape, loss, tensors))
    return delays.data[:, 0]


def train_unsupervised(model, dataset: Dataset, config: TrainConfig, held_out: Dataset | None = None):
    adam = ad.AdamState(lr=config.lr)

    def epoch_step(epoch, rng, _log):
        total, count = 0.0, 0
        for idx in _batches(len(dataset), config.batch_size, rng):
            batch = GraphBatch([dataset.instances[i] for i in idx])
            try:
                delays = unsupervised_step(model, batch, adam)
            except NumericError as exc:
                raise NumericError(f"batch at offset {count}: {exc}") from exc
            total += float(delays.sum())
            count += delays.size
        return total / count

    result = _loop(model, dataset, config, held_out, epoch_step)
    return model, result


# --- supervised on GA labels ---------------------------------------------------------------

def ga_labels(instances: Sequence[McInstance], generations: int, population: int, seed) -> list:
    labels = []
    for k, inst in enumerate(instances):
        cfg = GaConfig(population=population, generations=generations,
                       seed=int(np.random.default_rng([*np.atleast_1d(seed), k]).integers(2**62)))
        try:
            labels.append(ga_solve(inst, cfg).allocation)
        except Exception as exc:  # noqa: BLE001 - a failed label only drops the instance
            log.warning("GA label failed for instance %d: %s", k, exc)
            labels.append(None)
    return labels


def supervised_loss(batch: GraphBatch, alloc: PairAllocation, labels) -> ad.Tensor:
    """Batch mean of per-instance MSE over (x, p, f)."""
    lx = np.concatenate([l.offload.ravel() for l in labels])[:, None]
    lp = np.concatenate([l.power.ravel() for l in labels])[:, None]
    lf = np.concatenate([l.compute.ravel() for l in labels])[:, None]
    dx, dp, df = alloc.offload - lx, alloc.power - lp, alloc.compute - lf
    sq = dx * dx + dp * dp + df * df
    per_pair_count = 3.0 * batch.users_per_pair * batch.servers_per_pair
    return ad.mean(ad.segment_sum(sq / per_pair_count, batch.pair_instance))


def train_supervised(model, dataset: Dataset, config: TrainConfig, held_out: Dataset | None = None,
                     label_budget: int | None = None):
    generations = config.label_generations if label_budget is None else label_budget
    adam = ad.AdamState(lr=config.lr)

    def epoch_step(epoch, rng, log_):
        labels = ga_labels(dataset.instances, generations, config.label_population, [config.seed, epoch])
        total, count = 0.0, 0
        for idx in _batches(len(dataset), config.batch_size, rng):
            keep = [i for i in idx if labels[i] is not None]
            log_.skipped += len(idx) - len(keep)
            if not keep:
                continue
            batch = GraphBatch([dataset.instances[i] for i in keep])
            tape = ad.Tape()
            tensors = _variables(tape, model.params)
            alloc = project_pairs(batch, *model.logits(tensors, batch))
            _checked(batch, alloc)
            loss = supervised_loss(batch, alloc, [labels[i] for i in keep])
            delays = pair_delays(batch, PairAllocation(alloc.offload.detach(), alloc.power.detach(), alloc.compute.detach()))
            model.params = ad.adam_step(adam, model.params, _grads(tape, loss, tensors))
            total += float(delays.data.sum())
            count += len(keep)
        return total / max(count, 1)

    result = _loop(model, dataset, config, held_out, epoch_step)
    return model, result


# --- actor-critic -----------------------------------------------------------------------------

@dataclass
class Critic:
    """MLP mapping (instance features, flattened x, p, f) to a predicted delay."""

    params: dict[str, np.ndarray]
    n_layers: int = 4

    def forward(self, tensors, features: np.ndarray, flat: Sequence) -> ad.Tensor:
        out = ad.concat([ad.constant(features)] + list(flat), axis=1)
        for k in range(self.n_layers):
            out = out @ tensors[f"w{k}"] + tensors[f"b{k}"]
            if k < self.n_layers - 1:
                out = ad.leaky_relu(out)
        return out


def init_critic(n_users: int, n_servers: int, seed: int, hidden: int = 64, layers: int = 4) -> Critic:
    nm = n_users * n_servers
    dims = [nm + n_users + n_servers + 3 * nm] + [hidden] * (layers - 1) + [1]
    rng = np.random.default_rng(seed)
    params = {}
    for k in range(layers):
        params[f"w{k}"] = glorot(rng, dims[k], dims[k + 1])
        params[f"b{k}"] = np.zeros((1, dims[k + 1]))
    return Critic(params, layers)


def _flat(alloc: PairAllocation, rows: int, detach: bool = False) -> list[ad.Tensor]:
    parts = (alloc.offload, alloc.power, alloc.compute)
    if detach:
        return [ad.constant(a.data.reshape(rows, -1)) for a in parts]
    return [ad.reshape(a, (rows, -1)) for a in parts]


def train_actor_critic(actor, dataset: Dataset, config: TrainConfig, held_out: Dataset | None = None,
                       critic=None):
    sizes = {(i.n_users, i.n_servers) for i in dataset.instances}
    if len(sizes) != 1:
        raise ConfigurationError(f"actor-critic needs a single instance size, got {sorted(sizes)}")
    n, m = sizes.pop()
    critic = critic or init_critic(n, m, config.seed + 7, config.critic_hidden, config.critic_layers)
    actor_adam = ad.AdamState(lr=config.lr)
    critic_adam = ad.AdamState(lr=config.lr)

    def epoch_step(epoch, rng, _log):
        total, count = 0.0, 0
        for idx in _batches(len(dataset), config.batch_size, rng):
            insts = [dataset.instances[i] for i in idx]
            batch = GraphBatch(insts)
            feats = mlp_features(insts)
            tape = ad.Tape()
            actor_t = _variables(tape, actor.params)
            alloc = project_pairs(batch, *actor.logits(actor_t, batch))
            _checked(batch, alloc)
            true = pair_delays(batch, PairAllocation(alloc.offload.detach(), alloc.power.detach(),
                                                     alloc.compute.detach())).data

            # critic regression on the detached allocation
            ctape = ad.Tape()
            critic_t = _variables(ctape, critic.params)
            err = critic.forward(critic_t, feats, _flat(alloc, len(insts), detach=True)) - true
            closs = ad.mean(err * err)
            critic.params = ad.adam_step(critic_adam, critic.params, _grads(ctape, closs, critic_t))

            # actor descends the critic's prediction
            frozen = {k: ad.Tensor(v) for k, v in critic.params.items()}
            aloss = ad.mean(critic.forward(frozen, feats, _flat(alloc, len(insts))))
            actor.params = ad.adam_step(actor_adam, actor.params, _grads(tape, aloss, actor_t))

            total += float(true.sum())
            count += len(insts)
        return total / count

    result = _loop(actor, dataset, config, held_out, epoch_step)
    result.critic = critic
    return actor, result


def fit_critic(critic, actor, dataset: Dataset, steps: int, lr: float = 1e-3, batch_size: int = 32, seed: int = 0):
    """Train only the critic against a frozen actor; returns (critic, mse history, target variance)."""
    adam = ad.AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    consts = {k: ad.Tensor(v) for k, v in actor.params.items()}
    cached = []
    for lo in range(0, len(dataset), batch_size):
        insts = list(dataset.instances[lo:lo + batch_size])
        batch = GraphBatch(insts)
        alloc = project_pairs(batch, *actor.logits(consts, batch))
        true = pair_delays(batch, alloc).data
        cached.append((mlp_features(insts), _flat(alloc, len(insts), detach=True), true))
    targets = np.concatenate([c[2] for c in cached])
    history = []
    for _ in range(steps):
        feats, flat, true = cached[rng.integers(len(cached))]
        tape = ad.Tape()
        t = _variables(tape, critic.params)
        err = critic.forward(t, feats, flat) - true
        loss = ad.mean(err * err)
        critic.params = ad.adam_step(adam, critic.params, _grads(tape, loss, t))
    for feats, flat, true in cached:
        pred = critic.forward({k: ad.Tensor(v) for k, v in critic.params.items()}, feats, flat).data
        history.append(float(np.mean((pred - true) ** 2)))
    return critic, float(np.mean(history)), float(np.var(targets))


def train(model, dataset: Dataset, config: TrainConfig, held_out: Dataset | None = None):
    """Dispatch on ``config.method``."""
    if config.method == "unsupervised":
        return train_unsupervised(model, dataset, config, held_out)
    if config.method == "supervised":
        return train_supervised(model, dataset, config, held_out)
    return train_actor_critic(model, dataset, config, held_out)
