"""Comparison solvers: genetic algorithm, fixed-size MLP, random allocator."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .core import Allocation, McInstance, project_to_feasible, total_delay
from .errors import InvalidArgumentError
from .graph import GraphBatch
from .lognn import as_constants, glorot

GA_SIGMA = 0.3


@dataclass(frozen=True)
class GaConfig:
    population: int = 200
    retain_rate: float = 0.4
    mutation_rate: float = 0.2
    selection_rate: float = 0.1
    generations: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ("retain_rate", "mutation_rate", "selection_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0, 1]")
        if self.retain_rate + self.selection_rate > 1.0:
            raise InvalidArgumentError("retain_rate + selection_rate must not exceed 1")
        if self.population < 2:
            raise InvalidArgumentError("population must be >= 2")
        if self.generations < 0:
            raise InvalidArgumentError("generations must be >= 0")


@dataclass
class GaResult:
    allocation: Allocation
    best_delay: float
    wall_clock: float
    history: list[float] = field(default_factory=list)   # best-ever delay after init and each generation

    def __iter__(self):
        # allows ``alloc, delay, seconds = ga_solve(...)``
        return iter((self.allocation, self.best_delay, self.wall_clock))


def chromosome_length(instance: McInstance) -> int:
    return 3 * instance.n_users * instance.n_servers + instance.n_users


def decode_chromosomes(genes: np.ndarray, n: int, m: int) -> np.ndarray:
    """``(P, 3NM + N)`` genes -> ``(P, N, M, 4)`` projection logits.

    Gene layout: x logits, p logits, f logits (each row-major N x M), then
    one power-scale logit per user.
    """
    nm = n * m
    pop = genes.shape[0]
    raw = np.empty((pop, n, m, 4))
    raw[..., 0] = genes[:, :nm].reshape(pop, n, m)
    raw[..., 1] = genes[:, nm:2 * nm].reshape(pop, n, m)
    raw[..., 2] = genes[:, 3 * nm:, None]
    raw[..., 3] = genes[:, 2 * nm:3 * nm].reshape(pop, n, m)
    return raw


def _fitness_delays(genes: np.ndarray, instance: McInstance) -> np.ndarray:
    return np.atleast_1d(total_delay(instance, project_to_feasible(decode_chromosomes(genes, instance.n_users, instance.n_servers), instance)))


def ga_solve(instance: McInstance, config: GaConfig = GaConfig()) -> GaResult:
    """Minimise total delay by evolving projection logits.

    Per generation the best ``retain_rate`` share survives, a further
    ``selection_rate`` share is drawn uniformly from the rest, and the
    population is refilled by uniform crossover of random survivors followed
    by per-gene Gaussian mutation of the offspring.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    length = chromosome_length(instance)
    pop = rng.standard_normal((config.population, length))
    delays = _fitness_delays(pop, instance)
    best = int(np.argmin(delays))
    best_genes, best_delay = pop[best].copy(), float(delays[best])
    history = [best_delay]
    n_keep = max(1, int(round(config.retain_rate * config.population)))
    n_lucky = int(round(config.selection_rate * config.population))
    n_lucky = min(n_lucky, config.population - n_keep)

    for _ in range(config.generations):
        order = np.argsort(delays, kind="stable")
        keep = order[:n_keep]
        if n_lucky:
            keep = np.concatenate([keep, rng.choice(order[n_keep:], size=n_lucky, replace=False)])
        parents, parent_delays = pop[keep], delays[keep]
        n_child = config.population - parents.shape[0]
        if n_child > 0:
            a = parents[rng.integers(parents.shape[0], size=n_child)]
            b = parents[rng.integers(parents.shape[0], size=n_child)]
            children = np.where(rng.random((n_child, length)) < 0.5, a, b)
            mutate = rng.random(children.shape) < config.mutation_rate
            children = children + mutate * rng.normal(0.0, GA_SIGMA, children.shape)
            pop = np.vstack([parents, children])
            delays = np.concatenate([parent_delays, _fitness_delays(children, instance)])
        else:
            pop, delays = parents, parent_delays
        gen_best = int(np.argmin(delays))
        if delays[gen_best] < best_delay:
            best_delay = float(delays[gen_best])
            best_genes = pop[gen_best].copy()
        history.append(best_delay)

    raw = decode_chromosomes(best_genes[None], instance.n_users, instance.n_servers)[0]
    alloc = project_to_feasible(raw, instance)
    return GaResult(alloc, best_delay, time.perf_counter() - start, history)


def random_allocation(instance: McInstance, seed: int) -> Allocation:
    rng = np.random.default_rng(seed)
    return project_to_feasible(rng.standard_normal((instance.n_users, instance.n_servers, 4)), instance)


# --- fixed-size MLP ---------------------------------------------------------------

MLP_HIDDEN = 64
MLP_LAYERS = 4


def mlp_features(instances) -> np.ndarray:
    """Row-major channel gains, then task sizes, then server capacities."""
    return np.stack([np.concatenate([i.channel_gain.ravel(), i.task_size, i.server_compute]) for i in instances])


@dataclass
class MlpModel:
    params: dict[str, np.ndarray]
    n_users: int
    n_servers: int
    hidden_dim: int = MLP_HIDDEN
    n_layers: int = MLP_LAYERS
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    kind = "mlp"

    @property
    def input_dim(self) -> int:
        return self.n_users * self.n_servers + self.n_users + self.n_servers

    @property
    def output_dim(self) -> int:
        return 3 * self.n_users * self.n_servers + self.n_users

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def raw_outputs(self, tensors: dict[str, ad.Tensor], features) -> ad.Tensor:
        out = ad.constant(features)
        for k in range(self.n_layers):
            out = out @ tensors[f"w{k}"] + tensors[f"b{k}"]
            if k < self.n_layers - 1:
                out = ad.leaky_relu(out)
        return out

    def logits(self, tensors: dict[str, ad.Tensor], batch: GraphBatch):
        if any(size != (self.n_users, self.n_servers) for size in batch.sizes):
            raise InvalidArgumentError(f"MLP built for ({self.n_users}, {self.n_servers}) got sizes {set(batch.sizes)}")
        out = self.raw_outputs(tensors, mlp_features(batch.instances))
        nm = self.n_users * self.n_servers
        x = ad.reshape(out[:, :nm], (-1, 1))
        p = ad.reshape(out[:, nm:2 * nm], (-1, 1))
        f = ad.reshape(out[:, 2 * nm:3 * nm], (-1, 1))
        scale = ad.reshape(out[:, 3 * nm:], (-1, 1))
        return x, p, scale, f

    def raw_logits(self, instance: McInstance) -> np.ndarray:
        """``(N0, M0, 4)`` projection logits for one instance of the trained size."""
        out = self.raw_outputs(as_constants(self.params), mlp_features([instance])).data[0]
        return decode_chromosomes(out[None], self.n_users, self.n_servers)[0]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "n_users": self.n_users, "n_servers": self.n_servers,
            "hidden_dim": self.hidden_dim, "n_layers": self.n_layers, "seed": self.seed, "metadata": self.metadata,
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpModel":
        params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in data["params"].items()}
        return cls(params, data["n_users"], data["n_servers"], data["hidden_dim"], data["n_layers"],
                   data.get("seed"), data.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MlpModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def init_mlp(n_users: int, n_servers: int, seed: int, hidden_dim: int = MLP_HIDDEN,
             n_layers: int = MLP_LAYERS) -> MlpModel:
    model = MlpModel({}, n_users, n_servers, hidden_dim, n_layers, seed)
    dims = [model.input_dim] + [hidden_dim] * (n_layers - 1) + [model.output_dim]
    rng = np.random.default_rng(seed)
    for k in range(n_layers):
        model.params[f"w{k}"] = glorot(rng, dims[k], dims[k + 1])
        model.params[f"b{k}"] = np.zeros((1, dims[k + 1]))
    return model


def mlp_forward(model: MlpModel, instance: McInstance, mode: str = "exact") -> Allocation:
    """Allocation from a fixed-size MLP.

    ``exact`` requires the trained size. ``DI`` (direct inference) feeds the
    leading ``N0 x M0`` block, zero-padding smaller instances; users and
    links outside that block get random logits drawn from U(-1, 1) before
    the joint projection.
    """
    n0, m0 = model.n_users, model.n_servers
    n, m = instance.n_users, instance.n_servers
    if mode == "exact":
        if (n, m) != (n0, m0):
            raise InvalidArgumentError(f"exact mode needs a ({n0}, {m0}) instance, got ({n}, {m})")
        return project_to_feasible(model.raw_logits(instance), instance)
    if mode.upper() != "DI":
        raise InvalidArgumentError(f"unknown MLP mode {mode!r}")
    bn, bm = min(n, n0), min(m, m0)
    h = np.zeros((n0, m0))
    h[:bn, :bm] = instance.channel_gain[:bn, :bm]
    d = np.zeros(n0)
    d[:bn] = instance.task_size[:bn]
    fs = np.zeros(m0)
    fs[:bm] = instance.server_compute[:bm]
    feats = np.concatenate([h.ravel(), d, fs])[None]
    out = model.raw_outputs(as_constants(model.params), feats).data
    block = decode_chromosomes(out, n0, m0)[0]

    rng = np.random.default_rng(instance.seed if instance.seed is not None else 0)
    raw = rng.uniform(-1.0, 1.0, size=(n, m, 4))
    raw[:bn, :bm] = block[:bn, :bm]
    return project_to_feasible(raw, instance)
