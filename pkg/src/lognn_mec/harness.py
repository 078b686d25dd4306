"""Experiment harness: datasets on disk, scalability sweeps, timing, and the
training-method comparison."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .baselines import GaConfig, MlpModel, ga_solve, init_mlp, mlp_forward, random_allocation
from .core import Allocation, McInstance, check_feasibility, generate_instance, total_delay
from .errors import ConfigurationError, InvalidArgumentError, NumericError
from .graph import GraphBatch, pair_delays, project_pairs
from .lognn import LognnModel, allocate, as_constants, init_model
from .trainer import Dataset, TrainConfig, TrainLog, held_out_dataset, make_dataset, train

log = logging.getLogger(__name__)

FULL_GRID = (2, 3, 4, 5, 6, 7, 15, 16, 17, 18, 19, 20, 25, 26, 27, 28, 29, 30)
DESK_GRID = (2, 4, 8, 10)
SWEEP_METHODS = ("lognn", "mlp_di", "mlp_tr", "ga", "random")
CSV_COLUMNS = ("method", "M", "N", "seed", "mean_delay", "mean_inference_seconds", "mean_delay_plus_inference")


# --- datasets on disk --------------------------------------------------------------

def write_dataset(dataset: Dataset, directory, meta: dict | None = None) -> dict:
    """One JSON file per instance plus ``manifest.json``; returns the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for k, inst in enumerate(dataset.instances):
        name = f"instance_{k:05d}.json"
        inst.save(directory / name)
        files.append(name)
    manifest = {"n_instances": len(dataset), "files": files, "dataset_hash": dataset.content_hash(), **(meta or {})}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"no dataset manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    return Dataset(tuple(McInstance.load(directory / name) for name in manifest["files"]))


# --- sweep -----------------------------------------------------------------------------

@dataclass
class SweepSpec:
    server_counts: list = field(default_factory=lambda: list(DESK_GRID))
    user_factor: int = 2                 # N = user_factor * M
    instances_per_size: int = 64
    methods: list = field(default_factory=lambda: list(SWEEP_METHODS))
    seed: int = 0
    ga_generations: int = 100
    ga_population: int = 200

    def __post_init__(self):
        if not self.server_counts or any(int(m) < 1 for m in self.server_counts):
            raise ConfigurationError("server_counts must be non-empty with every M >= 1")
        if self.instances_per_size < 1:
            raise ConfigurationError("instances_per_size must be >= 1")
        unknown = set(self.methods) - set(SWEEP_METHODS)
        if unknown:
            raise ConfigurationError(f"unknown sweep methods {sorted(unknown)}")
        self.server_counts = [int(m) for m in self.server_counts]

    @classmethod
    def desk(cls, **kw) -> "SweepSpec":
        return cls(server_counts=list(DESK_GRID), **kw)

    @classmethod
    def full(cls, **kw) -> "SweepSpec":
        kw.setdefault("ga_generations", 500)
        return cls(server_counts=list(FULL_GRID), **kw)

    def instances(self, m: int) -> list[McInstance]:
        n = self.user_factor * m
        return [generate_instance(n, m, _cell_seed(self.seed, m, k)) for k in range(self.instances_per_size)]


def _cell_seed(seed: int, m: int, k: int) -> int:
    return int(np.random.default_rng([seed, m, k, 0xC311]).integers(2**62))


@dataclass
class SweepArtifacts:
    lognn: LognnModel | None = None
    mlp_di: MlpModel | None = None
    mlp_tr: dict = field(default_factory=dict)     # M -> MlpModel trained at (user_factor * M, M)

    def hashes(self) -> dict:
        out = {}
        if self.lognn is not None:
            out["lognn"] = self.lognn.content_hash()
        if self.mlp_di is not None:
            out["mlp_di"] = self.mlp_di.content_hash()
        for m, model in sorted(self.mlp_tr.items()):
            out[f"mlp_tr[{m}]"] = model.content_hash()
        return out


@dataclass
class SweepRow:
    method: str
    M: int
    N: int
    seed: int
    mean_delay: float
    mean_inference_seconds: float
    mean_delay_plus_inference: float

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, c) for c in CSV_COLUMNS)


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    per_instance: list[dict] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def row(self, method: str, m: int) -> SweepRow:
        for r in self.rows:
            if r.method == method and r.M == m:
                return r
        raise KeyError((method, m))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                writer.writerow(r.as_tuple())

    def write_per_instance_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["method", "M", "N", "seed", "delay", "inference_seconds"])
            writer.writeheader()
            writer.writerows(self.per_instance)

    def summary(self) -> str:
        methods = list(dict.fromkeys(r.method for r in self.rows))
        sizes = sorted({r.M for r in self.rows})
        head = f"{'method':<10}" + "".join(f"{'M=' + str(m):>12}" for m in sizes)
        lines = ["mean total delay", head]
        for method in methods:
            cells = []
            for m in sizes:
                try:
                    cells.append(f"{self.row(method, m).mean_delay:>12.3f}")
                except KeyError:
                    cells.append(f"{'-':>12}")
            lines.append(f"{method:<10}" + "".join(cells))
        lines += ["", "mean delay + inference seconds", head]
        for method in methods:
            cells = []
            for m in sizes:
                try:
                    cells.append(f"{self.row(method, m).mean_delay_plus_inference:>12.3f}")
                except KeyError:
                    cells.append(f"{'-':>12}")
            lines.append(f"{method:<10}" + "".join(cells))
        return "\n".join(lines)


def solver_for(method: str, spec: SweepSpec, artifacts: SweepArtifacts, m: int) -> Callable[[McInstance], Allocation]:
    """Instance -> allocation callable for one sweep cell."""
    if method == "lognn":
        model = artifacts.lognn
        return lambda inst: allocate(model, inst)
    if method == "mlp_di":
        model = artifacts.mlp_di
        return lambda inst: mlp_forward(model, inst, "DI")
    if method == "mlp_tr":
        model = artifacts.mlp_tr[m]
        return lambda inst: mlp_forward(model, inst, "exact")
    if method == "ga":
        def run_ga(inst):
            cfg = GaConfig(population=spec.ga_population, generations=spec.ga_generations, seed=inst.seed or 0)
            return ga_solve(inst, cfg).allocation
        return run_ga
    if method == "random":
        return lambda inst: random_allocation(inst, inst.seed or 0)
    raise ConfigurationError(f"unknown method {method!r}")


def _missing(spec: SweepSpec, artifacts: SweepArtifacts) -> list[str]:
    gaps = []
    if "lognn" in spec.methods and artifacts.lognn is None:
        gaps.append("lognn: no trained model")
    if "mlp_di" in spec.methods and artifacts.mlp_di is None:
        gaps.append("mlp_di: no trained model")
    if "mlp_tr" in spec.methods:
        gaps += [f"mlp_tr: no model for M={m}" for m in spec.server_counts if m not in artifacts.mlp_tr]
    return gaps


def run_sweep(spec: SweepSpec, artifacts: SweepArtifacts) -> SweepResult:
    gaps = _missing(spec, artifacts)
    if gaps:
        raise ConfigurationError("missing sweep artifacts: " + "; ".join(gaps))
    result = SweepResult(manifest={"spec": asdict(spec), "artifacts": artifacts.hashes()})
    for m in spec.server_counts:
        n = spec.user_factor * m
        instances = spec.instances(m)
        for method in spec.methods:
            solve = solver_for(method, spec, artifacts, m)
            delays, seconds = [], []
            for inst in instances:
                start = time.perf_counter()
                alloc = solve(inst)
                elapsed = time.perf_counter() - start
                report = check_feasibility(inst, alloc)
                if not report.feasible:
                    raise NumericError(f"{method} produced an infeasible allocation at M={m}: {report.violations}")
                delay = total_delay(inst, alloc)
                delays.append(delay)
                seconds.append(elapsed)
                result.per_instance.append({"method": method, "M": m, "N": n, "seed": inst.seed,
                                            "delay": delay, "inference_seconds": elapsed})
            mean_delay = float(np.mean(delays))
            mean_sec = float(np.mean(seconds))
            result.rows.append(SweepRow(method, m, n, spec.seed, mean_delay, mean_sec, mean_delay + mean_sec))
            log.info("M=%d %s delay %.3f (%.4fs)", m, method, mean_delay, mean_sec)
    return result


def measure_inference(solve: Callable[[McInstance], object], instance: McInstance, repetitions: int = 5) -> float:
    """Median wall-clock of ``solve(instance)`` after one discarded warm-up call."""
    if repetitions < 3:
        raise InvalidArgumentError("repetitions must be >= 3")
    solve(instance)
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        solve(instance)
        times.append(time.perf_counter() - start)
    return max(statistics.median(times), 0.0)


# --- gradient self-check ---------------------------------------------------------------------

GRADCHECK_TOL = 1e-4


@dataclass
class GradcheckReport:
    parameter_errors: dict          # parameter -> worst relative error over instances
    op_errors: dict                 # op -> relative error of its reverse rule
    tolerance: float = GRADCHECK_TOL

    @property
    def max_error(self) -> float:
        return max(max(self.parameter_errors.values()), max(self.op_errors.values()))

    @property
    def worst(self) -> tuple[str, float]:
        merged = {**{f"param {k}": v for k, v in self.parameter_errors.items()},
                  **{f"op {k}": v for k, v in self.op_errors.items()}}
        name = max(merged, key=merged.get)
        return name, merged[name]

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    @property
    def failing_ops(self) -> list[str]:
        return sorted(k for k, v in self.op_errors.items() if v >= self.tolerance)

    def to_dict(self) -> dict:
        name, err = self.worst
        return {"passed": self.passed, "max_relative_error": self.max_error, "worst": name, "worst_error": err,
                "tolerance": self.tolerance, "failing_ops": self.failing_ops, "parameter_errors": self.parameter_errors, "op_errors": self.op_errors}


def model_gradcheck(model, instances: Sequence[McInstance], step: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Worst directional finite-difference error per parameter of ``model``
    for the total delay of each instance."""
    worst = {k: 0.0 for k in model.params}
    rng = np.random.default_rng(seed)
    for inst in instances:
        batch = GraphBatch([inst])

        def objective(params):
            alloc = project_pairs(batch, *model.logits(as_constants(params), batch))
            return float(pair_delays(batch, alloc).data.sum())

        tape = ad.Tape()
        tensors = {k: tape.variable(v, k) for k, v in model.params.items()}
        root = ad.sum(pair_delays(batch, project_pairs(batch, *model.logits(tensors, batch))))
        grads = ad.backward(tape, root, list(tensors.values()))
        errors = ad.directional_check(objective, model.params, {k: grads[t] for k, t in tensors.items()}, step, rng)
        for k, e in errors.items():
            worst[k] = max(worst[k], e)
    return worst


def run_gradcheck(seed: int = 0, n_instances: int = 5, n_users: int = 4, n_servers: int = 2,
                  step: float = 1e-5) -> GradcheckReport:
    model = init_model(seed)
    instances = [generate_instance(n_users, n_servers, _cell_seed(seed, n_servers, k)) for k in range(n_instances)]
    return GradcheckReport(model_gradcheck(model, instances, step, seed), ad.op_gradcheck(seed=seed))


# --- training-method comparison ------------------------------------------------------------

@dataclass
class ComparisonConfig:
    n_users: int = 8
    n_servers: int = 4
    epochs: int = 30
    n_train_samples: int = 256
    held_out_samples: int = 256
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    label_generations: int = 100
    backbones: list = field(default_factory=lambda: ["lognn", "mlp"])
    methods: list = field(default_factory=lambda: ["unsupervised", "supervised", "actor_critic"])

    def train_config(self, method: str) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, n_train_samples=self.n_train_samples,
                           lr=self.lr, seed=self.seed, size_distribution=[(self.n_users, self.n_servers)],
                           method=method, held_out_samples=self.held_out_samples,
                           label_generations=self.label_generations)


def fresh_model(backbone: str, n_users: int, n_servers: int, seed: int):
    if backbone == "lognn":
        return init_model(seed)
    if backbone == "mlp":
        return init_mlp(n_users, n_servers, seed)
    raise ConfigurationError(f"unknown backbone {backbone!r}")


def run_training_comparison(config: ComparisonConfig) -> dict[tuple[str, str], TrainLog]:
    """Train every (backbone, method) pair on identical data; aborted runs keep partial logs."""
    base = config.train_config("unsupervised")
    dataset = make_dataset(config.n_train_samples, base.size_distribution, config.seed)
    held_out = held_out_dataset(base)
    logs = {}
    for backbone in config.backbones:
        for method in config.methods:
            model = fresh_model(backbone, config.n_users, config.n_servers, config.seed)
            try:
                _, run_log = train(model, dataset, config.train_config(method), held_out)
            except NumericError as exc:
                run_log = getattr(exc, "train_log", None) or TrainLog(config.train_config(method), aborted=str(exc))
            logs[(backbone, method)] = run_log
    return logs


def comparison_rows(logs: dict[tuple[str, str], TrainLog]) -> list[dict]:
    rows = []
    for (backbone, method), run_log in logs.items():
        for r in run_log.records:
            rows.append({"backbone": backbone, "method": method, "epoch": r.epoch,
                         "train_obj": r.train_obj, "test_obj": r.test_obj, "seconds": r.seconds})
    return rows


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
