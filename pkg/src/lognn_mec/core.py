"""MEC scenarios, allocations, and the task-delay objective.

All array routines accept optional leading batch dimensions on the
allocation side (``(..., N, M)``) so population-based solvers can score many
candidates in one call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, NumericError

GEN_EPS = 1e-3          # generated d, f^s, h are clamped to [GEN_EPS, 1]
FLOOR = 1e-6            # floor on f_{i,j} and on rates inside the objective
ZERO_OFFLOAD = 1e-12    # offload shares below this contribute nothing
PROJ_EPS = 1e-6         # uniform mixing weight inside the softmax projections
FEAS_TOL = 1e-6


@dataclass(frozen=True)
class PhysicalConstants:
    bandwidth: float = 1.0
    noise_power: float = 0.1
    compute_factor: float = 1.0
    p_max: float = 1.0

    def __post_init__(self):
        for name in ("bandwidth", "noise_power", "compute_factor", "p_max"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")


@dataclass(frozen=True, eq=False)
class McInstance:
    """One MEC scenario with ``n_users`` users and ``n_servers`` servers."""

    task_size: np.ndarray        # (N,) bits
    server_compute: np.ndarray   # (M,) cycles/s
    channel_gain: np.ndarray     # (N, M)
    bandwidth: float = 1.0
    noise_power: float = 0.1
    compute_factor: float = 1.0
    p_max: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        d = np.array(self.task_size, dtype=np.float64).reshape(-1)
        fs = np.array(self.server_compute, dtype=np.float64).reshape(-1)
        h = np.array(self.channel_gain, dtype=np.float64)
        if h.ndim != 2 or h.shape != (d.size, fs.size):
            raise InvalidArgumentError(f"channel_gain shape {h.shape} != ({d.size}, {fs.size})")
        if d.size < 1 or fs.size < 1:
            raise InvalidArgumentError("need at least one user and one server")
        for name, arr in (("task_size", d), ("server_compute", fs), ("channel_gain", h)):
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise InvalidArgumentError(f"{name} must be finite and strictly positive")
        for name in ("bandwidth", "noise_power", "compute_factor", "p_max"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        for arr in (d, fs, h):
            arr.flags.writeable = False
        object.__setattr__(self, "task_size", d)
        object.__setattr__(self, "server_compute", fs)
        object.__setattr__(self, "channel_gain", h)

    @property
    def n_users(self) -> int:
        return self.task_size.size

    @property
    def n_servers(self) -> int:
        return self.server_compute.size

    @property
    def constants(self) -> PhysicalConstants:
        return PhysicalConstants(self.bandwidth, self.noise_power, self.compute_factor, self.p_max)

    def permuted(self, users=None, servers=None) -> "McInstance":
        users = np.arange(self.n_users) if users is None else np.asarray(users)
        servers = np.arange(self.n_servers) if servers is None else np.asarray(servers)
        return McInstance(
            self.task_size[users], self.server_compute[servers], self.channel_gain[np.ix_(users, servers)],
            self.bandwidth, self.noise_power, self.compute_factor, self.p_max, self.seed,
        )

    def to_dict(self) -> dict:
        return {
            "n_users": self.n_users,
            "n_servers": self.n_servers,
            "task_size": self.task_size.tolist(),
            "server_compute": self.server_compute.tolist(),
            "channel_gain": self.channel_gain.tolist(),
            "bandwidth": self.bandwidth,
            "noise_power": self.noise_power,
            "compute_factor": self.compute_factor,
            "p_max": self.p_max,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "McInstance":
        inst = cls(
            np.asarray(data["task_size"]), np.asarray(data["server_compute"]), np.asarray(data["channel_gain"]),
            float(data["bandwidth"]), float(data["noise_power"]), float(data["compute_factor"]),
            float(data["p_max"]), data.get("seed"),
        )
        if inst.n_users != data.get("n_users", inst.n_users) or inst.n_servers != data.get("n_servers", inst.n_servers):
            raise InvalidArgumentError("n_users/n_servers disagree with array shapes")
        return inst

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "McInstance":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class Allocation:
    """Decision variables as dense user x server matrices (or batches of them)."""

    offload: np.ndarray
    power: np.ndarray
    compute: np.ndarray

    def __post_init__(self):
        x, p, f = (np.asarray(a, dtype=np.float64) for a in (self.offload, self.power, self.compute))
        if not (x.shape == p.shape == f.shape) or x.ndim < 2:
            raise InvalidArgumentError(f"allocation shapes differ: {x.shape}, {p.shape}, {f.shape}")
        object.__setattr__(self, "offload", x)
        object.__setattr__(self, "power", p)
        object.__setattr__(self, "compute", f)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.offload.shape

    def to_dict(self) -> dict:
        return {"offload": self.offload.tolist(), "power": self.power.tolist(), "compute": self.compute.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Allocation":
        return cls(np.asarray(data["offload"]), np.asarray(data["power"]), np.asarray(data["compute"]))


@dataclass(frozen=True)
class FeasibilityReport:
    """Largest violation of each constraint (0 when satisfied)."""

    offload_nonneg: float
    power_nonneg: float
    compute_nonneg: float
    offload_rows: float
    power_budget: float
    compute_budget: float
    tol: float = FEAS_TOL
    violations: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "violations", {
            "offload_nonneg": self.offload_nonneg,
            "power_nonneg": self.power_nonneg,
            "compute_nonneg": self.compute_nonneg,
            "offload_rows": self.offload_rows,
            "power_budget": self.power_budget,
            "compute_budget": self.compute_budget,
        })

    @property
    def max_violation(self) -> float:
        return max(self.violations.values())

    @property
    def feasible(self) -> bool:
        return self.max_violation <= self.tol


def generate_instance(n_users: int, n_servers: int, seed: int,
                      constants: PhysicalConstants | None = None) -> McInstance:
    """Draw h, d, f^s i.i.d. from U(0, 1), clamped to [GEN_EPS, 1]."""
    if n_users < 1 or n_servers < 1:
        raise InvalidArgumentError(f"need n_users >= 1 and n_servers >= 1, got {n_users}, {n_servers}")
    constants = constants or PhysicalConstants()
    rng = np.random.default_rng(seed)
    h = rng.uniform(0.0, 1.0, size=(n_users, n_servers))
    d = rng.uniform(0.0, 1.0, size=n_users)
    fs = rng.uniform(0.0, 1.0, size=n_servers)
    clip = lambda a: np.clip(a, GEN_EPS, 1.0)  # noqa: E731
    return McInstance(clip(d), clip(fs), clip(h), constants.bandwidth, constants.noise_power,
                      constants.compute_factor, constants.p_max, seed)


def _check_matrix(instance: McInstance, arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[-2:] != (instance.n_users, instance.n_servers):
        raise InvalidArgumentError(f"{name} shape {arr.shape} does not end in ({instance.n_users}, {instance.n_servers})")
    return arr


def transmission_rate(instance: McInstance, power: np.ndarray) -> np.ndarray:
    """Per-link rate with interference from all other users at the same server."""
    p = _check_matrix(instance, power, "power")
    if np.any(p < 0):
        raise InvalidArgumentError("power must be non-negative")
    ph = p * instance.channel_gain
    interference = ph.sum(axis=-2, keepdims=True) - ph
    interference = np.maximum(interference, 0.0)
    return instance.bandwidth * np.log2(1.0 + ph / (interference + instance.noise_power))


def compute_delay(instance: McInstance, allocation: Allocation) -> np.ndarray:
    x = _check_matrix(instance, allocation.offload, "offload")
    f = np.maximum(_check_matrix(instance, allocation.compute, "compute"), FLOOR)
    d = instance.task_size[:, None]
    return x * d * instance.compute_factor / f


def total_delay(instance: McInstance, allocation: Allocation) -> np.ndarray | float:
    """Sum over links of transmission plus computing delay.

    Links with offload share below ``ZERO_OFFLOAD`` contribute exactly 0.
    Returns a float for a single allocation, an array for a batch.
    """
    x = _check_matrix(instance, allocation.offload, "offload")
    f = np.maximum(_check_matrix(instance, allocation.compute, "compute"), FLOOR)
    r = np.maximum(transmission_rate(instance, allocation.power), FLOOR)
    d = instance.task_size[:, None]
    terms = d * x / r + x * d * instance.compute_factor / f
    terms = np.where(x < ZERO_OFFLOAD, 0.0, terms)
    out = terms.sum(axis=(-2, -1))
    return float(out) if out.ndim == 0 else out


def check_feasibility(instance: McInstance, allocation: Allocation, tol: float = FEAS_TOL) -> FeasibilityReport:
    x, p, f = allocation.offload, allocation.power, allocation.compute
    if x.shape[-2:] != (instance.n_users, instance.n_servers):
        raise InvalidArgumentError(f"allocation shape {x.shape} does not match instance")
    neg = lambda a: float(np.max(np.maximum(-a, 0.0)))  # noqa: E731
    return FeasibilityReport(
        offload_nonneg=neg(x),
        power_nonneg=neg(p),
        compute_nonneg=neg(f),
        offload_rows=float(np.max(np.abs(x.sum(axis=-1) - 1.0))),
        power_budget=float(np.max(np.maximum(p.sum(axis=-1) - instance.p_max, 0.0))),
        compute_budget=float(np.max(np.maximum(f.sum(axis=-2) - instance.server_compute, 0.0))),
        tol=tol,
    )


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def project_to_feasible(raw: np.ndarray, instance: McInstance) -> Allocation:
    """Map unconstrained logits ``(..., N, M, 4)`` to a feasible allocation.

    Channels are ``[offload, power, power-scale, compute]``. The power-scale
    channel is a per-user quantity; only its first server entry is read.
    Every softmax is mixed with a uniform weight ``PROJ_EPS`` so all outputs
    stay strictly positive while row/column sums are preserved.
    """
    raw = np.asarray(raw, dtype=np.float64)
    n, m = instance.n_users, instance.n_servers
    if raw.shape[-3:] != (n, m, 4):
        raise InvalidArgumentError(f"logits shape {raw.shape} does not end in ({n}, {m}, 4)")
    if not np.all(np.isfinite(raw)):
        raise NumericError("project_to_feasible received non-finite logits")
    mix = lambda s, k: s * (1.0 - k * PROJ_EPS) + PROJ_EPS  # noqa: E731
    x = mix(_softmax(raw[..., 0], -1), m)
    scale = _sigmoid(raw[..., :, :1, 2])
    p = instance.p_max * scale * mix(_softmax(raw[..., 1], -1), m)
    f = instance.server_compute * mix(_softmax(raw[..., 3], -2), n)
    return Allocation(x, p, f)


def optimal_delay_single(instance: McInstance) -> float:
    """Closed-form optimum for one user and one server (full offload, power, compute)."""
    if instance.n_users != 1 or instance.n_servers != 1:
        raise InvalidArgumentError("optimal_delay_single needs N = M = 1")
    d = instance.task_size[0]
    h = instance.channel_gain[0, 0]
    rate = instance.bandwidth * np.log2(1.0 + instance.p_max * h / instance.noise_power)
    return float(d / rate + d * instance.compute_factor / instance.server_compute[0])
