"""Bipartite-graph encoding of MEC instances.

Users occupy node indices ``0..N-1`` and servers ``N..N+M-1``. Every
user-server pair is a link; decisions are read out per link.

:class:`GraphBatch` packs several instances into one disjoint graph in
edge-list form, which is what the network and the differentiable objective
run on. Pairs are ordered instance-major, then user, then server, so the
pair block of one instance reshapes to a row-major ``(N, M)`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .core import FLOOR, PROJ_EPS, ZERO_OFFLOAD, Allocation, McInstance, project_to_feasible
from .errors import InvalidArgumentError, NumericError

NODE_DIM = 3


@dataclass(frozen=True, eq=False)
class ProblemGraph:
    node_features: np.ndarray   # (N+M, 3): [value, is_user, is_server]
    adjacency: np.ndarray       # (N+M, N+M), h across the bipartition
    n_users: int
    n_servers: int

    @property
    def user_nodes(self) -> np.ndarray:
        return np.arange(self.n_users)

    @property
    def server_nodes(self) -> np.ndarray:
        return np.arange(self.n_users, self.n_users + self.n_servers)

    @property
    def n_links(self) -> int:
        return int(np.count_nonzero(self.adjacency))


@dataclass(frozen=True, eq=False)
class LinkWeights:
    user_links: np.ndarray     # (N, M, 2): [x, p] logits per user->server link
    server_links: np.ndarray   # (M, N): f logits per server->user link
    user_scale: np.ndarray     # (N,): power-scale logit per user

    def __post_init__(self):
        n, m, two = self.user_links.shape
        if two != 2 or self.server_links.shape != (m, n) or self.user_scale.shape != (n,):
            raise InvalidArgumentError("inconsistent link weight shapes")

    def stacked(self) -> np.ndarray:
        """Logits as ``(N, M, 4)`` = [x, p, scale, f] for the projection."""
        n, m, _ = self.user_links.shape
        scale = np.broadcast_to(self.user_scale[:, None], (n, m))
        return np.stack([self.user_links[..., 0], self.user_links[..., 1], scale, self.server_links.T], axis=-1)


def encode_graph(instance: McInstance) -> ProblemGraph:
    n, m = instance.n_users, instance.n_servers
    z = np.zeros((n + m, NODE_DIM))
    z[:n, 0] = instance.task_size
    z[:n, 1] = 1.0
    z[n:, 0] = instance.server_compute
    z[n:, 2] = 1.0
    a = np.zeros((n + m, n + m))
    a[:n, n:] = instance.channel_gain
    a[n:, :n] = instance.channel_gain.T
    return ProblemGraph(z, a, n, m)


def decode_allocation(links: LinkWeights, instance: McInstance) -> Allocation:
    if links.user_links.shape[:2] != (instance.n_users, instance.n_servers):
        raise InvalidArgumentError("link weights do not match instance size")
    stacked = links.stacked()
    if not np.all(np.isfinite(stacked)):
        raise NumericError("decode_allocation received non-finite link weights")
    return project_to_feasible(stacked, instance)


class GraphBatch:
    """Disjoint union of instance graphs in edge-list form."""

    def __init__(self, instances: Sequence[McInstance]):
        if not instances:
            raise InvalidArgumentError("empty batch")
        self.instances = list(instances)
        sizes = [(inst.n_users, inst.n_servers) for inst in instances]
        self.sizes = sizes
        n_nodes = [n + m for n, m in sizes]
        node_off = np.concatenate([[0], np.cumsum(n_nodes)[:-1]])
        user_off = np.concatenate([[0], np.cumsum([n for n, _ in sizes])[:-1]])
        server_off = np.concatenate([[0], np.cumsum([m for _, m in sizes])[:-1]])
        pair_counts = [n * m for n, m in sizes]
        self.pair_offsets = np.concatenate([[0], np.cumsum(pair_counts)])

        feats, pu_node, ps_node, pu, ps, inst_of_pair, h, d, fs = [], [], [], [], [], [], [], [], []
        consts = []
        for b, inst in enumerate(instances):
            n, m = sizes[b]
            feats.append(encode_graph(inst).node_features)
            ii, jj = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
            ii, jj = ii.ravel(), jj.ravel()
            pu_node.append(node_off[b] + ii)
            ps_node.append(node_off[b] + n + jj)
            pu.append(user_off[b] + ii)
            ps.append(server_off[b] + jj)
            inst_of_pair.append(np.full(n * m, b))
            h.append(inst.channel_gain.ravel())
            d.append(inst.task_size[ii])
            fs.append(inst.server_compute[jj])
            consts.append(np.tile([inst.bandwidth, inst.noise_power, inst.compute_factor, inst.p_max, n, m], (n * m, 1)))

        self.node_features = np.concatenate(feats)
        self.n_nodes = self.node_features.shape[0]
        self.n_users_total = int(sum(n for n, _ in sizes))
        self.n_servers_total = int(sum(m for _, m in sizes))
        self.user_node_index = np.concatenate([node_off[b] + np.arange(n) for b, (n, _) in enumerate(sizes)])
        pu_node, ps_node = np.concatenate(pu_node), np.concatenate(ps_node)
        self.n_pairs = pu_node.size
        self.h = np.concatenate(h)[:, None]
        self.task = np.concatenate(d)[:, None]
        self.capacity = np.concatenate(fs)[:, None]
        c = np.concatenate(consts)
        self.bandwidth, self.noise, self.cfactor, self.pmax = (c[:, k:k + 1] for k in range(4))
        self.servers_per_pair = c[:, 5:6]
        self.user_pmax = np.concatenate([np.full(n, inst.p_max) for inst, (n, _) in zip(instances, sizes)])[:, None]
        self.server_capacity = np.concatenate([inst.server_compute for inst in instances])[:, None]
        self.users_per_pair = c[:, 4:5]

        # segment groupings
        self.pair_user_node = ad.Segments(pu_node, self.n_nodes)
        self.pair_server_node = ad.Segments(ps_node, self.n_nodes)
        self.pair_user = ad.Segments(np.concatenate(pu), self.n_users_total)
        self.pair_server = ad.Segments(np.concatenate(ps), self.n_servers_total)
        self.pair_instance = ad.Segments(np.concatenate(inst_of_pair), len(instances))
        self.user_nodes = ad.Segments(self.user_node_index, self.n_nodes)
        # directed message edges: user->server then server->user
        src = np.concatenate([pu_node, ps_node])
        dst = np.concatenate([ps_node, pu_node])
        self.edge_src = ad.Segments(src, self.n_nodes)
        self.edge_dst = ad.Segments(dst, self.n_nodes)
        self.edge_h = np.concatenate([self.h, self.h])

    def __len__(self) -> int:
        return len(self.instances)

    def pair_block(self, values: np.ndarray, b: int) -> np.ndarray:
        """Rows of ``values`` belonging to instance ``b`` as an ``(N, M, ...)`` array."""
        n, m = self.sizes[b]
        lo, hi = self.pair_offsets[b], self.pair_offsets[b + 1]
        return values[lo:hi].reshape((n, m) + values.shape[1:])


@dataclass
class PairAllocation:
    """Allocation in pair (edge-list) form; each field is an ``(E, 1)`` tensor."""

    offload: ad.Tensor
    power: ad.Tensor
    compute: ad.Tensor

    def to_allocations(self, batch: GraphBatch) -> list[Allocation]:
        return [
            Allocation(batch.pair_block(self.offload.data[:, 0], b), batch.pair_block(self.power.data[:, 0], b),
                       batch.pair_block(self.compute.data[:, 0], b))
            for b in range(len(batch))
        ]


def project_pairs(batch: GraphBatch, x_logit, p_logit, scale_logit, f_logit) -> PairAllocation:
    """Differentiable counterpart of :func:`core.project_to_feasible` on a batch.

    ``x_logit``, ``p_logit``, ``f_logit`` are ``(E, 1)``; ``scale_logit`` is
    ``(total users, 1)``.
    """
    x = ad.segment_softmax(x_logit, batch.pair_user) * (1.0 - batch.servers_per_pair * PROJ_EPS) + PROJ_EPS
    share = ad.segment_softmax(p_logit, batch.pair_user) * (1.0 - batch.servers_per_pair * PROJ_EPS) + PROJ_EPS
    scale = ad.row_gather(ad.sigmoid(scale_logit), batch.pair_user)
    p = batch.pmax * scale * share
    f = batch.capacity * (ad.segment_softmax(f_logit, batch.pair_server) * (1.0 - batch.users_per_pair * PROJ_EPS) + PROJ_EPS)
    return PairAllocation(x, p, f)


def pair_delays(batch: GraphBatch, alloc: PairAllocation) -> ad.Tensor:
    """Total delay of every instance in the batch, shape ``(B, 1)``."""
    ph = alloc.power * batch.h
    at_server = ad.row_gather(ad.segment_sum(ph, batch.pair_server), batch.pair_server)
    interference = ad.clamp_min(at_server - ph, 0.0)
    rate = batch.bandwidth * ad.log2(1.0 + ph / (interference + batch.noise))
    rate = ad.clamp_min(rate, FLOOR)
    f = ad.clamp_min(alloc.compute, FLOOR)
    dx = batch.task * alloc.offload
    terms = dx / rate + dx * batch.cfactor / f
    active = (alloc.offload.data >= ZERO_OFFLOAD).astype(np.float64)
    return ad.segment_sum(terms * active, batch.pair_instance)


def pair_violation(batch: GraphBatch, alloc: PairAllocation) -> float:
    """Largest constraint violation over the batch (0 when feasible)."""
    x, p, f = alloc.offload.data, alloc.power.data, alloc.compute.data
    rows = np.abs(batch.pair_user.reduce(x) - 1.0).max()
    power = (batch.pair_user.reduce(p) - batch.user_pmax).max()
    compute = (batch.pair_server.reduce(f) - batch.server_capacity).max()
    neg = max(-x.min(), -p.min(), -f.min())
    return float(max(rows, power, compute, neg, 0.0))
