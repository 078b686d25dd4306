"""Link-output graph attention network.

Each layer computes, for every directed link ``j -> i``:

* a message ``m_ij = lrelu([e_i || e_j] W_agg + h_ij w_h + b)``,
* an attention score ``lrelu(a1 . W1 e_i + a2 . W2 e_j)`` normalised by a
  softmax over the neighbours of ``i``,
* and the node update ``e_i' = phi([e_i || sum_j alpha_ij m_ij])`` with
  ``phi`` a one-hidden-layer perceptron.

Attention at layer ``l`` uses the layer ``l-1`` embeddings. After the last
layer, two pair readouts emit ``[p, x]`` logits from ``[s_user, s_server,
h]`` and ``f`` logits from ``[s_server, s_user, h]``; a node head emits the
per-user power-scale logit. No parameter depends on the graph size.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .core import Allocation, McInstance
from .errors import NumericError
from .graph import NODE_DIM, GraphBatch, LinkWeights, ProblemGraph, project_pairs

HIDDEN_DIM = 64
N_LAYERS = 2


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class LognnModel:
    params: dict[str, np.ndarray]
    hidden_dim: int = HIDDEN_DIM
    n_layers: int = N_LAYERS
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    kind = "lognn"

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def logits(self, tensors: dict[str, ad.Tensor], batch: GraphBatch):
        return forward_pairs(tensors, batch, self.n_layers)

    def to_dict(self) -> dict:
        layers = []
        for layer in range(self.n_layers):
            prefix = f"layer{layer}."
            layers.append({k[len(prefix):]: _tensor_dict(v) for k, v in self.params.items() if k.startswith(prefix)})
        readout = {k: _tensor_dict(v) for k, v in self.params.items() if not k.startswith("layer")}
        return {
            "kind": self.kind,
            "hidden_dim": self.hidden_dim,
            "n_layers": self.n_layers,
            "seed": self.seed,
            "metadata": self.metadata,
            "layers": layers,
            "readout": readout,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LognnModel":
        params = {}
        for layer, tensors in enumerate(data["layers"]):
            for k, v in tensors.items():
                params[f"layer{layer}.{k}"] = _tensor_from(v)
        for k, v in data["readout"].items():
            params[k] = _tensor_from(v)
        return cls(params, data["hidden_dim"], data["n_layers"], data.get("seed"), data.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "LognnModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def _tensor_dict(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def _tensor_from(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def init_model(seed: int, hidden_dim: int = HIDDEN_DIM, n_layers: int = N_LAYERS) -> LognnModel:
    if hidden_dim < 1 or n_layers < 1:
        raise ValueError("hidden_dim and n_layers must be >= 1")
    rng = np.random.default_rng(seed)
    hd = hidden_dim
    params: dict[str, np.ndarray] = {}
    for layer in range(n_layers):
        din = NODE_DIM if layer == 0 else hd
        p = f"layer{layer}."
        params[p + "agg_w"] = glorot(rng, 2 * din, hd)
        params[p + "agg_edge"] = glorot(rng, 1, hd)
        params[p + "agg_b"] = np.zeros((1, hd))
        params[p + "attn_w1"] = glorot(rng, din, hd)
        params[p + "attn_w2"] = glorot(rng, din, hd)
        params[p + "attn_vec"] = glorot(rng, 2 * hd, 1)
        params[p + "upd_w1"] = glorot(rng, din + hd, hd)
        params[p + "upd_b1"] = np.zeros((1, hd))
        params[p + "upd_w2"] = glorot(rng, hd, hd)
        params[p + "upd_b2"] = np.zeros((1, hd))
    params["user_hidden_w"] = glorot(rng, 2 * hd + 1, hd)
    params["user_hidden_b"] = np.zeros((1, hd))
    params["readout_user"] = glorot(rng, hd, 2)            # W3 -> [p, x]
    params["readout_user_b"] = np.zeros((1, 2))
    params["server_hidden_w"] = glorot(rng, 2 * hd + 1, hd)
    params["server_hidden_b"] = np.zeros((1, hd))
    params["readout_server"] = glorot(rng, hd, 1)          # W4 -> f
    params["readout_server_b"] = np.zeros((1, 1))
    params["readout_scale"] = glorot(rng, hd, 1)
    params["readout_scale_b"] = np.zeros((1, 1))
    return LognnModel(params, hidden_dim, n_layers, seed)


def _layer(t: dict[str, ad.Tensor], prefix: str, e: ad.Tensor, batch: GraphBatch) -> ad.Tensor:
    din = e.shape[1]
    w = t[prefix + "agg_w"]
    to_dst = ad.row_gather(e @ w[:din], batch.edge_dst)
    from_src = ad.row_gather(e @ w[din:], batch.edge_src)
    msg = ad.leaky_relu(to_dst + from_src + batch.edge_h * t[prefix + "agg_edge"] + t[prefix + "agg_b"])

    hd = t[prefix + "attn_w1"].shape[1]
    vec = t[prefix + "attn_vec"]
    score_dst = (e @ t[prefix + "attn_w1"]) @ vec[:hd]
    score_src = (e @ t[prefix + "attn_w2"]) @ vec[hd:]
    score = ad.leaky_relu(ad.row_gather(score_dst, batch.edge_dst) + ad.row_gather(score_src, batch.edge_src))
    alpha = ad.segment_softmax(score, batch.edge_dst)

    pooled = ad.segment_sum(alpha * msg, batch.edge_dst)
    hidden = ad.leaky_relu(ad.concat([e, pooled], axis=1) @ t[prefix + "upd_w1"] + t[prefix + "upd_b1"])
    return hidden @ t[prefix + "upd_w2"] + t[prefix + "upd_b2"]


def _pair_head(t, prefix: str, s: ad.Tensor, first: ad.Segments, second: ad.Segments, h: np.ndarray) -> ad.Tensor:
    hd = s.shape[1]
    w = t[prefix + "_hidden_w"]
    pre = (ad.row_gather(s @ w[:hd], first) + ad.row_gather(s @ w[hd:2 * hd], second)
           + h * w[2 * hd:] + t[prefix + "_hidden_b"])
    return ad.leaky_relu(pre)


def forward_pairs(t: dict[str, ad.Tensor], batch: GraphBatch, n_layers: int = N_LAYERS):
    """Raw logits ``(x, p, scale, f)`` for every pair of the batch."""
    e = ad.constant(batch.node_features)
    for layer in range(n_layers):
        try:
            e = _layer(t, f"layer{layer}.", e, batch)
        except NumericError as exc:
            raise NumericError(f"layer {layer}: {exc}") from exc
    try:
        user = _pair_head(t, "user", e, batch.pair_user_node, batch.pair_server_node, batch.h)
        px = user @ t["readout_user"] + t["readout_user_b"]
        server = _pair_head(t, "server", e, batch.pair_server_node, batch.pair_user_node, batch.h)
        f = server @ t["readout_server"] + t["readout_server_b"]
        users = ad.row_gather(e, batch.user_nodes)
        scale = users @ t["readout_scale"] + t["readout_scale_b"]
    except NumericError as exc:
        raise NumericError(f"readout: {exc}") from exc
    return px[:, 1:2], px[:, 0:1], scale, f


def as_constants(params: dict[str, np.ndarray]) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v) for k, v in params.items()}


def forward(model: LognnModel, graph: ProblemGraph | McInstance) -> LinkWeights:
    """Link logits for a single instance."""
    inst = graph if isinstance(graph, McInstance) else _instance_of(graph)
    batch = GraphBatch([inst])
    x, p, scale, f = model.logits(as_constants(model.params), batch)
    n, m = inst.n_users, inst.n_servers
    user_links = np.stack([x.data[:, 0].reshape(n, m), p.data[:, 0].reshape(n, m)], axis=-1)
    return LinkWeights(user_links, f.data[:, 0].reshape(n, m).T.copy(), scale.data[:, 0].copy())


def _instance_of(graph: ProblemGraph) -> McInstance:
    n = graph.n_users
    return McInstance(graph.node_features[:n, 0], graph.node_features[n:, 0], graph.adjacency[:n, n:])


def allocate_batch(model, batch: GraphBatch) -> list[Allocation]:
    """Feasible allocations for every instance of a batch (no gradient)."""
    logits = model.logits(as_constants(model.params), batch)
    return project_pairs(batch, *logits).to_allocations(batch)


def allocate(model, instance: McInstance) -> Allocation:
    return allocate_batch(model, GraphBatch([instance]))[0]


def count_decision_dims(graph: ProblemGraph) -> tuple[int, int]:
    """(link-output dimensionality, feasible decision dimensionality)."""
    n, m = graph.n_users, graph.n_servers
    links = graph.n_links // 2
    output_dims = 3 * links + n            # x, p, f per link plus one power scale per user
    feasible_dims = 3 * n * m + n
    return output_dims, feasible_dims
