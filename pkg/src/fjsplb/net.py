"""Heterogeneous graph policy/value network.

Three embedding stages run over a batch of graphs (disjoint union):

* machine embedding: a machine's own encoding concatenated with the mean
  encoding of its compatible unscheduled operations;
* operation-buffer embedding: ``delta = w * enc(buffer)`` on every op that
  has a buffer edge, zero elsewhere;
* operation embedding: own encoding, predecessor and successor encodings,
  mean of compatible machine embeddings and ``delta``, concatenated and
  passed through a dense layer.

Machine and operation stages repeat ``gnn_layers`` times.  Aggregation is a
plain mean rather than attention; the stage functions are the seam where an
attention variant would go.

The actor scores every eligible (op, machine) pair from
``[op_emb | machine_emb | pooled graph]``; the critic reads the pooled graph
vector.  All arithmetic is float64.
"""
from __future__ import annotations

import io
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import NumericError, Var
from .graph import FEATURE_GROUPS, MACHINE_DIM, HeteroGraph, buffer_feature_dim, canonical_mode, op_feature_dim

CHECKPOINT_FORMAT = "fjsp-lbmk-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    category_count: int = 10
    embed_dim: int = 8
    hidden_dim: int = 128
    gnn_layers: int = 2
    alpha: float = 0.3
    activation: str = "tanh"
    seed: int = 0
    mode: str = "sort_only_weighted"
    features: tuple[str, ...] = FEATURE_GROUPS

    def __post_init__(self):
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("embed_dim and hidden_dim must be >= 1")
        if self.gnn_layers < 1:
            raise ValueError("gnn_layers must be >= 1")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        object.__setattr__(self, "features", tuple(f for f in FEATURE_GROUPS if f in self.features))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["features"] = tuple(d.get("features", FEATURE_GROUPS))
        return cls(**d)


def layer_shapes(cfg: NetConfig) -> list[tuple[str, tuple[int, int]]]:
    E, H = cfg.embed_dim, cfg.hidden_dim
    shapes = [
        ("enc_op", (op_feature_dim(cfg.category_count), E)),
        ("enc_machine", (MACHINE_DIM, E)),
        ("enc_buffer", (buffer_feature_dim(cfg.category_count), E)),
    ]
    for k in range(cfg.gnn_layers):
        shapes.append((f"machine_{k}", (2 * E, E)))
        shapes.append((f"op_{k}", (5 * E, E)))
    shapes += [("actor_hidden", (4 * E, H)), ("actor_out", (H, 1)),
               ("critic_hidden", (2 * E, H)), ("critic_out", (H, 1))]
    return shapes


class PolicyParams:
    """Ordered weight/bias arrays with a flat view for optimizers and gradient checks."""

    def __init__(self, config: NetConfig, arrays: "OrderedDict[str, np.ndarray] | None" = None):
        self.config = config
        if arrays is None:
            rng = np.random.default_rng(config.seed)
            arrays = OrderedDict()
            for name, (fan_in, fan_out) in layer_shapes(config):
                bound = 1.0 / np.sqrt(fan_in)
                arrays[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                arrays[f"{name}.b"] = rng.uniform(-bound, bound, size=(fan_out,))
        self.arrays = arrays

    def names(self) -> list[str]:
        return list(self.arrays)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for k, a in self.arrays.items():
            n = a.size
            self.arrays[k] = np.asarray(vec[pos:pos + n], dtype=np.float64).reshape(a.shape).copy()
            pos += n
        if pos != len(vec):
            raise ValueError("flat vector length does not match parameter count")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.config, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def flatten_grads(self, grads: dict) -> np.ndarray:
        return np.concatenate([grads[k].reshape(-1) for k in self.arrays])

    def leaves(self) -> dict[str, Var]:
        return {k: Var(v, name=k) for k, v in self.arrays.items()}

    # -------------------------------------------------------------- I/O
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "config": self.config.to_dict(), "order": self.names()}
        np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **{k.replace(".", "__"): v for k, v in self.arrays.items()})
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PolicyParams":
        try:
            z = np.load(io.BytesIO(data), allow_pickle=False)
            meta = json.loads(bytes(z["__meta__"]).decode())
        except Exception as exc:
            raise CheckpointError(f"unreadable checkpoint: {exc}") from None
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError("not a policy checkpoint of a supported version")
        cfg = NetConfig.from_dict(meta["config"])
        arrays = OrderedDict((k, z[k.replace(".", "__")].astype(np.float64)) for k in meta["order"])
        expect = {f"{n}.{p}": (s if p == "W" else (s[1],)) for n, s in layer_shapes(cfg) for p in ("W", "b")}
        got = {k: v.shape for k, v in arrays.items()}
        if got != {k: tuple(v) for k, v in expect.items()}:
            raise CheckpointError("checkpoint tensors do not match its configuration")
        return cls(cfg, arrays)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PolicyParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# ---------------------------------------------------------------- batching

def _csr(rows, cols, vals, shape):
    return sp.csr_matrix((np.asarray(vals, dtype=np.float64), (np.asarray(rows), np.asarray(cols))), shape=shape)


def _mean_matrix(rows, cols, shape):
    """Row-normalised incidence matrix: row r averages the listed columns."""
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) == 0:
        return sp.csr_matrix(shape, dtype=np.float64)
    deg = np.bincount(rows, minlength=shape[0]).astype(np.float64)
    return _csr(rows, cols, 1.0 / deg[rows], shape)


@dataclass
class GraphBatch:
    """Disjoint union of graphs expressed as constant sparse operators."""

    n_graphs: int
    op_x: np.ndarray
    machine_x: np.ndarray
    buffer_x: np.ndarray
    pred: sp.csr_matrix
    succ: sp.csr_matrix
    machine_agg: sp.csr_matrix
    op_agg: sp.csr_matrix
    buffer_msg: sp.csr_matrix  # (N_op, G) carries the edge weights
    pool_op: sp.csr_matrix
    pool_machine: sp.csr_matrix
    pair_op: sp.csr_matrix
    pair_machine: sp.csr_matrix
    pair_graph: sp.csr_matrix
    pair_offsets: np.ndarray
    pair_counts: np.ndarray

    @property
    def n_pairs(self) -> int:
        return self.pair_op.shape[0]


def collate(graphs: list[HeteroGraph]) -> GraphBatch:
    G = len(graphs)
    n_op = np.array([g.n_ops for g in graphs])
    n_m = np.array([g.n_machines for g in graphs])
    n_pair = np.array([len(g.pairs) for g in graphs])
    off_op = np.concatenate([[0], np.cumsum(n_op)[:-1]])
    off_m = np.concatenate([[0], np.cumsum(n_m)[:-1]])
    N_op, N_m, A = int(n_op.sum()), int(n_m.sum()), int(n_pair.sum())

    pred = np.concatenate([g.pred + np.where(g.pred >= 0, o, 0) for g, o in zip(graphs, off_op)])
    succ = np.concatenate([g.succ + np.where(g.succ >= 0, o, 0) for g, o in zip(graphs, off_op)])
    ids = np.arange(N_op)
    hp, hs = pred >= 0, succ >= 0
    P_pred = _csr(ids[hp], pred[hp], np.ones(hp.sum()), (N_op, N_op))
    P_succ = _csr(ids[hs], succ[hs], np.ones(hs.sum()), (N_op, N_op))

    e_op = np.concatenate([g.om_edges[:, 0] + o for g, o in zip(graphs, off_op)])
    e_m = np.concatenate([g.om_edges[:, 1] + o for g, o in zip(graphs, off_m)])
    machine_agg = _mean_matrix(e_m, e_op, (N_m, N_op))
    op_agg = _mean_matrix(e_op, e_m, (N_op, N_m))

    op_graph = np.repeat(np.arange(G), n_op)
    m_graph = np.repeat(np.arange(G), n_m)
    w = np.concatenate([g.buffer_w for g in graphs])
    nz = w != 0
    buffer_msg = _csr(ids[nz], op_graph[nz], w[nz], (N_op, G))
    pool_op = _csr(op_graph, ids, 1.0 / n_op[op_graph], (G, N_op))
    pool_m = _csr(m_graph, np.arange(N_m), 1.0 / n_m[m_graph], (G, N_m))

    pair_g = np.repeat(np.arange(G), n_pair)
    p_op = np.concatenate([g.pairs[:, 0] + o for g, o in zip(graphs, off_op)]) if A else np.zeros(0, int)
    p_m = np.concatenate([g.pairs[:, 1] + o for g, o in zip(graphs, off_m)]) if A else np.zeros(0, int)
    ones = np.ones(A)
    return GraphBatch(
        n_graphs=G,
        op_x=np.vstack([g.op_x for g in graphs]),
        machine_x=np.vstack([g.machine_x for g in graphs]),
        buffer_x=np.vstack([g.buffer_x for g in graphs]),
        pred=P_pred, succ=P_succ, machine_agg=machine_agg, op_agg=op_agg, buffer_msg=buffer_msg,
        pool_op=pool_op, pool_machine=pool_m,
        pair_op=_csr(np.arange(A), p_op, ones, (A, N_op)),
        pair_machine=_csr(np.arange(A), p_m, ones, (A, N_m)),
        pair_graph=_csr(np.arange(A), pair_g, ones, (A, G)),
        pair_offsets=np.concatenate([[0], np.cumsum(n_pair)[:-1]]).astype(np.int64),
        pair_counts=n_pair,
    )


# ---------------------------------------------------------------- forward

def _act(cfg: NetConfig):
    return ag.tanh if cfg.activation == "tanh" else ag.relu


def _dense(x: Var, P: dict, name: str) -> Var:
    return ag.add(ag.matmul(x, P[f"{name}.W"]), P[f"{name}.b"])


def _leaves(params) -> dict:
    if isinstance(params, PolicyParams):
        return params.leaves()
    return params


def encode_inputs(batch: GraphBatch, P: dict, cfg: NetConfig):
    act = _act(cfg)
    h_op = act(_dense(Var(batch.op_x), P, "enc_op"))
    h_m = act(_dense(Var(batch.machine_x), P, "enc_machine"))
    e_buf = act(_dense(Var(batch.buffer_x), P, "enc_buffer"))
    return h_op, h_m, e_buf


def machine_embedding(batch: GraphBatch, h_op: Var, h_m: Var, P: dict, cfg: NetConfig, layer: int) -> Var:
    neigh = ag.spmm(batch.machine_agg, h_op)  # zero rows for machines without neighbours
    out = _act(cfg)(_dense(ag.concat([h_m, neigh]), P, f"machine_{layer}"))
    return ag.check_finite(out, f"machine_{layer}")


def operation_buffer_embedding(batch: GraphBatch, e_buf: Var) -> Var:
    """delta_o = w_o * enc(buffer of o's graph); zero for ops without a buffer edge."""
    return ag.spmm(batch.buffer_msg, e_buf)


def operation_embedding(batch: GraphBatch, h_op: Var, h_m: Var, delta: Var, P: dict, cfg: NetConfig,
                        layer: int) -> Var:
    if delta.shape != h_op.shape:
        raise ValueError(f"delta shape {delta.shape} does not match op embeddings {h_op.shape}")
    parts = [h_op, ag.spmm(batch.pred, h_op), ag.spmm(batch.succ, h_op), ag.spmm(batch.op_agg, h_m), delta]
    out = _act(cfg)(_dense(ag.concat(parts), P, f"op_{layer}"))
    return ag.check_finite(out, f"op_{layer}")


@dataclass
class Embeddings:
    op: Var
    machine: Var
    delta: Var
    graph: Var


def embed(batch: GraphBatch, params, cfg: NetConfig | None = None, delta_override: Var | None = None) -> Embeddings:
    P = _leaves(params)
    cfg = cfg or params.config
    h_op, h_m, e_buf = encode_inputs(batch, P, cfg)
    delta = operation_buffer_embedding(batch, e_buf) if delta_override is None else delta_override
    for k in range(cfg.gnn_layers):
        h_m = machine_embedding(batch, h_op, h_m, P, cfg, k)
        h_op = operation_embedding(batch, h_op, h_m, delta, P, cfg, k)
    g = ag.concat([ag.spmm(batch.pool_op, h_op), ag.spmm(batch.pool_machine, h_m)])
    return Embeddings(h_op, h_m, delta, g)


@dataclass
class PolicyOutput:
    logits: Var  # (A, 1)
    log_probs: Var  # (A, 1), normalised within each graph's eligible pairs
    value: Var  # (G, 1)
    embeddings: Embeddings

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.value.reshape(-1))


def actor_critic(batch: GraphBatch, emb: Embeddings, P: dict, cfg: NetConfig) -> PolicyOutput:
    if batch.n_pairs == 0 or np.any(batch.pair_counts == 0):
        raise ValueError("every graph needs at least one eligible pair")
    act = _act(cfg)
    pair_in = ag.concat([ag.spmm(batch.pair_op, emb.op), ag.spmm(batch.pair_machine, emb.machine),
                         ag.spmm(batch.pair_graph, emb.graph)])
    logits = _dense(act(_dense(pair_in, P, "actor_hidden")), P, "actor_out")
    logits = ag.check_finite(logits, "actor_out")
    log_probs = ag.segment_log_softmax(logits, batch.pair_offsets)
    value = _dense(act(_dense(emb.graph, P, "critic_hidden")), P, "critic_out")
    value = ag.check_finite(value, "critic_out")
    return PolicyOutput(logits, log_probs, value, emb)


def forward(batch: GraphBatch, params, cfg: NetConfig | None = None) -> PolicyOutput:
    """Full pass; pass a ``PolicyParams`` or a dict of leaf ``Var`` (to get gradients)."""
    cfg = cfg or params.config
    P = _leaves(params)
    emb = embed(batch, P, cfg)
    return actor_critic(batch, emb, P, cfg)


def backward(loss: Var, leaves: dict[str, Var]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every parameter leaf."""
    loss.backward()
    grads = {}
    for k, v in leaves.items():
        g = np.zeros_like(v.value) if v.grad is None else v.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {k}")
        grads[k] = g
    return grads


class Adam:
    """Adaptive moment estimation over a ``PolicyParams`` object."""

    def __init__(self, params: PolicyParams, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params: PolicyParams, grads: dict[str, np.ndarray], max_norm: float | None = None) -> float:
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        scale = 1.0 if max_norm is None or norm <= max_norm else max_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            g = g * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params.arrays[k] = params.arrays[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm
