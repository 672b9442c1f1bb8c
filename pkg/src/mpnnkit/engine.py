"""Message passing over encoded molecular graphs.

One propagation step sends a message along every directed edge, sums the
arrivals per node and channel, and feeds the concatenated channels through
a gated update, the same weights at every step. Channels: for a node v,
the *in* channel collects messages computed from the states at the far end
of edges arriving at v, the *out* channel collects messages computed from
the far end of edges leaving v. Both orientations of each undirected edge
exist, so the update input has width 2d.

Towers split the node state into k slices of width d/k, run an independent
message/update pair per slice, and remix the slices through a shared affine
map after every step.

A latent master node, when configured, exchanges messages with every atom
through dedicated linear maps and keeps its own gated update; it never
routes through the per-edge message functions (its width may differ from d).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tt
from .molgraph import (
    ATOM_FEATURE_WIDTH,
    EncodedGraph,
    edge_alphabet_size,
    edge_feature_width,
)
from .tensor import ContractError, GruParams, Tensor

__all__ = [
    "MESSAGE_FNS",
    "UPDATE_FNS",
    "READOUTS",
    "ModelConfig",
    "NodeStates",
    "init_params",
    "propagate",
    "message_matmul",
    "message_edge_network",
    "message_pair",
    "message_dtnn",
    "aggregate",
    "edge_vectors",
    "pad_features",
    "affine",
    "mlp2",
]

MESSAGE_FNS = ("matmul", "edge_network", "pair_message", "dtnn")
UPDATE_FNS = ("gru", "dtnn_residual")
READOUTS = ("ggnn", "set2set", "dtnn_sum")
CHANNELS = ("in", "out")


@dataclass(frozen=True)
class ModelConfig:
    message_fn: str
    update_fn: str = "gru"
    readout: str = "ggnn"
    T: int = 3
    d: int = 16
    towers_k: int = 1
    d_master: int = 0
    set2set_M: int = 3
    edge_repr: str = "chemical"
    explicit_hydrogens: bool = False
    virtual_edges: bool = False
    include_partial_charge: bool = False
    n_targets: int = 13
    master_in_readout: bool = True
    # None defaults to the per-tower state width d/k.
    edgenet_hidden: Optional[int] = None
    # None defaults to d.
    set2set_query_dim: Optional[int] = None

    def __post_init__(self):
        if self.message_fn not in MESSAGE_FNS:
            raise ContractError(f"unknown message function {self.message_fn!r}")
        if self.update_fn not in UPDATE_FNS:
            raise ContractError(f"unknown update function {self.update_fn!r}")
        if self.readout not in READOUTS:
            raise ContractError(f"unknown readout {self.readout!r}")
        if self.T < 1:
            raise ContractError("T must be at least 1")
        if self.d < 1:
            raise ContractError("node dim must be positive")
        if self.towers_k < 1 or self.d % self.towers_k != 0:
            raise ContractError(
                f"towers count {self.towers_k} must divide node dim {self.d}")
        if self.d_master < 0:
            raise ContractError("master width must be nonnegative")
        if self.d_master and self.towers_k > 1:
            raise ContractError("master node does not combine with towers")
        if self.set2set_M < 1:
            raise ContractError("set2set needs at least one processing step")
        if self.message_fn == "matmul" and self.edge_repr == "raw_distance":
            raise ContractError(
                "matmul message needs discrete edge labels, not raw distances")
        if self.edge_repr not in ("chemical", "distance_bins", "raw_distance"):
            raise ContractError(f"unknown edge representation {self.edge_repr!r}")

    @property
    def d_in(self) -> int:
        return ATOM_FEATURE_WIDTH + (1 if self.include_partial_charge else 0)

    @property
    def d_tower(self) -> int:
        return self.d // self.towers_k

    @property
    def edge_width(self) -> int:
        return edge_feature_width(self.edge_repr, self.virtual_edges)

    @property
    def alphabet(self) -> Optional[int]:
        if self.edge_repr == "raw_distance":
            return None
        return edge_alphabet_size(self.edge_repr, self.virtual_edges)

    @property
    def query_dim(self) -> int:
        return self.set2set_query_dim if self.set2set_query_dim else self.d

    @property
    def hidden_edgenet(self) -> int:
        return self.edgenet_hidden if self.edgenet_hidden else self.d_tower


@dataclass
class NodeStates:
    """Per-node states after propagation, plus what the readouts need."""

    h: Tensor          # (n, d) final states
    h0: Tensor         # (n, d) padded input features
    master: Optional[Tensor] = None    # (1, d_master) final master state
    master0: Optional[Tensor] = None   # (1, d_master) learned initial state


# ---------------------------------------------------------------------------
# Parameter creation
# ---------------------------------------------------------------------------


def _gru_shapes(d_in: int, d: int) -> list[tuple[str, tuple[int, int]]]:
    return [("wz", (d_in, d)), ("uz", (d, d)), ("wr", (d_in, d)),
            ("ur", (d, d)), ("wh", (d_in, d)), ("uh", (d, d))]


def _message_shapes(cfg: ModelConfig, prefix: str) -> list[tuple[str, tuple]]:
    dt = cfg.d_tower
    ew = cfg.edge_width
    if cfg.message_fn == "matmul":
        return [(f"{prefix}_A{l}", (dt, dt)) for l in range(cfg.alphabet)]
    if cfg.message_fn == "edge_network":
        hidden = cfg.hidden_edgenet
        return [(f"{prefix}_en_w1", (ew, hidden)), (f"{prefix}_en_b1", (hidden,)),
                (f"{prefix}_en_w2", (hidden, dt * dt)), (f"{prefix}_en_b2", (dt * dt,))]
    if cfg.message_fn == "pair_message":
        hidden = 2 * dt
        return [(f"{prefix}_pm_w1", (2 * dt + ew, hidden)), (f"{prefix}_pm_b1", (hidden,)),
                (f"{prefix}_pm_w2", (hidden, dt)), (f"{prefix}_pm_b2", (dt,))]
    hidden = dt
    return [(f"{prefix}_dtnn_wcf", (dt, hidden)), (f"{prefix}_dtnn_b1", (hidden,)),
            (f"{prefix}_dtnn_wdf", (ew, hidden)), (f"{prefix}_dtnn_b2", (hidden,)),
            (f"{prefix}_dtnn_wfc", (hidden, dt))]


def _mlp2_shapes(prefix: str, d_in: int, hidden: int, d_out: int) -> list[tuple[str, tuple]]:
    return [(f"{prefix}_w1", (d_in, hidden)), (f"{prefix}_b1", (hidden,)),
            (f"{prefix}_w2", (hidden, d_out)), (f"{prefix}_b2", (d_out,))]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Every parameter name and shape, in the fixed creation order."""
    shapes: list[tuple[str, tuple]] = []
    for ch in CHANNELS:
        for t in range(cfg.towers_k):
            shapes += _message_shapes(cfg, f"msg_{ch}_t{t}")
    if cfg.update_fn == "gru":
        dt = cfg.d_tower
        for t in range(cfg.towers_k):
            shapes += [(f"gru_t{t}_{n}", s) for n, s in _gru_shapes(2 * dt, dt)]
    if cfg.towers_k > 1:
        shapes += [("mix_w", (cfg.d, cfg.d)), ("mix_b", (cfg.d,))]
    if cfg.d_master:
        dm = cfg.d_master
        shapes.append(("master_h0", (dm,)))
        for ch in CHANNELS:
            shapes += [(f"n2m_{ch}", (cfg.d, dm)), (f"m2n_{ch}", (dm, cfg.d))]
        if cfg.update_fn == "gru":
            shapes += [(f"master_gru_{n}", s) for n, s in _gru_shapes(2 * dm, dm)]
    out = cfg.n_targets
    if cfg.readout == "ggnn":
        shapes += _mlp2_shapes("ro_i", 2 * cfg.d, cfg.d, out)
        shapes += _mlp2_shapes("ro_j", cfg.d, cfg.d, out)
    elif cfg.readout == "dtnn_sum":
        shapes += _mlp2_shapes("ro_nn", cfg.d, cfg.d, out)
    else:
        dq = cfg.query_dim
        shapes.append(("s2s_proj", (2 * cfg.d, dq)))
        shapes += [(f"s2s_gru_{n}", s) for n, s in _gru_shapes(2 * dq, dq)]
        shapes += _mlp2_shapes("s2s_out", 2 * dq, cfg.d, out)
        if cfg.d_master and cfg.master_in_readout:
            shapes.append(("s2s_master_proj", (2 * cfg.d_master, dq)))
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Weights uniform in +-1/sqrt(fan_in), biases zero, deterministic order."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(("_b1", "_b2", "mix_b")) and len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# Small composites
# ---------------------------------------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias tiled over rows."""
    y = tt.matmul(x, w)
    return tt.add(y, tt.repeat_rows(b, y.data.shape[0]))


def mlp2(x: Tensor, params: dict[str, Tensor], prefix: str,
         hidden_act=tt.relu) -> Tensor:
    """Single-hidden-layer MLP: affine, activation, affine."""
    h = hidden_act(affine(x, params[f"{prefix}_w1"], params[f"{prefix}_b1"]))
    return affine(h, params[f"{prefix}_w2"], params[f"{prefix}_b2"])


def pad_features(features: np.ndarray, d: int) -> Tensor:
    """Input features zero-padded on the right up to the model width."""
    n, d_in = features.shape
    if d_in > d:
        raise ContractError(f"feature width {d_in} exceeds node dim {d}")
    out = np.zeros((n, d))
    out[:, :d_in] = features
    return Tensor(out)


def edge_vectors(eg: EncodedGraph, cfg: ModelConfig) -> Tensor:
    """Continuous per-edge vectors: raw 5-vectors, or one-hot labels."""
    if eg.representation == "raw_distance":
        return Tensor(eg.edge_features)
    labels = eg.edge_features
    width = cfg.edge_width
    if labels.size and labels.max() >= width:
        raise ContractError(
            f"edge label {int(labels.max())} outside alphabet of size {width}")
    out = np.zeros((labels.shape[0], width))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return Tensor(out)


# ---------------------------------------------------------------------------
# Single-edge message functions (contract form)
# ---------------------------------------------------------------------------


def message_matmul(h_w: Tensor, label: int, bank: list[Tensor]) -> Tensor:
    """A_label applied to the far-end state: returns h_w @ bank[label]."""
    if not 0 <= label < len(bank):
        raise ContractError(f"edge label {label} outside bank of size {len(bank)}")
    d = h_w.data.shape[-1]
    return tt.reshape(tt.matmul(tt.reshape(h_w, (1, d)), bank[label]), (d,))


def message_edge_network(h_w: Tensor, e: Tensor, params: dict[str, Tensor],
                         prefix: str) -> Tensor:
    """reshape(MLP(e)) applied to h_w; the MLP emits a d x d matrix per edge."""
    d = h_w.data.shape[-1]
    ew = e.data.size
    mat = mlp2(tt.reshape(e, (1, ew)), params, f"{prefix}_en")
    return tt.reshape(tt.matmul(tt.reshape(mat, (d, d)), tt.reshape(h_w, (d, 1))), (d,))


def message_pair(h_v: Tensor, h_w: Tensor, e: Tensor, params: dict[str, Tensor],
                 prefix: str) -> Tensor:
    """MLP over concat(h_w, h_v, e); h_v is the receiving node's state."""
    d = h_w.data.size
    x = tt.concat([tt.reshape(h_w, (1, d)), tt.reshape(h_v, (1, d)),
                   tt.reshape(e, (1, e.data.size))], axis=1)
    return tt.reshape(mlp2(x, params, f"{prefix}_pm"), (d,))


def message_dtnn(h_w: Tensor, e: Tensor, params: dict[str, Tensor],
                 prefix: str) -> Tensor:
    """tanh(W_fc((W_cf h_w + b1) * (W_df e + b2)))."""
    d = h_w.data.size
    hterm = affine(tt.reshape(h_w, (1, d)), params[f"{prefix}_dtnn_wcf"],
                   params[f"{prefix}_dtnn_b1"])
    eterm = affine(tt.reshape(e, (1, e.data.size)), params[f"{prefix}_dtnn_wdf"],
                   params[f"{prefix}_dtnn_b2"])
    out = tt.tanh(tt.matmul(tt.mul(hterm, eterm), params[f"{prefix}_dtnn_wfc"]))
    return tt.reshape(out, (out.data.size,))


def aggregate(in_messages: list[Tensor], out_messages: list[Tensor], d: int) -> Tensor:
    """Per-node message vector: concat(sum of in, sum of out), width 2d."""
    def total(msgs):
        if not msgs:
            return Tensor(np.zeros(d))
        acc = msgs[0]
        for m in msgs[1:]:
            acc = tt.add(acc, m)
        return acc
    return tt.concat([total(in_messages), total(out_messages)], axis=0)


# ---------------------------------------------------------------------------
# Batched propagation
# ---------------------------------------------------------------------------


def _batched_messages(h_slice: Tensor, far: np.ndarray, near: np.ndarray,
                      n: int, eg: EncodedGraph, evec: Optional[Tensor],
                      en_mats: Optional[Tensor], params: dict[str, Tensor],
                      prefix: str, cfg: ModelConfig) -> Tensor:
    """Sum of messages arriving at each node for one channel and tower.

    ``far`` indexes the state each message is computed from, ``near`` the
    node it is delivered to. ``en_mats`` carries the precomputed per-edge
    matrices for the edge-network message (they do not change across steps).
    """
    dt = h_slice.data.shape[1]
    if cfg.message_fn == "matmul":
        labels = eg.edge_features
        parts = None
        for label in np.unique(labels):
            sel = np.flatnonzero(labels == label)
            hw = tt.gather_rows(h_slice, far[sel])
            msg = tt.matmul(hw, params[f"{prefix}_A{int(label)}"])
            part = tt.scatter_sum_rows(msg, near[sel], n)
            parts = part if parts is None else tt.add(parts, part)
        return parts if parts is not None else Tensor(np.zeros((n, dt)))
    if cfg.message_fn == "edge_network":
        msgs = tt.batched_matvec(en_mats, tt.gather_rows(h_slice, far))
        return tt.scatter_sum_rows(msgs, near, n)
    if cfg.message_fn == "pair_message":
        x = tt.concat([tt.gather_rows(h_slice, far),
                       tt.gather_rows(h_slice, near), evec], axis=1)
        return tt.scatter_sum_rows(mlp2(x, params, f"{prefix}_pm"), near, n)
    hterm = affine(tt.gather_rows(h_slice, far), params[f"{prefix}_dtnn_wcf"],
                   params[f"{prefix}_dtnn_b1"])
    eterm = affine(evec, params[f"{prefix}_dtnn_wdf"], params[f"{prefix}_dtnn_b2"])
    msgs = tt.tanh(tt.matmul(tt.mul(hterm, eterm), params[f"{prefix}_dtnn_wfc"]))
    return tt.scatter_sum_rows(msgs, near, n)


def _gru_params(params: dict[str, Tensor], prefix: str) -> GruParams:
    return GruParams(wz=params[f"{prefix}_wz"], uz=params[f"{prefix}_uz"],
                     wr=params[f"{prefix}_wr"], ur=params[f"{prefix}_ur"],
                     wh=params[f"{prefix}_wh"], uh=params[f"{prefix}_uh"])


def propagate(eg: EncodedGraph, params: dict[str, Tensor], cfg: ModelConfig,
              steps: Optional[int] = None,
              message_counter: Optional[tt.MultiplyCounter] = None) -> NodeStates:
    """Run the message passing phase and return final node states.

    ``steps`` overrides cfg.T (0 returns the initial states unchanged).
    ``message_counter``, when given, accumulates the scalar multiplications
    spent computing messages (updates and mixing excluded), which is what
    the towers complexity claim is about.
    """
    def message_scope():
        return (tt.count_multiplies(message_counter) if message_counter is not None
                else contextlib.nullcontext())
    if eg.master_dim and eg.master_dim != cfg.d_master:
        raise ContractError(
            f"graph master width {eg.master_dim} differs from config {cfg.d_master}")
    if cfg.d_master and not eg.master_dim:
        raise ContractError("config expects a master node but the graph has none")
    n = eg.n_atoms
    T = cfg.T if steps is None else steps
    if T < 0:
        raise ContractError("step count must be nonnegative")
    h0 = pad_features(eg.node_features, cfg.d)
    h = h0
    k = cfg.towers_k
    dt = cfg.d_tower
    src, dst = eg.edge_src, eg.edge_dst

    evec = None
    if cfg.message_fn in ("edge_network", "pair_message", "dtnn") and eg.n_edges:
        evec = edge_vectors(eg, cfg)

    # Edge features never change across steps, so the edge-network matrices
    # are computed once per forward pass.
    en_mats: dict[tuple[str, int], Tensor] = {}
    if cfg.message_fn == "edge_network" and eg.n_edges:
        with message_scope():
            for ch in CHANNELS:
                for t in range(k):
                    en_mats[(ch, t)] = mlp2(evec, params, f"msg_{ch}_t{t}_en")

    master = None
    master0 = None
    if cfg.d_master:
        master0 = tt.reshape(params["master_h0"], (1, cfg.d_master))
        master = master0

    for _ in range(T):
        new_slices = []
        for t in range(k):
            h_slice = tt.slice_cols(h, t * dt, (t + 1) * dt) if k > 1 else h
            with message_scope():
                if eg.n_edges:
                    m_in = _batched_messages(h_slice, src, dst, n, eg, evec,
                                             en_mats.get(("in", t)), params,
                                             f"msg_in_t{t}", cfg)
                    m_out = _batched_messages(h_slice, dst, src, n, eg, evec,
                                              en_mats.get(("out", t)), params,
                                              f"msg_out_t{t}", cfg)
                else:
                    m_in = Tensor(np.zeros((n, dt)))
                    m_out = Tensor(np.zeros((n, dt)))
                if cfg.d_master:
                    m_in = tt.add(m_in, tt.repeat_rows(
                        tt.matmul(master, params["m2n_in"]), n))
                    m_out = tt.add(m_out, tt.repeat_rows(
                        tt.matmul(master, params["m2n_out"]), n))
            if cfg.update_fn == "gru":
                msg = tt.concat([m_in, m_out], axis=1)
                new_slices.append(tt.gru_cell(msg, h_slice, _gru_params(params, f"gru_t{t}")))
            else:
                new_slices.append(tt.add(h_slice, tt.add(m_in, m_out)))
        if cfg.d_master:
            with message_scope():
                h_sum = tt.reshape(tt.reduce_sum(h, axis=0), (1, cfg.d))
                mm = tt.concat([tt.matmul(h_sum, params["n2m_in"]),
                                tt.matmul(h_sum, params["n2m_out"])], axis=1)
            if cfg.update_fn == "gru":
                master = tt.gru_cell(mm, master, _gru_params(params, "master_gru"))
            else:
                half = cfg.d_master
                master = tt.add(master, tt.add(tt.slice_cols(mm, 0, half),
                                               tt.slice_cols(mm, half, 2 * half)))
        h_new = new_slices[0] if k == 1 else tt.concat(new_slices, axis=1)
        h = affine(h_new, params["mix_w"], params["mix_b"]) if k > 1 else h_new
    return NodeStates(h=h, h0=h0, master=master, master0=master0)
