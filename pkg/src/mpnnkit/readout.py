"""Graph-level readouts: order-invariant maps from node states to outputs.

All three readouts consume the final and initial node states and produce a
flat output vector with one entry per predicted target. Each is invariant
to node permutation: the gated and plain sums by commutativity, the
attention loop because its softmax weights travel with their rows.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as tt
from .engine import ModelConfig, NodeStates, _gru_params, mlp2
from .tensor import ContractError, Tensor

__all__ = [
    "readout_ggnn",
    "readout_set2set",
    "readout_dtnn_sum",
    "apply_readout",
]


def _with_master_rows(states: NodeStates, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Node states for the summing readouts, master appended when it fits.

    The master state can only join a sum over width-d rows when its width
    equals d; otherwise it is silently left out (its influence still reached
    every node during propagation).
    """
    h, h0 = states.h, states.h0
    if (states.master is not None and cfg.master_in_readout
            and cfg.d_master == cfg.d):
        h = tt.concat([h, states.master], axis=0)
        h0 = tt.concat([h0, states.master0], axis=0)
    return h, h0


def readout_ggnn(states: NodeStates, params: dict[str, Tensor],
                 cfg: ModelConfig) -> Tensor:
    """Gated sum: sigma(i(h_T, h_0)) * j(h_T), summed over nodes."""
    h, h0 = _with_master_rows(states, cfg)
    if h.data.shape[0] == 0:
        return Tensor(np.zeros(cfg.n_targets))
    gates = tt.sigmoid(mlp2(tt.concat([h, h0], axis=1), params, "ro_i"))
    values = mlp2(h, params, "ro_j")
    return tt.reduce_sum(tt.mul(gates, values), axis=0)


def readout_dtnn_sum(states: NodeStates, params: dict[str, Tensor],
                     cfg: ModelConfig) -> Tensor:
    """Sum of per-node MLP outputs."""
    h, _ = _with_master_rows(states, cfg)
    if h.data.shape[0] == 0:
        return Tensor(np.zeros(cfg.n_targets))
    return tt.reduce_sum(mlp2(h, params, "ro_nn"), axis=0)


def readout_set2set(states: NodeStates, params: dict[str, Tensor],
                    cfg: ModelConfig, M: Optional[int] = None) -> Tensor:
    """Attention over projected (h_T, h_0) tuples, M refinement steps.

    Each step advances a query with a gated recurrent cell whose input is
    the previous concat(query, glimpse), attends over the projected tuples
    by dot product, and reads a new glimpse. The final concat runs through
    an output MLP.
    """
    M = cfg.set2set_M if M is None else M
    if M < 1:
        raise ContractError("set2set needs at least one processing step")
    dq = cfg.query_dim
    memories = tt.matmul(tt.concat([states.h, states.h0], axis=1),
                         params["s2s_proj"])
    if states.master is not None and cfg.master_in_readout:
        master_tuple = tt.concat([states.master, states.master0], axis=1)
        memories = tt.concat(
            [memories, tt.matmul(master_tuple, params["s2s_master_proj"])], axis=0)
    n = memories.data.shape[0]
    q = Tensor(np.zeros((1, dq)))
    q_star = Tensor(np.zeros((1, 2 * dq)))
    gp = _gru_params(params, "s2s_gru")
    for _ in range(M):
        q = tt.gru_cell(q_star, q, gp)
        if n == 0:
            glimpse = Tensor(np.zeros((1, dq)))
        else:
            scores = tt.matmul(memories, tt.reshape(q, (dq, 1)))
            attn = tt.softmax(scores, axis=0)
            glimpse = tt.matmul(tt.reshape(attn, (1, n)), memories)
        q_star = tt.concat([q, glimpse], axis=1)
    out = mlp2(q_star, params, "s2s_out")
    return tt.reshape(out, (cfg.n_targets,))


def apply_readout(states: NodeStates, params: dict[str, Tensor],
                  cfg: ModelConfig) -> Tensor:
    if cfg.readout == "ggnn":
        return readout_ggnn(states, params, cfg)
    if cfg.readout == "set2set":
        return readout_set2set(states, params, cfg)
    return readout_dtnn_sum(states, params, cfg)
