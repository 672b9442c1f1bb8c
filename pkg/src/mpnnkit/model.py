"""End-to-end model: graph augmentation, encoding, propagation, readout."""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .engine import ModelConfig, propagate
from .molgraph import (
    EncodedGraph,
    MolecularGraph,
    add_master_node,
    add_virtual_edges,
    encode,
)
from .readout import apply_readout
from .tensor import ContractError, Tensor

__all__ = ["prepare_graph", "model_forward", "predict_batch"]


def prepare_graph(g: MolecularGraph, cfg: ModelConfig) -> EncodedGraph:
    """Apply configured augmentations and encode the molecule."""
    if g.explicit_hydrogens != cfg.explicit_hydrogens:
        raise ContractError(
            "graph hydrogen convention does not match the model config")
    if cfg.virtual_edges:
        g = add_virtual_edges(g)
    if cfg.d_master:
        g = add_master_node(g, cfg.d_master)
    return encode(g, cfg.edge_repr, cfg.include_partial_charge)


def model_forward(eg: EncodedGraph, params: dict[str, Tensor],
                  cfg: ModelConfig) -> Tensor:
    """One graph in, one output vector of width n_targets out."""
    states = propagate(eg, params, cfg)
    return apply_readout(states, params, cfg)


def predict_batch(egs: list[EncodedGraph], params: dict[str, Tensor],
                  cfg: ModelConfig) -> Tensor:
    """Stack per-graph outputs into a (batch, n_targets) tensor."""
    rows = [tt.reshape(model_forward(eg, params, cfg), (1, cfg.n_targets))
            for eg in egs]
    return tt.concat(rows, axis=0) if rows else Tensor(np.zeros((0, cfg.n_targets)))
