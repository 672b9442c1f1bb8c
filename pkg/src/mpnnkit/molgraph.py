"""Molecular graphs and their encodings as message passing inputs.

A molecule is a list of atoms plus undirected bonds. Three edge encodings
are supported:

* ``chemical``: edges exist only where bonds do; each edge carries a
  discrete label (single/double/triple/aromatic, plus a virtual label when
  the graph was fully connected with virtual edges).
* ``distance_bins``: fully connected; bonded pairs keep their bond label,
  unbonded pairs get 4 + a distance bin, giving an alphabet of 14 symbols.
* ``raw_distance``: fully connected; each edge carries the 5-vector
  [distance, one-hot(4) bond type], all-zero one-hot for unbonded pairs.

Augmentations: ``add_virtual_edges`` fully connects the chemical graph with
a dedicated edge type; ``add_master_node`` attaches one extra latent node
(its id is ``len(atoms)``) connected to every atom. The master node has no
chemical features, so encoders keep it out of ``node_features`` and
``edge_list``; the propagation engine reads ``master_dim`` instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .tensor import ContractError

__all__ = [
    "Atom",
    "Bond",
    "MolecularGraph",
    "EncodedGraph",
    "UnsupportedElementError",
    "ELEMENTS",
    "HEAVY_ELEMENTS",
    "BOND_TYPES",
    "BOND_LABELS",
    "VIRTUAL_LABEL",
    "HYBRIDIZATIONS",
    "TARGET_NAMES",
    "EDGE_REPRS",
    "ATOM_FEATURE_WIDTH",
    "NUM_DISTANCE_BINS",
    "DISTANCE_BINS_ALPHABET",
    "featurize_atom",
    "bin_distance",
    "encode",
    "add_virtual_edges",
    "add_master_node",
    "to_directed",
    "edge_alphabet_size",
    "edge_feature_width",
]


class UnsupportedElementError(ValueError):
    """Element symbol outside the supported set {H, C, N, O, F}."""


ELEMENTS = {"H": 1, "C": 6, "N": 7, "O": 8, "F": 9}
HEAVY_ELEMENTS = frozenset(e for e in ELEMENTS if e != "H")

BOND_TYPES = ("single", "double", "triple", "aromatic")
AUGMENT_TYPES = ("virtual", "master")
BOND_LABELS = {t: i for i, t in enumerate(BOND_TYPES)}
VIRTUAL_LABEL = 4

HYBRIDIZATIONS = ("sp", "sp2", "sp3")

# Fixed property order used by targets vectors, reports, and the CLI.
TARGET_NAMES = ("mu", "alpha", "homo", "lumo", "gap", "r2", "zpve",
                "u0", "u", "h", "g", "cv", "omega")

EDGE_REPRS = ("chemical", "distance_bins", "raw_distance")

# one-hot(5) element + atomic number + acceptor + donor + aromatic
# + one-hot-or-zero(3) hybridization + hydrogen count
ATOM_FEATURE_WIDTH = 13

NUM_DISTANCE_BINS = 10
DISTANCE_BINS_ALPHABET = len(BOND_TYPES) + NUM_DISTANCE_BINS  # 14


@dataclass(frozen=True)
class Atom:
    element: str
    acceptor: bool = False
    donor: bool = False
    aromatic: bool = False
    hybridization: Optional[str] = None  # sp, sp2, sp3, or None
    hydrogen_count: int = 0
    position: Optional[tuple[float, float, float]] = None
    partial_charge: Optional[float] = None

    def __post_init__(self):
        if self.element not in ELEMENTS:
            raise UnsupportedElementError(f"unsupported element {self.element!r}")
        if self.hybridization is not None and self.hybridization not in HYBRIDIZATIONS:
            raise ContractError(f"unknown hybridization {self.hybridization!r}")
        if self.hydrogen_count < 0:
            raise ContractError("hydrogen_count must be nonnegative")
        if self.position is not None:
            object.__setattr__(self, "position", tuple(float(c) for c in self.position))
            if len(self.position) != 3:
                raise ContractError("position must be a 3-vector")

    @property
    def atomic_number(self) -> int:
        return ELEMENTS[self.element]


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    bond_type: str
    distance: Optional[float] = None

    def __post_init__(self):
        if self.bond_type not in BOND_TYPES + AUGMENT_TYPES:
            raise ContractError(f"unknown bond type {self.bond_type!r}")
        if self.i == self.j:
            raise ContractError("bond endpoints must be distinct")
        if self.i < 0 or self.j < 0:
            raise ContractError("bond endpoints must be nonnegative node ids")
        if self.distance is not None and self.distance < 0:
            raise ContractError("bond distance must be nonnegative")

    @property
    def is_chemical(self) -> bool:
        return self.bond_type in BOND_TYPES


@dataclass(frozen=True)
class MolecularGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    explicit_hydrogens: bool = False
    targets: Optional[tuple[float, ...]] = None
    # Width of the latent master node's state; 0 means no master node.
    # When nonzero, node id len(atoms) refers to the master node.
    master_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        object.__setattr__(self, "bonds", tuple(self.bonds))
        if self.targets is not None:
            object.__setattr__(self, "targets", tuple(float(t) for t in self.targets))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_nodes(self) -> int:
        return len(self.atoms) + (1 if self.master_dim else 0)

    @property
    def master_id(self) -> Optional[int]:
        return len(self.atoms) if self.master_dim else None

    def heavy_atom_count(self) -> int:
        return sum(1 for a in self.atoms if a.element != "H")

    def positions(self) -> np.ndarray:
        """Stacked atom coordinates; raises when any are missing."""
        if any(a.position is None for a in self.atoms):
            raise ContractError("graph has atoms without positions")
        return np.array([a.position for a in self.atoms], dtype=np.float64)

    def validate(self) -> "MolecularGraph":
        n = self.n_nodes
        seen: set[frozenset[int]] = set()
        for b in self.bonds:
            if b.i >= n or b.j >= n:
                raise ContractError(f"bond ({b.i},{b.j}) references a missing node")
            touches_master = self.master_dim and self.master_id in (b.i, b.j)
            if touches_master and b.bond_type != "master":
                raise ContractError("edges at the master node must have type master")
            if not touches_master and b.bond_type == "master":
                raise ContractError("master edge on a graph without a master node")
            key = frozenset((b.i, b.j))
            if key in seen:
                raise ContractError(f"duplicate bond between {b.i} and {b.j}")
            seen.add(key)
        if self.heavy_atom_count() > 9:
            raise ContractError("more than 9 heavy atoms")
        if self.explicit_hydrogens:
            if self.n_atoms > 29:
                raise ContractError("more than 29 explicit-hydrogen nodes")
            if any(a.hydrogen_count for a in self.atoms):
                raise ContractError("hydrogen_count must be 0 with explicit hydrogens")
        if self.targets is not None and len(self.targets) != len(TARGET_NAMES):
            raise ContractError(f"targets must have {len(TARGET_NAMES)} entries")
        return self

    # -- serialization (one JSON object per molecule) -----------------------

    def to_dict(self) -> dict:
        atoms = []
        for a in self.atoms:
            entry = {
                "element": a.element,
                "acceptor": a.acceptor,
                "donor": a.donor,
                "aromatic": a.aromatic,
                "hybridization": a.hybridization,
                "hydrogen_count": a.hydrogen_count,
            }
            if a.partial_charge is not None:
                entry["partial_charge"] = a.partial_charge
            atoms.append(entry)
        bonds = []
        for b in self.bonds:
            entry = {"i": b.i, "j": b.j, "type": b.bond_type}
            if b.distance is not None:
                entry["distance"] = b.distance
            bonds.append(entry)
        have_pos = all(a.position is not None for a in self.atoms) and self.atoms
        out = {
            "atoms": atoms,
            "bonds": bonds,
            "positions": [list(a.position) for a in self.atoms] if have_pos else None,
            "targets": list(self.targets) if self.targets is not None else None,
            "explicit_hydrogens": self.explicit_hydrogens,
        }
        if self.master_dim:
            out["master_dim"] = self.master_dim
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "MolecularGraph":
        positions = obj.get("positions")
        atoms = []
        for idx, entry in enumerate(obj["atoms"]):
            pos = tuple(positions[idx]) if positions is not None else None
            atoms.append(Atom(
                element=entry["element"],
                acceptor=bool(entry.get("acceptor", False)),
                donor=bool(entry.get("donor", False)),
                aromatic=bool(entry.get("aromatic", False)),
                hybridization=entry.get("hybridization"),
                hydrogen_count=int(entry.get("hydrogen_count", 0)),
                position=pos,
                partial_charge=entry.get("partial_charge"),
            ))
        bonds = tuple(
            Bond(i=int(e["i"]), j=int(e["j"]), bond_type=e["type"],
                 distance=e.get("distance"))
            for e in obj["bonds"]
        )
        return cls(
            atoms=tuple(atoms),
            bonds=bonds,
            explicit_hydrogens=bool(obj.get("explicit_hydrogens", False)),
            targets=tuple(obj["targets"]) if obj.get("targets") is not None else None,
            master_dim=int(obj.get("master_dim", 0)),
        ).validate()


@dataclass(frozen=True)
class EncodedGraph:
    """A molecule flattened into arrays the propagation engine consumes.

    Edges are directed and cover both orientations of every undirected pair.
    ``edge_features`` is an int label array for discrete representations and
    an (m, 5) float array for raw_distance. The master node, when present,
    is not part of these arrays; ``master_dim`` signals the engine to attach
    its latent state separately.
    """

    node_features: np.ndarray          # (n, d_in) float64
    edge_src: np.ndarray               # (m,) int source node per directed edge
    edge_dst: np.ndarray               # (m,) int destination node
    edge_features: np.ndarray          # (m,) int labels or (m, 5) float
    representation: str
    master_dim: int = 0

    @property
    def n_atoms(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_src.shape[0]


def featurize_atom(a: Atom, include_partial_charge: bool = False) -> np.ndarray:
    """Fixed-width atom feature vector.

    Layout: one-hot(5) element, atomic number, acceptor, donor, aromatic,
    one-hot(3) hybridization (all zero when unset), hydrogen count, and the
    partial charge appended only when requested.
    """
    if a.element not in ELEMENTS:
        raise UnsupportedElementError(f"unsupported element {a.element!r}")
    width = ATOM_FEATURE_WIDTH + (1 if include_partial_charge else 0)
    v = np.zeros(width)
    v[list(ELEMENTS).index(a.element)] = 1.0
    v[5] = float(a.atomic_number)
    v[6] = float(a.acceptor)
    v[7] = float(a.donor)
    v[8] = float(a.aromatic)
    if a.hybridization is not None:
        v[9 + HYBRIDIZATIONS.index(a.hybridization)] = 1.0
    v[12] = float(a.hydrogen_count)
    if include_partial_charge:
        if a.partial_charge is None:
            raise ContractError("partial charge requested but absent on atom")
        v[13] = a.partial_charge
    return v


def bin_distance(dist: float) -> int:
    """Distance bin: [0,2) -> 0, eight 0.5-wide bins over [2,6) -> 1..8,
    [6,inf) -> 9. Boundary points belong to the upper bin."""
    if dist < 0:
        raise ContractError("distance must be nonnegative")
    if not math.isfinite(dist):
        raise ContractError("distance must be finite")
    if dist < 2.0:
        return 0
    if dist >= 6.0:
        return 9
    return 1 + int((dist - 2.0) // 0.5)


def edge_alphabet_size(representation: str, virtual_edges: bool = False) -> int:
    """Number of discrete edge labels a model must allocate matrices for."""
    if representation == "chemical":
        return len(BOND_TYPES) + (1 if virtual_edges else 0)
    if representation == "distance_bins":
        return DISTANCE_BINS_ALPHABET
    raise ContractError(f"representation {representation!r} has no discrete alphabet")


def edge_feature_width(representation: str, virtual_edges: bool = False) -> int:
    """Width of the continuous edge vector (one-hot width for discrete labels)."""
    if representation == "raw_distance":
        return 5
    return edge_alphabet_size(representation, virtual_edges)


def _chemical_pairs(g: MolecularGraph) -> dict[tuple[int, int], str]:
    """Unordered atom pair -> chemical bond type, augmentation edges excluded."""
    out = {}
    for b in g.bonds:
        if b.is_chemical:
            out[(min(b.i, b.j), max(b.i, b.j))] = b.bond_type
    return out


def encode(g: MolecularGraph, representation: str,
           include_partial_charge: bool = False) -> EncodedGraph:
    """Flatten a molecule into node features plus a directed edge list."""
    if representation not in EDGE_REPRS:
        raise ContractError(f"unknown edge representation {representation!r}")
    node_features = (
        np.stack([featurize_atom(a, include_partial_charge) for a in g.atoms])
        if g.atoms else np.zeros((0, ATOM_FEATURE_WIDTH + bool(include_partial_charge)))
    )
    bonded = _chemical_pairs(g)

    pairs: list[tuple[int, int]] = []
    feats: list = []
    if representation == "chemical":
        for b in g.bonds:
            if b.bond_type == "master":
                continue
            label = VIRTUAL_LABEL if b.bond_type == "virtual" else BOND_LABELS[b.bond_type]
            pairs.append((b.i, b.j))
            feats.append(label)
        features = np.array(feats, dtype=np.intp)
    else:
        pos = g.positions()
        n = g.n_atoms
        for i in range(n):
            for j in range(i + 1, n):
                dist = float(np.linalg.norm(pos[i] - pos[j]))
                bond = bonded.get((i, j))
                pairs.append((i, j))
                if representation == "distance_bins":
                    if bond is not None:
                        feats.append(BOND_LABELS[bond])
                    else:
                        feats.append(len(BOND_TYPES) + bin_distance(dist))
                else:
                    vec = np.zeros(5)
                    vec[0] = dist
                    if bond is not None:
                        vec[1 + BOND_LABELS[bond]] = 1.0
                    feats.append(vec)
        features = (np.array(feats, dtype=np.intp) if representation == "distance_bins"
                    else (np.stack(feats) if feats else np.zeros((0, 5))))

    # Both orientations of every undirected pair, features duplicated.
    src = np.array([p[0] for p in pairs] + [p[1] for p in pairs], dtype=np.intp)
    dst = np.array([p[1] for p in pairs] + [p[0] for p in pairs], dtype=np.intp)
    if features.ndim == 1:
        directed_features = np.concatenate([features, features])
    else:
        directed_features = (np.concatenate([features, features], axis=0)
                             if features.size else features)
    return EncodedGraph(
        node_features=node_features,
        edge_src=src,
        edge_dst=dst,
        edge_features=directed_features,
        representation=representation,
        master_dim=g.master_dim,
    )


def add_virtual_edges(g: MolecularGraph) -> MolecularGraph:
    """Fully connect the atom graph; new pairs get bond_type=virtual."""
    existing = {frozenset((b.i, b.j)) for b in g.bonds if b.bond_type != "master"}
    extra = []
    for i in range(g.n_atoms):
        for j in range(i + 1, g.n_atoms):
            if frozenset((i, j)) not in existing:
                extra.append(Bond(i, j, "virtual"))
    if not extra:
        return g
    return replace(g, bonds=g.bonds + tuple(extra))


def add_master_node(g: MolecularGraph, d_master: int) -> MolecularGraph:
    """Attach one latent node (id = n_atoms) connected to every atom."""
    if d_master < 1:
        raise ContractError("master node width must be at least 1")
    if g.master_dim:
        raise ContractError("graph already has a master node")
    mid = g.n_atoms
    extra = tuple(Bond(mid, v, "master") for v in range(g.n_atoms))
    return replace(g, bonds=g.bonds + extra, master_dim=int(d_master))


def to_directed(g: MolecularGraph) -> list[tuple[int, int, Bond]]:
    """Both orientations of every bond as (source, destination, bond) triples."""
    out = []
    for b in g.bonds:
        out.append((b.i, b.j, b))
        out.append((b.j, b.i, b))
    return out
