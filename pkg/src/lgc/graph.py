"""Undirected weighted graphs, shift operators, and polynomial graph filters.

A graph on n agents induces a support matrix S (adjacency, Laplacian, or
symmetric-normalized Laplacian) whose sparsity matches the communication
topology.  A filter bank {H_k} acts on node signals x (one row per agent)
as sum_{k=0..K} S^k x H_k: information from exactly k hops away enters
through the k-th tap, which is what makes the filters distributed.

The reduced filter variant restricts communication to a subset of signal
columns: excluded columns skip the shift and pass through the identity at
every tap, so they stay purely local to each agent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _kernels


class SupportKind(str, Enum):
    ADJACENCY = "adjacency"
    LAPLACIAN = "laplacian"
    NORMALIZED_LAPLACIAN = "normalized_laplacian"


@dataclass(frozen=True)
class Graph:
    """Undirected weighted graph with no self-loops.

    Edges are stored canonically as (i, j, w) with i < j and w > 0.
    """

    n: int
    edges: tuple = ()

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("graph needs at least one node")
        seen = set()
        canon = []
        for e in self.edges:
            i, j, w = int(e[0]), int(e[1]), float(e[2])
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i},{j}) out of range for n={self.n}")
            if w <= 0:
                raise ValueError(f"edge ({i},{j}) has non-positive weight {w}")
            if i > j:
                i, j = j, i
            if (i, j) in seen:
                raise ValueError(f"duplicate edge ({i},{j})")
            seen.add((i, j))
            canon.append((i, j, w))
        object.__setattr__(self, "edges", tuple(canon))

    def adjacency(self):
        a = np.zeros((self.n, self.n), dtype=np.float64)
        for i, j, w in self.edges:
            a[i, j] = w
            a[j, i] = w
        return a

    def degrees(self):
        return self.adjacency().sum(axis=1)

    def to_json(self):
        return json.dumps({"n": self.n, "edges": [[i, j, w] for i, j, w in self.edges]})

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(n=int(doc["n"]), edges=tuple((e[0], e[1], e[2]) for e in doc["edges"]))

    def to_dict(self):
        return {"n": self.n, "edges": [[i, j, w] for i, j, w in self.edges]}

    @classmethod
    def from_dict(cls, doc):
        return cls(n=int(doc["n"]), edges=tuple((e[0], e[1], e[2]) for e in doc["edges"]))


@dataclass(frozen=True)
class SupportMatrix:
    """A shift operator with its precomputed powers S^0 .. S^K."""

    kind: SupportKind
    matrix: np.ndarray
    order: int
    powers: np.ndarray = field(repr=False, default=None)

    @property
    def n(self):
        return self.matrix.shape[0]


def build_support(graph, kind, order):
    """Assemble the support matrix of `kind` for `graph` with powers up to `order`.

    The normalized Laplacian is D^{-1/2} (D - A) D^{-1/2}; isolated nodes
    contribute zero rows and columns rather than NaNs.
    """
    if order < 0:
        raise ValueError("filter order must be non-negative")
    kind = SupportKind(kind)
    a = graph.adjacency()
    d = a.sum(axis=1)
    if kind is SupportKind.ADJACENCY:
        s = a
    elif kind is SupportKind.LAPLACIAN:
        s = np.diag(d) - a
    else:
        with np.errstate(divide="ignore"):
            dinv = 1.0 / np.sqrt(d)
        dinv[~np.isfinite(dinv)] = 0.0
        s = dinv[:, None] * (np.diag(d) - a) * dinv[None, :]
    s = np.ascontiguousarray(s, dtype=np.float64)
    powers = np.empty((order + 1, graph.n, graph.n), dtype=np.float64)
    powers[0] = np.eye(graph.n)
    for k in range(1, order + 1):
        powers[k] = powers[k - 1] @ s
    return SupportMatrix(kind=kind, matrix=s, order=order, powers=powers)


@dataclass(frozen=True)
class FilterBank:
    """Tap weights (K+1, G, F) for a polynomial graph filter."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 3:
            raise ValueError("filter bank must be (taps, in_features, out_features)")
        object.__setattr__(self, "weights", w)

    @property
    def order(self):
        return self.weights.shape[0] - 1

    @property
    def in_features(self):
        return self.weights.shape[1]

    @property
    def out_features(self):
        return self.weights.shape[2]


def apply_shift(support, x):
    """One shift S x: each agent aggregates its neighbours' rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != support.n:
        raise ValueError(f"signal has {x.shape[0]} rows, support expects {support.n}")
    return support.matrix @ x


def _check_filter_args(support, x, bank):
    if x.shape[0] != support.n:
        raise ValueError(f"signal has {x.shape[0]} rows, support expects {support.n}")
    if bank.order != support.order:
        raise ValueError(
            f"bank has order {bank.order} but support powers go to {support.order}"
        )
    if x.shape[1] != bank.in_features:
        raise ValueError(
            f"signal has {x.shape[1]} columns, bank expects {bank.in_features}"
        )


def graph_filter(support, x, bank):
    """Full-communication polynomial filter sum_k S^k x H_k."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    _check_filter_args(support, x, bank)
    return _kernels.filter_apply(support.powers, x, bank.weights)


def reduced_graph_filter(support, x, bank, comm_mask):
    """Polynomial filter where only masked-in columns are communicated.

    comm_mask: (G,) booleans; False columns use the identity at every tap
    and therefore never leave the agent.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    _check_filter_args(support, x, bank)
    mask = np.ascontiguousarray(comm_mask, dtype=np.float64)
    if mask.shape != (bank.in_features,):
        raise ValueError("comm_mask length must match bank input features")
    return _kernels.masked_filter_apply(support.powers, x, bank.weights, mask)
